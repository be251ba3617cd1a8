//! Nonlinear dynamic bicycle model of the ego vehicle, adaptive
//! linearization, and discretization.
//!
//! State `x = [X u Y v psi r]`: global position, body longitudinal and
//! lateral velocity, heading, yaw rate. Inputs are the throttle/brake force
//! and the front steering angle. Tire forces are linear in slip angle; the
//! slip terms divide by `u`, so below [`VehicleParams::u_low`] the model
//! switches to a kinematic bicycle with first-order lateral dynamics.

use nalgebra::{SMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat6x2 = SMatrix<f64, 6, 2>;

/// Ego vehicle state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// Global x position of the centre of mass [m].
    pub x: f64,
    /// Body-frame longitudinal velocity [m/s].
    pub u: f64,
    /// Global y position [m].
    pub y: f64,
    /// Body-frame lateral velocity [m/s].
    pub v: f64,
    /// Heading [rad].
    pub psi: f64,
    /// Yaw rate [rad/s].
    pub r: f64,
}

impl EgoState {
    pub fn to_vector(self) -> Vector6<f64> {
        Vector6::new(self.x, self.u, self.y, self.v, self.psi, self.r)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            x: v[0],
            u: v[1],
            y: v[2],
            v: v[3],
            psi: v[4],
            r: v[5],
        }
    }

    pub fn position(&self) -> nalgebra::Point2<f64> {
        nalgebra::Point2::new(self.x, self.y)
    }

    /// Velocity in the global frame.
    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(
            self.u * self.psi.cos() - self.v * self.psi.sin(),
            self.u * self.psi.sin() + self.v * self.psi.cos(),
        )
    }
}

/// Throttle/brake force [N] and front steering angle [rad].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub force: f64,
    pub steer: f64,
}

impl ControlInput {
    pub fn clamped(self, f_max: f64, delta_max: f64) -> Self {
        Self {
            force: self.force.clamp(-f_max, f_max),
            steer: self.steer.clamp(-delta_max, delta_max),
        }
    }
}

/// Bicycle model parameters (mid-size sedan defaults).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Mass [kg].
    pub mass: f64,
    /// Yaw inertia [kg m^2].
    pub yaw_inertia: f64,
    /// Distance centre of mass to front axle [m].
    pub lf: f64,
    /// Distance centre of mass to rear axle [m].
    pub lr: f64,
    /// Front cornering stiffness [N/rad].
    pub cf: f64,
    /// Rear cornering stiffness [N/rad].
    pub cr: f64,
    /// Vehicle body width, used by clearance metrics [m].
    pub width: f64,
    /// Quadratic drag coefficient [N s^2/m^2]; zero by default.
    pub drag: f64,
    /// Below this speed the kinematic fallback applies [m/s].
    pub u_low: f64,
    /// Time constant of the fallback's lateral dynamics [s].
    pub tau_low: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            yaw_inertia: 2500.0,
            lf: 1.2,
            lr: 1.6,
            cf: 80_000.0,
            cr: 80_000.0,
            width: 1.85,
            drag: 0.0,
            u_low: 1.0,
            tau_low: 0.2,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }
}

/// Continuous-time state derivative.
pub fn f_nonlinear(x: &EgoState, u_c: &ControlInput, p: &VehicleParams) -> Vector6<f64> {
    if x.u < p.u_low {
        return f_kinematic(x, u_c, p);
    }
    let (cpsi, spsi) = (x.psi.cos(), x.psi.sin());
    let (cd, sd) = (u_c.steer.cos(), u_c.steer.sin());
    let alpha_f = u_c.steer - (x.v + p.lf * x.r) / x.u;
    let alpha_r = -(x.v - p.lr * x.r) / x.u;
    let fyf = p.cf * alpha_f;
    let fyr = p.cr * alpha_r;
    Vector6::new(
        x.u * cpsi - x.v * spsi,
        x.v * x.r + (u_c.force - fyf * sd - p.drag * x.u * x.u) / p.mass,
        x.u * spsi + x.v * cpsi,
        -x.u * x.r + (fyf * cd + fyr) / p.mass,
        x.r,
        (p.lf * fyf * cd - p.lr * fyr) / p.yaw_inertia,
    )
}

/// Kinematic bicycle with first-order tracking of the kinematic lateral
/// velocity and yaw rate; nonsingular at standstill.
fn f_kinematic(x: &EgoState, u_c: &ControlInput, p: &VehicleParams) -> Vector6<f64> {
    let wheelbase = p.wheelbase();
    let beta = (p.lr * u_c.steer.tan() / wheelbase).atan();
    let course = x.psi + beta;
    let r_kin = x.u * beta.cos() * u_c.steer.tan() / wheelbase;
    let v_kin = x.u * beta.sin();
    Vector6::new(
        x.u * course.cos(),
        (u_c.force - p.drag * x.u * x.u) / p.mass,
        x.u * course.sin(),
        (v_kin - x.v) / p.tau_low,
        x.r,
        (r_kin - x.r) / p.tau_low,
    )
}

/// Analytic Jacobians `A = df/dx`, `B = df/du_c` at the operating point.
pub fn linearize(x: &EgoState, u_c: &ControlInput, p: &VehicleParams) -> (Mat6, Mat6x2) {
    if x.u < p.u_low {
        return linearize_kinematic(x, u_c, p);
    }
    let (cpsi, spsi) = (x.psi.cos(), x.psi.sin());
    let (cd, sd) = (u_c.steer.cos(), u_c.steer.sin());
    let alpha_f = u_c.steer - (x.v + p.lf * x.r) / x.u;
    let fyf = p.cf * alpha_f;
    let daf_du = (x.v + p.lf * x.r) / (x.u * x.u);
    let dar_du = (x.v - p.lr * x.r) / (x.u * x.u);
    let inv_u = 1.0 / x.u;

    let mut a = Mat6::zeros();
    // X_dot = u cos(psi) - v sin(psi)
    a[(0, 1)] = cpsi;
    a[(0, 3)] = -spsi;
    a[(0, 4)] = -x.u * spsi - x.v * cpsi;
    // u_dot = v r + (F_u - F_yf sin(d) - drag u^2) / m
    a[(1, 1)] = (-p.cf * daf_du * sd - 2.0 * p.drag * x.u) / p.mass;
    a[(1, 3)] = x.r + p.cf * sd * inv_u / p.mass;
    a[(1, 5)] = x.v + p.cf * p.lf * sd * inv_u / p.mass;
    // Y_dot = u sin(psi) + v cos(psi)
    a[(2, 1)] = spsi;
    a[(2, 3)] = cpsi;
    a[(2, 4)] = x.u * cpsi - x.v * spsi;
    // v_dot = -u r + (F_yf cos(d) + F_yr) / m
    a[(3, 1)] = -x.r + (p.cf * daf_du * cd + p.cr * dar_du) / p.mass;
    a[(3, 3)] = -(p.cf * cd + p.cr) * inv_u / p.mass;
    a[(3, 5)] = -x.u + (-p.cf * p.lf * cd + p.cr * p.lr) * inv_u / p.mass;
    // psi_dot = r
    a[(4, 5)] = 1.0;
    // r_dot = (lf F_yf cos(d) - lr F_yr) / Iz
    a[(5, 1)] = (p.lf * p.cf * daf_du * cd - p.lr * p.cr * dar_du) / p.yaw_inertia;
    a[(5, 3)] = (-p.lf * p.cf * cd + p.lr * p.cr) * inv_u / p.yaw_inertia;
    a[(5, 5)] = (-p.lf * p.lf * p.cf * cd - p.lr * p.lr * p.cr) * inv_u / p.yaw_inertia;

    let mut b = Mat6x2::zeros();
    b[(1, 0)] = 1.0 / p.mass;
    b[(1, 1)] = (-p.cf * sd - fyf * cd) / p.mass;
    b[(3, 1)] = (p.cf * cd - fyf * sd) / p.mass;
    b[(5, 1)] = p.lf * (p.cf * cd - fyf * sd) / p.yaw_inertia;
    (a, b)
}

fn linearize_kinematic(x: &EgoState, u_c: &ControlInput, p: &VehicleParams) -> (Mat6, Mat6x2) {
    let wheelbase = p.wheelbase();
    let tan_d = u_c.steer.tan();
    let sec2 = 1.0 + tan_d * tan_d;
    let beta_arg = p.lr * tan_d / wheelbase;
    let beta = beta_arg.atan();
    let dbeta_dd = (p.lr / wheelbase) * sec2 / (1.0 + beta_arg * beta_arg);
    let course = x.psi + beta;
    let (cc, sc) = (course.cos(), course.sin());
    let (cb, sb) = (beta.cos(), beta.sin());

    let mut a = Mat6::zeros();
    a[(0, 1)] = cc;
    a[(0, 4)] = -x.u * sc;
    a[(1, 1)] = -2.0 * p.drag * x.u / p.mass;
    a[(2, 1)] = sc;
    a[(2, 4)] = x.u * cc;
    a[(3, 1)] = sb / p.tau_low;
    a[(3, 3)] = -1.0 / p.tau_low;
    a[(4, 5)] = 1.0;
    a[(5, 1)] = cb * tan_d / (wheelbase * p.tau_low);
    a[(5, 5)] = -1.0 / p.tau_low;

    let mut b = Mat6x2::zeros();
    b[(0, 1)] = -x.u * sc * dbeta_dd;
    b[(1, 0)] = 1.0 / p.mass;
    b[(2, 1)] = x.u * cc * dbeta_dd;
    b[(3, 1)] = x.u * cb * dbeta_dd / p.tau_low;
    b[(5, 1)] = x.u * (cb * sec2 - sb * tan_d * dbeta_dd) / (wheelbase * p.tau_low);
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    #[default]
    Euler,
    /// Zero-order-hold matrix exponential.
    Exact,
}

/// Discrete-time `(A_d, B_d)` for time step `dt`.
pub fn discretize(a: &Mat6, b: &Mat6x2, dt: f64, method: Discretization) -> (Mat6, Mat6x2) {
    match method {
        Discretization::Euler => (Mat6::identity() + a * dt, b * dt),
        Discretization::Exact => {
            // Augmented exponential: exp([[A B]; [0 0]] dt) = [[A_d B_d]; [0 I]].
            let mut m = SMatrix::<f64, 8, 8>::zeros();
            m.fixed_view_mut::<6, 6>(0, 0).copy_from(a);
            m.fixed_view_mut::<6, 2>(0, 6).copy_from(b);
            let e = (m * dt).exp();
            (
                e.fixed_view::<6, 6>(0, 0).into_owned(),
                e.fixed_view::<6, 2>(0, 6).into_owned(),
            )
        }
    }
}

/// One RK4 step of the nonlinear dynamics.
pub fn rk4_step(x: &EgoState, u_c: &ControlInput, p: &VehicleParams, dt: f64) -> EgoState {
    let xv = x.to_vector();
    let f = |v: &Vector6<f64>| f_nonlinear(&EgoState::from_vector(v), u_c, p);
    let k1 = f(&xv);
    let k2 = f(&(xv + k1 * (dt / 2.0)));
    let k3 = f(&(xv + k2 * (dt / 2.0)));
    let k4 = f(&(xv + k3 * dt));
    EgoState::from_vector(&(xv + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
}

/// Integrates the nonlinear model over `dt` with `substeps` RK4 steps.
pub fn integrate(
    x: &EgoState,
    u_c: &ControlInput,
    p: &VehicleParams,
    dt: f64,
    substeps: usize,
) -> EgoState {
    let h = dt / substeps as f64;
    let mut state = *x;
    for _ in 0..substeps {
        state = rk4_step(&state, u_c, p, h);
    }
    state
}
