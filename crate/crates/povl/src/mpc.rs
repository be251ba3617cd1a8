//! Receding-horizon motion planning by sequential quadratic programming.
//!
//! Each solve works on the stacked control sequence (force and steering
//! for every horizon step) with box bounds. One SQP iteration: roll out
//! the discrete nonlinear model, linearize the dynamics along the
//! trajectory, build a quadratic cost model (exact for the control terms,
//! Gauss-Newton plus finite-difference curvature for the state terms),
//! solve the box-constrained QP by projected Barzilai-Borwein gradient
//! steps, then backtracking line search on the true cost. Accepted
//! iterates never increase the cost; failures raise the damping and retry.

use nalgebra::{DMatrix, DVector, Matrix2, Point2, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    discretize, f_nonlinear, integrate, linearize, ControlInput, Discretization, EgoState,
    VehicleParams,
};
use crate::potential::{u_env, Obstacle, PotentialConfig};
use crate::predictor::PredictedTrajectory;
use crate::scene::MapModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SqpConfig {
    pub max_iters: usize,
    /// Convergence threshold on the projected gradient infinity norm.
    pub grad_tol: f64,
    pub lambda_init: f64,
    pub lambda_shrink: f64,
    pub lambda_grow: f64,
    pub lambda_max: f64,
    pub qp_iters: usize,
    pub line_search_max: usize,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            max_iters: 40,
            grad_tol: 2e-3,
            lambda_init: 1e-3,
            lambda_shrink: 0.25,
            lambda_grow: 8.0,
            lambda_max: 1e9,
            qp_iters: 160,
            line_search_max: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Horizon length in steps (5 s at 0.2 s).
    pub horizon: usize,
    pub dt: f64,
    /// Control-effort weights (force^2 [1/N^2], steer^2 [1/rad^2]).
    pub q1: [f64; 2],
    /// Control-rate weights.
    pub q2: [f64; 2],
    /// Reference weights (lateral deviation [1/m^2], speed deviation).
    pub q3: [f64; 2],
    /// Throttle/brake bound [N].
    pub f_max: f64,
    /// Steering bound [rad].
    pub delta_max: f64,
    pub discretization: Discretization,
    /// RK4 substeps when advancing the true state by one period.
    pub substeps: usize,
    /// Central-difference step for position-dependent cost terms [m].
    pub fd_eps: f64,
    pub sqp: SqpConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            dt: 0.2,
            q1: [1e-7, 10.0],
            q2: [1e-6, 50.0],
            q3: [1.0, 0.5],
            f_max: 6000.0,
            delta_max: 0.2,
            discretization: Discretization::Euler,
            substeps: 10,
            fd_eps: 1e-3,
            sqp: SqpConfig::default(),
        }
    }
}

/// Per-step cost decomposition.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CostBreakdown {
    pub ev: f64,
    pub env: f64,
    pub reference: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.ev + self.env + self.reference
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Failed,
}

/// Optimized control sequence with its rollout and diagnostics.
#[derive(Debug, Clone)]
pub struct EgoPlan {
    pub controls: Vec<ControlInput>,
    /// `horizon + 1` states from the discrete-model rollout.
    pub states: Vec<EgoState>,
    pub breakdown: Vec<CostBreakdown>,
    pub cost: f64,
    /// Cost after every accepted SQP iterate, starting at the initial guess.
    pub cost_history: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Everything a solve needs besides the initial state.
pub struct PlanContext<'a> {
    pub map: &'a MapModel,
    pub potential: &'a PotentialConfig,
    pub vehicle: &'a VehicleParams,
    /// Target-lane centerline offset in main-path Frenet [m].
    pub d_des: f64,
    pub u_des: f64,
    /// Control applied in the previous period; anchors the first rate term.
    pub prev_control: ControlInput,
    /// Obstacle samples per horizon step, derived from the predictions.
    obstacles: Vec<Vec<Obstacle>>,
}

impl<'a> PlanContext<'a> {
    pub fn new(
        map: &'a MapModel,
        potential: &'a PotentialConfig,
        vehicle: &'a VehicleParams,
        predictions: &[PredictedTrajectory],
        horizon: usize,
        d_des: f64,
        u_des: f64,
        prev_control: ControlInput,
    ) -> Self {
        let mut obstacles = vec![Vec::with_capacity(predictions.len()); horizon];
        for pred in predictions {
            debug_assert!(pred.points.len() >= horizon);
            for (i, slot) in obstacles.iter_mut().enumerate() {
                let pos = pred.points[i];
                let heading = if i + 1 < pred.points.len() {
                    pred.points[i + 1] - pos
                } else {
                    pos - pred.points[i - 1]
                };
                slot.push(Obstacle { pos, heading });
            }
        }
        Self {
            map,
            potential,
            vehicle,
            d_des,
            u_des,
            prev_control,
            obstacles,
        }
    }

    pub fn obstacles_at(&self, step: usize) -> &[Obstacle] {
        &self.obstacles[step]
    }

    /// Position-dependent stage cost: environment potential plus the
    /// lateral-reference term.
    fn position_cost(&self, pos: Point2<f64>, step: usize, q3_d: f64) -> f64 {
        let env = u_env(pos, &self.obstacles[step], self.map, self.potential);
        let d = self.map.paths.main.to_frenet(pos).state.d;
        env + q3_d * (d - self.d_des) * (d - self.d_des)
    }

    fn env_only(&self, pos: Point2<f64>, step: usize) -> f64 {
        u_env(pos, &self.obstacles[step], self.map, self.potential)
    }
}

/// One step of the plan dynamics (the model the QP linearizes).
fn rollout_step(x: &EgoState, u: &ControlInput, ctx: &PlanContext, cfg: &PlannerConfig) -> EgoState {
    match cfg.discretization {
        Discretization::Euler => {
            let dx = f_nonlinear(x, u, ctx.vehicle);
            EgoState::from_vector(&(x.to_vector() + dx * cfg.dt))
        }
        Discretization::Exact => integrate(x, u, ctx.vehicle, cfg.dt, cfg.substeps),
    }
}

/// Rolls the discrete model out over the horizon.
pub fn rollout(
    x0: &EgoState,
    controls: &[ControlInput],
    ctx: &PlanContext,
    cfg: &PlannerConfig,
) -> Vec<EgoState> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    for u in controls {
        let next = rollout_step(states.last().unwrap(), u, ctx, cfg);
        states.push(next);
    }
    states
}

/// Full cost of a control sequence with its per-step decomposition.
pub fn cost(
    controls: &[ControlInput],
    x0: &EgoState,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
) -> (f64, Vec<CostBreakdown>) {
    let states = rollout(x0, controls, ctx, cfg);
    cost_of_rollout(controls, &states, ctx, cfg)
}

fn cost_of_rollout(
    controls: &[ControlInput],
    states: &[EgoState],
    ctx: &PlanContext,
    cfg: &PlannerConfig,
) -> (f64, Vec<CostBreakdown>) {
    let mut breakdown = Vec::with_capacity(controls.len());
    let mut total = 0.0;
    let mut prev = ctx.prev_control;
    for (i, u) in controls.iter().enumerate() {
        let du_f = (u.force - prev.force) / cfg.dt;
        let du_d = (u.steer - prev.steer) / cfg.dt;
        let ev = cfg.q1[0] * u.force * u.force
            + cfg.q1[1] * u.steer * u.steer
            + cfg.q2[0] * du_f * du_f
            + cfg.q2[1] * du_d * du_d;
        let x = &states[i + 1];
        let env = ctx.env_only(x.position(), i);
        let d = ctx.map.paths.main.to_frenet(x.position()).state.d;
        let reference = cfg.q3[0] * (d - ctx.d_des) * (d - ctx.d_des)
            + cfg.q3[1] * (x.u - ctx.u_des) * (x.u - ctx.u_des);
        breakdown.push(CostBreakdown { ev, env, reference });
        total += ev + env + reference;
        prev = *u;
    }
    (total, breakdown)
}

fn controls_to_vec(controls: &[ControlInput]) -> DVector<f64> {
    let mut v = DVector::zeros(controls.len() * 2);
    for (i, u) in controls.iter().enumerate() {
        v[2 * i] = u.force;
        v[2 * i + 1] = u.steer;
    }
    v
}

fn vec_to_controls(v: &DVector<f64>) -> Vec<ControlInput> {
    (0..v.len() / 2)
        .map(|i| ControlInput {
            force: v[2 * i],
            steer: v[2 * i + 1],
        })
        .collect()
}

fn clamp_vec(v: &mut DVector<f64>, cfg: &PlannerConfig) {
    for i in 0..v.len() / 2 {
        v[2 * i] = v[2 * i].clamp(-cfg.f_max, cfg.f_max);
        v[2 * i + 1] = v[2 * i + 1].clamp(-cfg.delta_max, cfg.delta_max);
    }
}

/// Per-coordinate bound used to normalize the decision variables. Force
/// (thousands of newtons) and steering (fractions of a radian) differ by
/// four orders of magnitude; the QP runs on bound-relative coordinates so
/// one damping and one step size serve both.
fn coordinate_scale(cfg: &PlannerConfig, j: usize) -> f64 {
    if j % 2 == 0 {
        cfg.f_max
    } else {
        cfg.delta_max
    }
}

/// Gradient and Gauss-Newton Hessian of the cost at `u`, via per-step
/// linearization and control-to-state sensitivity matrices.
fn quadratic_model(
    u: &DVector<f64>,
    x0: &EgoState,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = cfg.horizon;
    let n = 2 * p;
    let controls = vec_to_controls(u);
    let states = rollout(x0, &controls, ctx, cfg);

    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);

    // Exact quadratic control terms.
    for i in 0..p {
        for (k, q) in cfg.q1.iter().enumerate() {
            grad[2 * i + k] += 2.0 * q * u[2 * i + k];
            hess[(2 * i + k, 2 * i + k)] += 2.0 * q;
        }
    }
    let inv_dt2 = 1.0 / (cfg.dt * cfg.dt);
    for i in 0..p {
        for (k, q) in cfg.q2.iter().enumerate() {
            let prev = if i == 0 {
                if k == 0 {
                    ctx.prev_control.force
                } else {
                    ctx.prev_control.steer
                }
            } else {
                u[2 * (i - 1) + k]
            };
            let w = 2.0 * q * inv_dt2;
            grad[2 * i + k] += w * (u[2 * i + k] - prev);
            hess[(2 * i + k, 2 * i + k)] += w;
            if i > 0 {
                grad[2 * (i - 1) + k] -= w * (u[2 * i + k] - prev);
                hess[(2 * (i - 1) + k, 2 * (i - 1) + k)] += w;
                hess[(2 * i + k, 2 * (i - 1) + k)] -= w;
                hess[(2 * (i - 1) + k, 2 * i + k)] -= w;
            }
        }
    }

    // Sensitivities of each state w.r.t. the stacked controls.
    let mut sens = DMatrix::<f64>::zeros(6, n);
    let h = cfg.fd_eps;
    for i in 0..p {
        let (a, b) = linearize(&states[i], &controls[i], ctx.vehicle);
        let (ad, bd) = discretize(&a, &b, cfg.dt, cfg.discretization);
        // S_{i+1} = A_d S_i + B_d E_i
        let mut next = DMatrix::<f64>::zeros(6, n);
        for col in 0..n {
            let s_col = Vector6::from_iterator((0..6).map(|r| sens[(r, col)]));
            let v = ad * s_col;
            for r in 0..6 {
                next[(r, col)] = v[r];
            }
        }
        for k in 0..2 {
            for r in 0..6 {
                next[(r, 2 * i + k)] += bd[(r, k)];
            }
        }
        sens = next;

        let x = &states[i + 1];
        let pos = x.position();

        // Position-dependent terms: gradient and curvature by central
        // differences on a 3x3 stencil.
        let f = |dx: f64, dy: f64| {
            ctx.position_cost(Point2::new(pos.x + dx, pos.y + dy), i, cfg.q3[0])
        };
        let f00 = f(0.0, 0.0);
        let fpx = f(h, 0.0);
        let fmx = f(-h, 0.0);
        let fpy = f(0.0, h);
        let fmy = f(0.0, -h);
        let fpp = f(h, h);
        let fpm = f(h, -h);
        let fmp = f(-h, h);
        let fmm = f(-h, -h);
        let gx = (fpx - fmx) / (2.0 * h);
        let gy = (fpy - fmy) / (2.0 * h);
        let hxx = (fpx - 2.0 * f00 + fmx) / (h * h);
        let hyy = (fpy - 2.0 * f00 + fmy) / (h * h);
        let hxy = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
        let hpos = psd_project(Matrix2::new(hxx, hxy, hxy, hyy));

        // Speed-reference term: analytic in the state's u component.
        let gu = 2.0 * cfg.q3[1] * (x.u - ctx.u_des);
        let huu = 2.0 * cfg.q3[1];

        // grad += S^T g_x; hess += S^T H_x S restricted to the (X, Y, u)
        // components that carry cost.
        let sx = sens.row(0).clone_owned();
        let su = sens.row(1).clone_owned();
        let sy = sens.row(2).clone_owned();
        grad += (sx.transpose() * gx + sy.transpose() * gy + su.transpose() * gu).column(0);

        hess += sx.transpose() * sx.clone() * hpos[(0, 0)];
        hess += sx.transpose() * sy.clone() * hpos[(0, 1)];
        hess += sy.transpose() * sx.clone() * hpos[(1, 0)];
        hess += sy.transpose() * sy.clone() * hpos[(1, 1)];
        hess += su.transpose() * su.clone() * huu;
    }
    (grad, hess)
}

/// Clamps a symmetric 2x2 matrix to its positive-semidefinite part.
fn psd_project(m: Matrix2<f64>) -> Matrix2<f64> {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    if l2 >= 0.0 {
        return m;
    }
    // Eigen decomposition of a symmetric 2x2.
    let v1 = if m[(0, 1)].abs() > 1e-12 {
        Vector2::new(l1 - m[(1, 1)], m[(0, 1)]).normalize()
    } else if m[(0, 0)] >= m[(1, 1)] {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let l1 = l1.max(0.0);
    Matrix2::new(
        l1 * v1.x * v1.x,
        l1 * v1.x * v1.y,
        l1 * v1.x * v1.y,
        l1 * v1.y * v1.y,
    )
}

/// Projected Barzilai-Borwein gradient descent on the box-constrained QP
/// `min 0.5 d^T H d + g^T d` in bound-normalized coordinates, with
/// `-1 <= u + d <= 1` per entry.
fn solve_box_qp(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    u: &DVector<f64>,
    cfg: &PlannerConfig,
) -> DVector<f64> {
    let n = grad.len();
    let project = |d: &mut DVector<f64>| {
        for j in 0..n {
            d[j] = d[j].clamp(-1.0 - u[j], 1.0 - u[j]);
        }
    };
    let mut d = DVector::zeros(n);
    let mut g = grad.clone();
    // Conservative first step from the Hessian's infinity norm.
    let hnorm: f64 = (0..n)
        .map(|i| (0..n).map(|j| hess[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut step = 1.0 / hnorm.max(1e-12);
    let mut d_prev = d.clone();
    let mut g_prev = g.clone();
    for iter in 0..cfg.sqp.qp_iters {
        let mut trial = &d - &g * step;
        project(&mut trial);
        let diff = (&trial - &d).amax();
        d = trial;
        g = hess * &d + grad;
        if diff < 1e-12 {
            break;
        }
        if iter > 0 {
            let sd = &d - &d_prev;
            let sg = &g - &g_prev;
            let num = sd.dot(&sd);
            let den = sd.dot(&sg);
            if den > 1e-18 {
                step = (num / den).clamp(1e-12, 1e6);
            }
        }
        d_prev = d.clone();
        g_prev = g.clone();
    }
    d
}

/// Solves the horizon problem from `warm_start` (or zero controls).
pub fn solve_sqp(
    x0: &EgoState,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
    warm_start: Option<&[ControlInput]>,
) -> EgoPlan {
    let p = cfg.horizon;
    let mut u = match warm_start {
        Some(w) => {
            debug_assert_eq!(w.len(), p);
            controls_to_vec(w)
        }
        None => DVector::zeros(2 * p),
    };
    clamp_vec(&mut u, cfg);

    let eval = |v: &DVector<f64>| {
        let controls = vec_to_controls(v);
        cost(&controls, x0, ctx, cfg).0
    };
    let mut best_cost = eval(&u);
    let mut cost_history = vec![best_cost];
    let mut lambda = cfg.sqp.lambda_init;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    let n = 2 * p;
    for _ in 0..cfg.sqp.max_iters {
        iterations += 1;
        let (grad, hess) = quadratic_model(&u, x0, ctx, cfg);

        // Everything below runs in bound-normalized coordinates.
        let u_n = DVector::from_fn(n, |j, _| u[j] / coordinate_scale(cfg, j));
        let grad_n = DVector::from_fn(n, |j, _| grad[j] * coordinate_scale(cfg, j));
        let mut hess_n = DMatrix::from_fn(n, n, |i, j| {
            hess[(i, j)] * coordinate_scale(cfg, i) * coordinate_scale(cfg, j)
        });

        // Convergence: projected gradient step of unit length.
        let probe = DVector::from_fn(n, |j, _| (u_n[j] - grad_n[j]).clamp(-1.0, 1.0));
        let pg = (&probe - &u_n).amax();
        if pg <= cfg.sqp.grad_tol {
            status = SolveStatus::Converged;
            break;
        }

        for i in 0..n {
            hess_n[(i, i)] += lambda;
        }
        let direction_n = solve_box_qp(&hess_n, &grad_n, &u_n, cfg);
        if direction_n.amax() < 1e-14 {
            status = SolveStatus::Converged;
            break;
        }
        let direction = DVector::from_fn(n, |j, _| direction_n[j] * coordinate_scale(cfg, j));

        // Backtracking line search; only non-increasing costs are accepted.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..cfg.sqp.line_search_max {
            let mut trial = &u + &direction * alpha;
            clamp_vec(&mut trial, cfg);
            let c = eval(&trial);
            if c.is_finite() && c <= best_cost {
                u = trial;
                best_cost = c;
                cost_history.push(c);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if accepted {
            lambda = (lambda * cfg.sqp.lambda_shrink).max(cfg.sqp.lambda_init);
        } else {
            lambda *= cfg.sqp.lambda_grow;
            if lambda > cfg.sqp.lambda_max {
                status = SolveStatus::Failed;
                break;
            }
        }
    }

    let controls = vec_to_controls(&u);
    let states = rollout(x0, &controls, ctx, cfg);
    let (total, breakdown) = cost_of_rollout(&controls, &states, ctx, cfg);
    EgoPlan {
        controls,
        states,
        breakdown,
        cost: total,
        cost_history,
        status,
        iterations,
    }
}

/// One receding-horizon period: solve, apply the first control, advance the
/// true state by fine nonlinear integration, shift the plan as the next
/// warm start.
///
/// A failed solve still returns the best-known sequence, which includes the
/// warm start itself, so the applied control degrades to the previous
/// plan's next control.
pub fn receding_horizon_step(
    state: &EgoState,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
    warm_start: Option<&[ControlInput]>,
) -> (ControlInput, EgoState, EgoPlan, Vec<ControlInput>) {
    let plan = solve_sqp(state, ctx, cfg, warm_start);
    let applied = plan.controls[0].clamped(cfg.f_max, cfg.delta_max);
    let next_state = integrate(state, &applied, ctx.vehicle, cfg.dt, cfg.substeps);
    let mut next_warm: Vec<ControlInput> = plan.controls[1..].to_vec();
    next_warm.push(*plan.controls.last().unwrap());
    (applied, next_state, plan, next_warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{PredictedTrajectory, PredictorKind};
    use crate::synthetic::{make_map, GeneratorConfig};

    fn test_map() -> MapModel {
        make_map(&GeneratorConfig::default()).unwrap().0
    }

    fn centred_state(u: f64, y_off: f64) -> EgoState {
        // Lane 0 of the default 2-lane map is y = -1.75 on the straight
        // section.
        EgoState {
            x: 100.0,
            u,
            y: -1.75 + y_off,
            v: 0.0,
            psi: 0.0,
            r: 0.0,
        }
    }

    fn ctx_with<'a>(
        map: &'a MapModel,
        pot: &'a PotentialConfig,
        veh: &'a VehicleParams,
        preds: &[PredictedTrajectory],
        cfg: &PlannerConfig,
    ) -> PlanContext<'a> {
        PlanContext::new(
            map,
            pot,
            veh,
            preds,
            cfg.horizon,
            -1.75,
            25.0,
            ControlInput::default(),
        )
    }

    fn static_prediction(x: f64, y: f64) -> PredictedTrajectory {
        PredictedTrajectory {
            source: PredictorKind::Gt,
            points: vec![Point2::new(x, y); 25],
            cov: vec![[1.0, 0.0, 1.0]; 25],
        }
    }

    #[test]
    fn zero_controls_on_track_costs_nearly_nothing() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
        let x0 = centred_state(25.0, 0.0);
        let controls = vec![ControlInput::default(); cfg.horizon];
        let (total, breakdown) = cost(&controls, &x0, &ctx, &cfg);
        assert!(total < 0.02, "cost {total}");
        for b in &breakdown {
            assert_eq!(b.ev, 0.0);
            assert!(b.reference < 1e-9);
        }
    }

    #[test]
    fn doubling_q1_doubles_the_effort_term() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let mut cfg = PlannerConfig::default();
        cfg.q2 = [0.0, 0.0];
        let ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
        let x0 = centred_state(25.0, 0.0);
        let controls: Vec<ControlInput> = (0..cfg.horizon)
            .map(|i| ControlInput {
                force: 500.0 + 10.0 * i as f64,
                steer: 0.01,
            })
            .collect();
        let ev_sum = |cfg: &PlannerConfig| -> f64 {
            cost(&controls, &x0, &ctx, cfg)
                .1
                .iter()
                .map(|b| b.ev)
                .sum()
        };
        let base = ev_sum(&cfg);
        let mut doubled = cfg.clone();
        doubled.q1 = [2.0 * cfg.q1[0], 2.0 * cfg.q1[1]];
        assert!((ev_sum(&doubled) - 2.0 * base).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn one_obstacle_adds_exactly_its_summed_potential() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let x0 = centred_state(25.0, 0.0);
        let controls = vec![ControlInput::default(); cfg.horizon];

        let empty_ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
        let (base, _) = cost(&controls, &x0, &empty_ctx, &cfg);

        let pred = static_prediction(160.0, -1.75);
        let one_ctx = ctx_with(&map, &pot, &veh, std::slice::from_ref(&pred), &cfg);
        let (with_obs, _) = cost(&controls, &x0, &one_ctx, &cfg);

        let states = rollout(&x0, &controls, &empty_ctx, &cfg);
        let expected: f64 = (0..cfg.horizon)
            .map(|i| {
                crate::potential::v_obstacle(
                    states[i + 1].position(),
                    &one_ctx.obstacles_at(i)[0],
                    &pot,
                )
            })
            .sum();
        assert!(((with_obs - base) - expected).abs() < 1e-9);
    }

    #[test]
    fn regulator_converges_from_lateral_offset() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
        let x0 = centred_state(25.0, 1.0);
        let plan = solve_sqp(&x0, &ctx, &cfg, None);

        assert_ne!(plan.status, SolveStatus::Failed);
        let end = plan.states.last().unwrap();
        assert!(
            (end.y - -1.75).abs() < 0.05,
            "terminal lateral error {}",
            (end.y - -1.75).abs()
        );
        assert!((end.u - 25.0).abs() < 0.1, "terminal speed error");
        for u in &plan.controls {
            assert!(u.force.abs() <= cfg.f_max + 1e-9);
            assert!(u.steer.abs() <= cfg.delta_max + 1e-9);
        }
        for pair in plan.cost_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "cost increased");
        }

        // Oracle: the SQP plan must beat every constant-steering policy on
        // a dense grid (it optimizes over a strictly richer class).
        let mut best_constant = f64::INFINITY;
        for k in -40..=40 {
            let steer = k as f64 / 40.0 * cfg.delta_max;
            let controls = vec![
                ControlInput {
                    force: 0.0,
                    steer
                };
                cfg.horizon
            ];
            best_constant = best_constant.min(cost(&controls, &x0, &ctx, &cfg).0);
        }
        assert!(
            plan.cost <= best_constant * (1.0 + 1e-9),
            "sqp {} vs best constant {}",
            plan.cost,
            best_constant
        );
    }

    #[test]
    fn planned_states_satisfy_discrete_dynamics() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
        let x0 = centred_state(24.0, 0.5);
        let plan = solve_sqp(&x0, &ctx, &cfg, None);
        for i in 0..cfg.horizon {
            let expect = rollout_step(&plan.states[i], &plan.controls[i], &ctx, &cfg);
            let err = (expect.to_vector() - plan.states[i + 1].to_vector()).amax();
            assert!(err < 1e-8, "dynamics defect {err} at step {i}");
        }
    }

    #[test]
    fn avoidance_beats_doing_nothing() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let x0 = centred_state(25.0, 0.0);
        // Static obstacle 30 m ahead in the ego lane; the left lane is free.
        let obstacle_pos = Point2::new(130.0, -1.75);
        let pred = static_prediction(obstacle_pos.x, obstacle_pos.y);
        let ctx = ctx_with(&map, &pot, &veh, std::slice::from_ref(&pred), &cfg);

        let plan = solve_sqp(&x0, &ctx, &cfg, None);
        let do_nothing = vec![ControlInput::default(); cfg.horizon];
        let passive_states = rollout(&x0, &do_nothing, &ctx, &cfg);

        let min_dist = |states: &[EgoState]| {
            states
                .iter()
                .skip(1)
                .map(|s| (s.position() - obstacle_pos).norm())
                .fold(f64::INFINITY, f64::min)
        };
        let planned = min_dist(&plan.states);
        let passive = min_dist(&passive_states);
        assert!(
            planned > passive,
            "planned clearance {planned} not above passive {passive}"
        );

        // No boundary crossing: stay inside the carriageway (the slip lane
        // has ended upstream of this section for the default map).
        for s in &plan.states {
            let d = map.paths.main.to_frenet(s.position()).state.d;
            assert!(d.abs() < map.left_edge(), "left the road: d = {d}");
        }
    }

    #[test]
    fn warm_start_at_optimum_is_a_fixed_point() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
        let x0 = centred_state(25.0, 0.8);
        let first = solve_sqp(&x0, &ctx, &cfg, None);
        assert_eq!(first.status, SolveStatus::Converged);
        let again = solve_sqp(&x0, &ctx, &cfg, Some(&first.controls));
        assert!(again.iterations <= 1, "iterations {}", again.iterations);
        for (a, b) in first.controls.iter().zip(&again.controls) {
            assert!((a.force - b.force).abs() < 1e-9);
            assert!((a.steer - b.steer).abs() < 1e-9);
        }
    }

    #[test]
    fn receding_horizon_holds_the_lane() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let mut state = centred_state(25.0, 0.0);
        let mut warm: Option<Vec<ControlInput>> = None;
        for _ in 0..10 {
            let ctx = ctx_with(&map, &pot, &veh, &[], &cfg);
            let (applied, next, _plan, next_warm) =
                receding_horizon_step(&state, &ctx, &cfg, warm.as_deref());
            assert!(applied.force.abs() <= cfg.f_max);
            state = next;
            warm = Some(next_warm);
            assert!((state.y - -1.75).abs() < 0.02, "drifted to {}", state.y);
            assert!((state.u - 25.0).abs() < 0.1);
        }
    }

    #[test]
    fn identical_inputs_give_identical_plans() {
        let map = test_map();
        let pot = PotentialConfig::default();
        let veh = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let pred = static_prediction(140.0, -1.75);
        let x0 = centred_state(24.0, 0.3);
        let run = || {
            let ctx = ctx_with(&map, &pot, &veh, std::slice::from_ref(&pred), &cfg);
            solve_sqp(&x0, &ctx, &cfg, None)
        };
        let a = run();
        let b = run();
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
        for (x, y) in a.controls.iter().zip(&b.controls) {
            assert_eq!(x.force.to_bits(), y.force.to_bits());
            assert_eq!(x.steer.to_bits(), y.steer.to_bits());
        }
    }
}
