//! Repulsive potential fields for obstacle vehicles, road boundaries, and
//! lane markings, summed into the environment cost.
//!
//! Obstacle fields are inverse-polynomial ellipses aligned with the
//! obstacle's direction of motion (falling back to the global x axis when
//! nearly stationary). Boundary fields are one-sided quadratics in the
//! signed distance to the road edge; lane-marking fields are low Gaussian
//! bumps that stay crossable.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::MapModel;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("invalid potential config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PotentialConfig {
    /// Obstacle field magnitude.
    pub a_o: f64,
    /// Longitudinal decay scale [m].
    pub x_c: f64,
    /// Lateral decay scale [m].
    pub y_c: f64,
    /// Longitudinal exponent (even, positive).
    pub c_x: u32,
    /// Lateral exponent (even, positive).
    pub c_y: u32,
    /// Guard added to the denominator so the pole at the obstacle centre
    /// stays finite for the optimizer.
    pub eps_o: f64,
    /// Boundary field gain.
    pub a_r: f64,
    /// Boundary influence distance [m].
    pub d_r_influence: f64,
    /// Lane-marking magnitude; must stay below the other two categories.
    pub a_l: f64,
    /// Lane-marking decay rate [1/m^2].
    pub b_l: f64,
    /// Obstacles slower than this use the global x axis for the ellipse.
    pub heading_speed_min: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            a_o: 10.0,
            x_c: 8.0,
            y_c: 1.5,
            c_x: 2,
            c_y: 2,
            eps_o: 1e-2,
            a_r: 5.0,
            d_r_influence: 1.5,
            a_l: 1.0,
            b_l: 3.0,
            heading_speed_min: 0.5,
        }
    }
}

impl PotentialConfig {
    pub fn validate(&self) -> Result<(), PotentialError> {
        for (name, v) in [
            ("a_o", self.a_o),
            ("x_c", self.x_c),
            ("y_c", self.y_c),
            ("eps_o", self.eps_o),
            ("a_r", self.a_r),
            ("d_r_influence", self.d_r_influence),
            ("a_l", self.a_l),
            ("b_l", self.b_l),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(PotentialError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.c_x == 0 || self.c_x % 2 != 0 || self.c_y == 0 || self.c_y % 2 != 0 {
            return Err(PotentialError::Invalid(
                "c_x and c_y must be positive even integers".into(),
            ));
        }
        if self.a_l >= self.a_o || self.a_l >= self.a_r {
            return Err(PotentialError::Invalid(
                "lane-marking magnitude must stay below obstacle and boundary magnitudes".into(),
            ));
        }
        Ok(())
    }
}

/// An obstacle sample for one horizon step: predicted position and the
/// direction of motion that orients its ellipse.
#[derive(Debug, Clone, Copy)]
pub struct Obstacle {
    pub pos: Point2<f64>,
    /// Unit-ish direction of travel; does not need to be normalized.
    pub heading: Vector2<f64>,
}

impl Obstacle {
    pub fn stationary(pos: Point2<f64>) -> Self {
        Self {
            pos,
            heading: Vector2::new(0.0, 0.0),
        }
    }
}

/// Obstacle-vehicle potential at `p` around an obstacle at `obs`, axes
/// aligned with `heading` when it is fast enough.
pub fn v_obstacle(p: Point2<f64>, obs: &Obstacle, cfg: &PotentialConfig) -> f64 {
    let rel = p - obs.pos;
    let speed = obs.heading.norm();
    let (dx, dy) = if speed >= cfg.heading_speed_min {
        let t = obs.heading / speed;
        (rel.x * t.x + rel.y * t.y, -rel.x * t.y + rel.y * t.x)
    } else {
        (rel.x, rel.y)
    };
    let denom = (dx / cfg.x_c).powi(cfg.c_x as i32) + (dy / cfg.y_c).powi(cfg.c_y as i32) + cfg.eps_o;
    cfg.a_o / denom
}

/// Road-boundary potential from the signed distance to the edge (positive
/// inside the road). Continuous at the influence distance; keeps growing
/// quadratically outside the road so the optimizer is pushed back in.
pub fn v_boundary(d_r: f64, cfg: &PotentialConfig) -> f64 {
    if d_r <= cfg.d_r_influence {
        cfg.a_r * (d_r - cfg.d_r_influence).powi(2)
    } else {
        0.0
    }
}

/// Lane-marking potential at lateral distance `d_l` from the marking.
pub fn v_lane(d_l: f64, cfg: &PotentialConfig) -> f64 {
    cfg.a_l * (-cfg.b_l * d_l * d_l).exp()
}

/// Total environment potential at `p`: both road boundaries, every lane
/// marking, and the sum over all obstacle vehicles.
pub fn u_env(p: Point2<f64>, obstacles: &[Obstacle], map: &MapModel, cfg: &PotentialConfig) -> f64 {
    let proj = map.paths.main.to_frenet(p);
    let (s, d) = (proj.state.s, proj.state.d);

    let left = map.left_edge();
    let right = map.right_edge_at(s);
    let mut total = v_boundary(left - d, cfg) + v_boundary(d - right, cfg);

    for mark in map.lane_marking_offsets_at(s) {
        total += v_lane(d - mark, cfg);
    }
    for obs in obstacles {
        total += v_obstacle(p, obs, cfg);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_map, GeneratorConfig};

    fn cfg() -> PotentialConfig {
        PotentialConfig::default()
    }

    #[test]
    fn obstacle_closed_form_spots() {
        let c = cfg();
        let obs = Obstacle::stationary(Point2::new(0.0, 0.0));
        // Both normalized terms equal one.
        let v = v_obstacle(Point2::new(c.x_c, c.y_c), &obs, &c);
        assert!((v - c.a_o / (2.0 + c.eps_o)).abs() < 1e-12);
        // Finite cap at the centre.
        let v0 = v_obstacle(Point2::new(0.0, 0.0), &obs, &c);
        assert!((v0 - c.a_o / c.eps_o).abs() < 1e-12);
    }

    #[test]
    fn obstacle_level_sets_are_elliptical() {
        let c = cfg();
        let obs = Obstacle::stationary(Point2::new(3.0, -1.0));
        // Equal normalized metric, different directions.
        let m = |dx: f64, dy: f64| (dx / c.x_c).powi(2) + (dy / c.y_c).powi(2);
        let (dx1, dy1) = (4.0, 0.6);
        // Pick dy2 so the metric matches with dx2 = 2.
        let target = m(dx1, dy1);
        let dy2 = ((target - m(2.0, 0.0)) * c.y_c * c.y_c).sqrt();
        let v1 = v_obstacle(Point2::new(3.0 + dx1, -1.0 + dy1), &obs, &c);
        let v2 = v_obstacle(Point2::new(3.0 + 2.0, -1.0 + dy2), &obs, &c);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn obstacle_ellipse_follows_heading() {
        let c = cfg();
        let moving = Obstacle {
            pos: Point2::new(0.0, 0.0),
            heading: Vector2::new(0.0, 20.0),
        };
        // For a vehicle heading +y, the long axis points along y.
        let along = v_obstacle(Point2::new(0.0, 6.0), &moving, &c);
        let across = v_obstacle(Point2::new(6.0, 0.0), &moving, &c);
        assert!(along > across);
    }

    #[test]
    fn boundary_closed_form_spots() {
        let c = cfg();
        assert_eq!(v_boundary(c.d_r_influence, &c), 0.0);
        assert!((v_boundary(0.0, &c) - c.a_r * c.d_r_influence.powi(2)).abs() < 1e-15);
        assert_eq!(v_boundary(2.0 * c.d_r_influence, &c), 0.0);
        // Continuity at the influence distance.
        let eps = 1e-9;
        assert!(v_boundary(c.d_r_influence - eps, &c) < 1e-15);
    }

    #[test]
    fn lane_marking_closed_form_spots() {
        let c = cfg();
        assert_eq!(v_lane(0.0, &c), c.a_l);
        let d = 1.0 / c.b_l.sqrt();
        assert!((v_lane(d, &c) - c.a_l / std::f64::consts::E).abs() < 1e-15);
        assert_eq!(v_lane(0.7, &c), v_lane(-0.7, &c));
    }

    #[test]
    fn env_decomposes_additively() {
        let c = cfg();
        let map = make_map(&GeneratorConfig::default()).unwrap().0;
        let p = Point2::new(120.0, -1.75);

        let base = u_env(p, &[], &map, &c);
        let o1 = Obstacle::stationary(Point2::new(130.0, -1.75));
        let o2 = Obstacle::stationary(Point2::new(110.0, 1.75));
        let with_one = u_env(p, &[o1], &map, &c);
        assert!((with_one - base - v_obstacle(p, &o1, &c)).abs() < 1e-12);
        let with_two = u_env(p, &[o1, o2], &map, &c);
        assert!(
            (with_two - base - v_obstacle(p, &o1, &c) - v_obstacle(p, &o2, &c)).abs() < 1e-12
        );
    }

    #[test]
    fn empty_lane_centre_is_nearly_free() {
        let c = cfg();
        // 3 lanes so the middle lane centre sits away from every marking.
        let map = make_map(&GeneratorConfig {
            main_lane_count: 3,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .0;
        // Far downstream of the merge area, centre lane.
        let v = u_env(Point2::new(200.0, 0.0), &[], &map, &c);
        assert!(v < 1e-3 * c.a_l, "residual potential {v}");
    }

    #[test]
    fn crossability_ordering_holds_for_defaults() {
        let c = cfg();
        c.validate().unwrap();
        let at_unit = c.a_o / (2.0 + c.eps_o);
        let boundary_peak = c.a_r * c.d_r_influence.powi(2);
        assert!(c.a_l < at_unit.min(boundary_peak));
    }

    #[test]
    fn moving_an_obstacle_away_never_raises_the_field() {
        let c = cfg();
        let p = Point2::new(0.0, 0.0);
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let obs = Obstacle::stationary(Point2::new(1.0 + k as f64 * 0.5, 0.8));
            let v = v_obstacle(p, &obs, &c);
            assert!(v <= last + 1e-15);
            last = v;
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg();
        c.c_x = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.a_l = 20.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.x_c = -1.0;
        assert!(c.validate().is_err());
    }
}
