//! Prediction accuracy (RMSE) and planning quality (inverse TTC, jerk,
//! force) with traffic-density bucketing.
//!
//! TTC follows a constant-relative-velocity closing model to a minimum
//! separation radius; the inverse-TTC aggregate is the mean of `1/TTC`
//! over all (step, vehicle) pairs, with non-closing pairs contributing
//! zero. Buckets are nested: a step whose nearest vehicle is closer than
//! 3 m is also counted in every wider bucket.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric undefined on an empty sample set")]
    EmptySampleSet,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BucketMode {
    /// Distance of the nearest other vehicle decides the bucket.
    #[default]
    Nearest,
    /// Distance of the farthest other vehicle decides the bucket.
    Farthest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Minimum separation radius for the TTC contact test [m].
    pub ittc_radius: f64,
    /// TTC values below this floor are clamped before inversion [s].
    pub ittc_ttc_floor: f64,
    /// Upper edges of the distance buckets [m].
    pub bucket_edges: Vec<f64>,
    pub bucket_mode: BucketMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ittc_radius: 2.0,
            ittc_ttc_floor: 0.1,
            bucket_edges: vec![3.0, 5.0, 7.0, 10.0, 20.0, 30.0, 50.0],
            bucket_mode: BucketMode::Nearest,
        }
    }
}

/// Root mean square of 2-D position errors, in meters.
pub fn rmse(pairs: &[(Point2<f64>, Point2<f64>)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    let sum: f64 = pairs.iter().map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Time to reach the separation radius under constant relative motion.
/// `None` when the pair is not on a closing course; `Some(0)` when already
/// inside the radius.
pub fn time_to_collision(
    rel_pos: Vector2<f64>,
    rel_vel: Vector2<f64>,
    radius: f64,
) -> Option<f64> {
    let c = rel_pos.norm_squared() - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let a = rel_vel.norm_squared();
    if a < 1e-12 {
        return None;
    }
    let b = 2.0 * rel_pos.dot(&rel_vel);
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sqrt_d = disc.sqrt();
    let t1 = (-b - sqrt_d) / (2.0 * a);
    let t2 = (-b + sqrt_d) / (2.0 * a);
    let t = if t1 > 0.0 {
        t1
    } else if t2 > 0.0 {
        // Inside-out crossing cannot happen with c > 0; t2 > 0 > t1 means
        // the approach lies in the past.
        return None;
    } else {
        return None;
    };
    Some(t)
}

/// One simulated step as seen by the safety metric: ego state plus the
/// other vehicles' kinematics.
#[derive(Debug, Clone)]
pub struct SafetyStep {
    pub ego_pos: Point2<f64>,
    pub ego_vel: Vector2<f64>,
    /// Other vehicles' (position, velocity).
    pub others: Vec<(Point2<f64>, Vector2<f64>)>,
}

impl SafetyStep {
    /// `max(0, 1/TTC)` per other vehicle at this step.
    pub fn ittc_contributions(&self, cfg: &MetricsConfig) -> Vec<f64> {
        self.others
            .iter()
            .map(|(pos, vel)| {
                match time_to_collision(pos - self.ego_pos, vel - self.ego_vel, cfg.ittc_radius) {
                    Some(t) => 1.0 / t.max(cfg.ittc_ttc_floor),
                    None => 0.0,
                }
            })
            .collect()
    }
}

/// Mean of `max(0, 1/TTC)` over all (step, vehicle) pairs [1/s].
pub fn ittc(steps: &[SafetyStep], cfg: &MetricsConfig) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for step in steps {
        for c in step.ittc_contributions(cfg) {
            sum += c;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptySampleSet);
    }
    Ok(sum / count as f64)
}

/// Mean magnitude of the discrete acceleration derivative [m/s^3], from a
/// velocity trace sampled at `dt`.
pub fn jerk_mean(velocities: &[Vector2<f64>], dt: f64) -> Result<f64, MetricsError> {
    if velocities.len() < 3 {
        return Err(MetricsError::TooFewSamples {
            needed: 3,
            got: velocities.len(),
        });
    }
    let accels: Vec<Vector2<f64>> = velocities
        .windows(2)
        .map(|w| (w[1] - w[0]) / dt)
        .collect();
    let jerks: Vec<f64> = accels.windows(2).map(|w| ((w[1] - w[0]) / dt).norm()).collect();
    Ok(jerks.iter().sum::<f64>() / jerks.len() as f64)
}

/// Mean |F_u| over applied forces, in kN.
pub fn force_mean(forces_n: &[f64]) -> f64 {
    if forces_n.is_empty() {
        return 0.0;
    }
    forces_n.iter().map(|f| f.abs()).sum::<f64>() / forces_n.len() as f64 / 1000.0
}

/// Clearance used for bucketing: centre distance minus both half-widths,
/// clamped at zero.
pub fn vehicle_clearance(ego_pos: Point2<f64>, ego_width: f64, other_pos: Point2<f64>, other_width: f64) -> f64 {
    ((ego_pos - other_pos).norm() - ego_width / 2.0 - other_width / 2.0).max(0.0)
}

/// The distance that decides a step's buckets: nearest (default) or
/// farthest other vehicle. `None` on an empty road.
pub fn bucket_distance(clearances: &[f64], mode: BucketMode) -> Option<f64> {
    match mode {
        BucketMode::Nearest => clearances.iter().copied().min_by(f64::total_cmp),
        BucketMode::Farthest => clearances.iter().copied().max_by(f64::total_cmp),
    }
}

/// Everything one simulated step contributes to the planning metrics.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub bucket_distance: Option<f64>,
    pub ittc_contributions: Vec<f64>,
    /// Jerk sample centred at this step, when enough neighbours exist.
    pub jerk: Option<f64>,
    pub force_n: f64,
}

/// Lossless flat form of [`StepMetrics`] for CSV round trips: the inverse
/// TTC contributions collapse to their sum and count, which is all the
/// bucket aggregation needs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub bucket_distance: Option<f64>,
    pub ittc_sum: f64,
    pub ittc_count: usize,
    pub jerk: Option<f64>,
    pub force_n: f64,
}

impl StepMetrics {
    pub fn to_record(&self) -> StepRecord {
        StepRecord {
            bucket_distance: self.bucket_distance,
            ittc_sum: self.ittc_contributions.iter().sum(),
            ittc_count: self.ittc_contributions.len(),
            jerk: self.jerk,
            force_n: self.force_n,
        }
    }
}

/// One row of the bucketed planning table.
#[derive(Debug, Clone, Serialize)]
pub struct BucketRow {
    /// Upper edge of the bucket [m].
    pub edge: f64,
    pub steps: usize,
    /// Mean inverse TTC, scaled by 100 [1/s].
    pub ittc_x100: Option<f64>,
    pub jerk: Option<f64>,
    pub force_kn: Option<f64>,
}

/// Aggregates per-step samples into the nested distance buckets.
pub fn aggregate_buckets(steps: &[StepMetrics], cfg: &MetricsConfig) -> Vec<BucketRow> {
    let records: Vec<StepRecord> = steps.iter().map(StepMetrics::to_record).collect();
    aggregate_records(&records, cfg)
}

/// Bucket aggregation over the flat record form.
pub fn aggregate_records(steps: &[StepRecord], cfg: &MetricsConfig) -> Vec<BucketRow> {
    cfg.bucket_edges
        .iter()
        .map(|&edge| {
            let in_bucket: Vec<&StepRecord> = steps
                .iter()
                .filter(|s| s.bucket_distance.is_some_and(|d| d < edge))
                .collect();
            let mut ittc_sum = 0.0;
            let mut ittc_n = 0usize;
            let mut jerk_sum = 0.0;
            let mut jerk_n = 0usize;
            let mut force_sum = 0.0;
            for s in &in_bucket {
                ittc_sum += s.ittc_sum;
                ittc_n += s.ittc_count;
                if let Some(j) = s.jerk {
                    jerk_sum += j;
                    jerk_n += 1;
                }
                force_sum += s.force_n.abs();
            }
            BucketRow {
                edge,
                steps: in_bucket.len(),
                ittc_x100: (ittc_n > 0).then(|| 100.0 * ittc_sum / ittc_n as f64),
                jerk: (jerk_n > 0).then(|| jerk_sum / jerk_n as f64),
                force_kn: (!in_bucket.is_empty())
                    .then(|| force_sum / in_bucket.len() as f64 / 1000.0),
            }
        })
        .collect()
}

/// Relative improvement `(baseline - candidate) / baseline`, in percent.
pub fn relative_improvement(baseline: f64, candidate: f64) -> f64 {
    (baseline - candidate) / baseline * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_closed_forms() {
        let origin = Point2::new(0.0, 0.0);
        assert_eq!(rmse(&[(origin, origin)]).unwrap(), 0.0);
        assert!((rmse(&[(Point2::new(3.0, 4.0), origin)]).unwrap() - 5.0).abs() < 1e-15);
        let two = [
            (Point2::new(1.0, 0.0), origin),
            (Point2::new(0.0, 1.0), origin),
        ];
        assert!((rmse(&two).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(rmse(&[]), Err(MetricsError::EmptySampleSet)));
    }

    #[test]
    fn rmse_permutation_invariant_and_nonnegative() {
        let mut pairs: Vec<(Point2<f64>, Point2<f64>)> = (0..10)
            .map(|k| {
                (
                    Point2::new(k as f64, (k * k) as f64 * 0.1),
                    Point2::new(k as f64 + 0.5, 0.0),
                )
            })
            .collect();
        let a = rmse(&pairs).unwrap();
        pairs.reverse();
        pairs.swap(2, 7);
        let b = rmse(&pairs).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
        assert!(a >= 0.0);
    }

    #[test]
    fn ttc_closed_form() {
        // 20 m behind, closing at 5 m/s, radius 2 m: (20 - 2) / 5 = 3.6 s.
        let t = time_to_collision(Vector2::new(20.0, 0.0), Vector2::new(-5.0, 0.0), 2.0).unwrap();
        assert!((t - 3.6).abs() < 1e-12);
        let cfg = MetricsConfig::default();
        let step = SafetyStep {
            ego_pos: Point2::new(0.0, 0.0),
            ego_vel: Vector2::new(5.0, 0.0),
            others: vec![(Point2::new(20.0, 0.0), Vector2::new(0.0, 0.0))],
        };
        let c = step.ittc_contributions(&cfg)[0];
        assert!((c - 1.0 / 3.6).abs() < 1e-12);
    }

    #[test]
    fn opening_gap_contributes_zero() {
        assert_eq!(
            time_to_collision(Vector2::new(20.0, 0.0), Vector2::new(3.0, 0.0), 2.0),
            None
        );
        // Lateral pass that never enters the radius.
        assert_eq!(
            time_to_collision(Vector2::new(10.0, 5.0), Vector2::new(-8.0, 0.0), 2.0),
            None
        );
    }

    #[test]
    fn already_overlapping_counts_as_contact() {
        let t = time_to_collision(Vector2::new(1.0, 0.5), Vector2::new(4.0, 0.0), 2.0).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn ittc_matches_fine_step_contact_oracle() {
        // Three vehicles on closing courses; the oracle advances the
        // constant-velocity motion at 0.1 ms resolution and records the
        // first time each pair's distance crosses the radius.
        let cfg = MetricsConfig::default();
        let ego_pos = Point2::new(0.0, 0.0);
        let ego_vel = Vector2::new(20.0, 0.0);
        let others = vec![
            (Point2::new(35.0, 0.2), Vector2::new(14.0, 0.0)),
            (Point2::new(8.0, 3.5), Vector2::new(19.0, -0.6)),
            (Point2::new(-25.0, -0.3), Vector2::new(27.0, 0.1)),
        ];
        let step = SafetyStep {
            ego_pos,
            ego_vel,
            others: others.clone(),
        };
        let computed = ittc(&[step], &cfg).unwrap();

        let fine_dt = 1e-4;
        let mut oracle_sum = 0.0;
        for (pos, vel) in &others {
            let rel0 = pos - ego_pos;
            let relv = vel - ego_vel;
            let mut t = 0.0;
            let mut hit = None;
            while t < 60.0 {
                if (rel0 + relv * t).norm() <= cfg.ittc_radius {
                    hit = Some(t);
                    break;
                }
                t += fine_dt;
            }
            if let Some(t) = hit {
                oracle_sum += 1.0 / t.max(cfg.ittc_ttc_floor);
            }
        }
        let oracle = oracle_sum / others.len() as f64;
        assert!(oracle > 0.0, "oracle scene has no contact");
        assert!(
            (computed - oracle).abs() / oracle < 0.02,
            "ittc {computed} vs oracle {oracle}"
        );
    }

    #[test]
    fn jerk_closed_forms() {
        let dt = 0.1;
        // Constant acceleration: v(t) = 2t.
        let vels: Vec<Vector2<f64>> = (0..20)
            .map(|k| Vector2::new(2.0 * k as f64 * dt, 0.0))
            .collect();
        assert!(jerk_mean(&vels, dt).unwrap().abs() < 1e-12);

        // Acceleration ramp a(t) = t gives jerk 1 exactly in the discrete
        // scheme: v(t) = t^2 / 2.
        let vels: Vec<Vector2<f64>> = (0..20)
            .map(|k| {
                let t = k as f64 * dt;
                Vector2::new(t * t / 2.0, 0.0)
            })
            .collect();
        assert!((jerk_mean(&vels, dt).unwrap() - 1.0).abs() < 1e-9);

        assert!(matches!(
            jerk_mean(&vels[..2], dt),
            Err(MetricsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn jerk_piecewise_profile_matches_hand_computation() {
        let dt = 0.5;
        // Velocities 0, 1, 3, 4, 4 -> accels 2, 4, 2, 0 -> jerks 4, -4, -4.
        let vels: Vec<Vector2<f64>> = [0.0, 1.0, 3.0, 4.0, 4.0]
            .iter()
            .map(|v| Vector2::new(*v, 0.0))
            .collect();
        let expect = (4.0 + 4.0 + 4.0) / 3.0;
        assert!((jerk_mean(&vels, dt).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn force_mean_closed_forms() {
        assert_eq!(force_mean(&[]), 0.0);
        assert_eq!(force_mean(&[0.0, 0.0]), 0.0);
        assert!((force_mean(&[6000.0, 6000.0]) - 6.0).abs() < 1e-15);
        assert!((force_mean(&[3000.0, -3000.0, 3000.0, -3000.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn bucket_nesting() {
        let cfg = MetricsConfig::default();
        let mk = |d: Option<f64>| StepMetrics {
            bucket_distance: d,
            ittc_contributions: vec![0.2],
            jerk: Some(1.0),
            force_n: 1000.0,
        };
        let steps = vec![mk(Some(2.5)), mk(Some(25.0)), mk(None)];
        let rows = aggregate_buckets(&steps, &cfg);
        let counts: Vec<usize> = rows.iter().map(|r| r.steps).collect();
        // 2.5 m lands in every bucket; 25 m only in <30 and <50; the empty
        // road step lands nowhere.
        assert_eq!(counts, vec![1, 1, 1, 1, 1, 2, 2]);
        for pair in counts.windows(2) {
            assert!(pair[0] <= pair[1], "bucket counts must be nested");
        }
        assert!(rows[0].ittc_x100.unwrap() > 0.0);
    }

    #[test]
    fn bucket_distance_modes() {
        let clearances = vec![4.0, 12.0, 30.0];
        assert_eq!(bucket_distance(&clearances, BucketMode::Nearest), Some(4.0));
        assert_eq!(
            bucket_distance(&clearances, BucketMode::Farthest),
            Some(30.0)
        );
        assert_eq!(bucket_distance(&[], BucketMode::Nearest), None);
    }

    #[test]
    fn clearance_subtracts_half_widths() {
        let d = vehicle_clearance(
            Point2::new(0.0, 0.0),
            2.0,
            Point2::new(5.0, 0.0),
            1.8,
        );
        assert!((d - (5.0 - 1.0 - 0.9)).abs() < 1e-12);
        // Overlap clamps at zero.
        let d = vehicle_clearance(Point2::new(0.0, 0.0), 2.0, Point2::new(1.0, 0.0), 1.8);
        assert_eq!(d, 0.0);
    }
}
