//! Closed-loop scenario simulation: replay the background traffic, predict
//! every perceived vehicle each period, plan with the receding-horizon
//! solver, and score the applied trajectory.
//!
//! Background tracks replay open-loop; only the ego moves under the
//! planner. Observation lengths grow per vehicle from the frame it first
//! entered the ego's perception range (seeded from the recorded pre-roll),
//! capped at the model's window, which is exactly where variable-length
//! prediction pays off.

use std::collections::HashMap;

use thiserror::Error;

use crate::dynamics::{ControlInput, EgoState, VehicleParams};
use crate::features::{FeatureConfig, T_MAX, T_MIN};
use crate::metrics::{
    aggregate_buckets, bucket_distance, vehicle_clearance, BucketRow, MetricsConfig, SafetyStep,
    StepMetrics,
};
use crate::mpc::{receding_horizon_step, EgoPlan, PlanContext, PlannerConfig, SolveStatus};
use crate::potential::PotentialConfig;
use crate::predictor::{PredictedTrajectory, Predictor, PredictError, PredictorKind, PRED_STEPS};
use crate::scene::{Scenario, DT};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario {scenario}: {source}")]
    Predict {
        scenario: String,
        #[source]
        source: PredictError,
    },
    #[error("scenario invalid: {0}")]
    Scene(#[from] crate::scene::SceneError),
}

/// Bundled settings for one simulation run.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub planner: PlannerConfig,
    pub potential: PotentialConfig,
    pub vehicle: VehicleParams,
    pub features: FeatureConfig,
    pub metrics: MetricsConfig,
}

/// Applied trajectory and per-step records of one closed-loop run.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub scenario: String,
    pub predictor: PredictorKind,
    /// `duration + 1` ego states, starting at the scenario start.
    pub states: Vec<EgoState>,
    pub applied: Vec<ControlInput>,
    pub plans: Vec<EgoPlan>,
    pub step_metrics: Vec<StepMetrics>,
    /// Predictions per step, aligned with the predicted vehicle ids.
    pub predictions: Vec<Vec<(u64, PredictedTrajectory)>>,
    pub solver_failures: usize,
}

impl SimResult {
    pub fn bucket_rows(&self, cfg: &MetricsConfig) -> Vec<BucketRow> {
        aggregate_buckets(&self.step_metrics, cfg)
    }

    pub fn forces_n(&self) -> Vec<f64> {
        self.applied.iter().map(|u| u.force).collect()
    }

    pub fn velocities(&self) -> Vec<nalgebra::Vector2<f64>> {
        self.states.iter().map(|s| s.velocity()).collect()
    }
}

/// Ego state from a recorded track frame; lateral velocity starts at zero
/// and the yaw rate from the recent heading change.
pub fn ego_state_from_track(scenario: &Scenario) -> EgoState {
    let ego = scenario
        .tracks
        .get(scenario.ego_id)
        .expect("validated scenario has an ego track");
    let f = ego
        .at(scenario.t0_frame)
        .expect("validated scenario covers t0");
    let psi = f.vel.y.atan2(f.vel.x);
    let r = match ego.at(scenario.t0_frame - 1) {
        Some(prev) => {
            let psi_prev = prev.vel.y.atan2(prev.vel.x);
            (psi - psi_prev) / DT
        }
        None => 0.0,
    };
    EgoState {
        x: f.pos.x,
        u: f.vel.norm(),
        y: f.pos.y,
        v: 0.0,
        psi,
        r,
    }
}

/// Frames since each vehicle entered the perception radius of the given
/// positions, seeded over the recorded pre-roll.
struct PerceptionTracker {
    first_seen: HashMap<u64, i64>,
    range: f64,
}

impl PerceptionTracker {
    fn new(scenario: &Scenario, range: f64) -> Self {
        let mut tracker = Self {
            first_seen: HashMap::new(),
            range,
        };
        let ego = scenario.tracks.get(scenario.ego_id).unwrap();
        let from = (scenario.t0_frame - (T_MAX as i64 - 1)).max(ego.start_frame);
        for frame in from..=scenario.t0_frame {
            if let Some(f) = ego.at(frame) {
                tracker.observe(scenario, frame, f.pos);
            }
        }
        tracker
    }

    fn observe(&mut self, scenario: &Scenario, frame: i64, ego_pos: nalgebra::Point2<f64>) {
        for (track, f) in scenario.tracks.present_at(frame) {
            if track.id == scenario.ego_id {
                continue;
            }
            if (f.pos - ego_pos).norm() <= self.range {
                self.first_seen.entry(track.id).or_insert(frame);
            }
        }
    }

    /// Valid observation steps for a vehicle at `frame`, before window caps.
    fn observed_steps(&self, id: u64, frame: i64) -> Option<usize> {
        self.first_seen
            .get(&id)
            .map(|first| (frame - first + 1).max(0) as usize)
    }
}

/// Runs one scenario closed-loop with the given predictor.
pub fn simulate_scenario(
    scenario: &Scenario,
    predictor: &Predictor,
    opts: &SimOptions,
) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let map = &scenario.map;
    let mut state = ego_state_from_track(scenario);
    let mut perception = PerceptionTracker::new(scenario, opts.features.perception_range);

    let mut states = vec![state];
    let mut applied = Vec::with_capacity(scenario.duration_frames);
    let mut plans = Vec::with_capacity(scenario.duration_frames);
    let mut all_predictions = Vec::with_capacity(scenario.duration_frames);
    let mut raw_steps: Vec<(Option<f64>, Vec<f64>, f64)> = Vec::new();
    let mut warm: Option<Vec<ControlInput>> = None;
    let mut prev_control = ControlInput::default();
    let mut solver_failures = 0usize;

    for k in 0..scenario.duration_frames {
        let frame = scenario.t0_frame + k as i64;
        perception.observe(scenario, frame, state.position());

        // A vehicle is predicted once every source can serve it: at least
        // two observed frames and a full recorded future. Using one shared
        // rule keeps the predictor comparison on identical vehicle sets.
        let mut predictions: Vec<(u64, PredictedTrajectory)> = Vec::new();
        for (track, _) in scenario.tracks.present_at(frame) {
            if track.id == scenario.ego_id {
                continue;
            }
            let Some(seen) = perception.observed_steps(track.id, frame) else {
                continue;
            };
            let history = (frame - track.start_frame + 1) as usize;
            let t_obs = seen.min(history).min(T_MAX);
            if t_obs < T_MIN {
                continue;
            }
            if track.end_frame() <= frame + PRED_STEPS as i64 {
                continue;
            }
            let pred = predictor
                .predict(&scenario.tracks, map, track.id, frame, t_obs)
                .map_err(|source| SimError::Predict {
                    scenario: scenario.name.clone(),
                    source,
                })?;
            predictions.push((track.id, pred));
        }

        let pred_only: Vec<PredictedTrajectory> =
            predictions.iter().map(|(_, p)| p.clone()).collect();
        let ctx = PlanContext::new(
            map,
            &opts.potential,
            &opts.vehicle,
            &pred_only,
            opts.planner.horizon,
            scenario.target_lane_offset,
            scenario.u_des,
            prev_control,
        );
        let (control, next_state, plan, next_warm) =
            receding_horizon_step(&state, &ctx, &opts.planner, warm.as_deref());
        if plan.status == SolveStatus::Failed {
            solver_failures += 1;
        }

        // Safety and bucketing against the replayed traffic.
        let others: Vec<(nalgebra::Point2<f64>, nalgebra::Vector2<f64>)> = scenario
            .tracks
            .present_at(frame)
            .filter(|(t, _)| t.id != scenario.ego_id)
            .map(|(_, f)| (f.pos, f.vel))
            .collect();
        let clearances: Vec<f64> = scenario
            .tracks
            .present_at(frame)
            .filter(|(t, _)| t.id != scenario.ego_id)
            .map(|(t, f)| vehicle_clearance(state.position(), opts.vehicle.width, f.pos, t.width))
            .collect();
        let safety = SafetyStep {
            ego_pos: state.position(),
            ego_vel: state.velocity(),
            others,
        };
        raw_steps.push((
            bucket_distance(&clearances, opts.metrics.bucket_mode),
            safety.ittc_contributions(&opts.metrics),
            control.force,
        ));

        prev_control = control;
        state = next_state;
        states.push(state);
        applied.push(control);
        plans.push(plan);
        all_predictions.push(predictions);
        warm = Some(next_warm);
    }

    // Jerk samples need a centred velocity stencil; the first and last
    // steps have none.
    let velocities: Vec<nalgebra::Vector2<f64>> = states.iter().map(|s| s.velocity()).collect();
    let accels: Vec<nalgebra::Vector2<f64>> = velocities
        .windows(2)
        .map(|w| (w[1] - w[0]) / DT)
        .collect();
    let step_metrics: Vec<StepMetrics> = raw_steps
        .into_iter()
        .enumerate()
        .map(|(k, (bucket, ittc, force))| StepMetrics {
            bucket_distance: bucket,
            ittc_contributions: ittc,
            jerk: (k >= 1 && k < accels.len()).then(|| ((accels[k] - accels[k - 1]) / DT).norm()),
            force_n: force,
        })
        .collect();

    Ok(SimResult {
        scenario: scenario.name.clone(),
        predictor: predictor.kind(),
        states,
        applied,
        plans,
        step_metrics,
        predictions: all_predictions,
        solver_failures,
    })
}
