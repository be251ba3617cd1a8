//! Uniform prediction interface over the constant-velocity baseline, the
//! learned displacement model, and the ground-truth oracle.
//!
//! All three emit identically shaped trajectories: 25 Cartesian positions
//! at 0.2 s spacing with a per-step covariance. The planner cannot tell
//! the sources apart structurally.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, WindowBuilder};
use crate::geometry::GeometryError;
use crate::scene::{MapModel, Track, TrackSet, DT};
use crate::transformer::{ModelError, PovlModel};

/// Prediction horizon in steps (5 s at 5 fps).
pub const PRED_STEPS: usize = 25;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("track {id} has no frame {frame}")]
    NoFrame { id: u64, frame: i64 },
    #[error("track {id} covers only {have} of {needed} future steps")]
    InsufficientFuture { id: u64, needed: usize, have: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Cv,
    Povl,
    Gt,
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PredictorKind::Cv => "cv",
            PredictorKind::Povl => "povl",
            PredictorKind::Gt => "gt",
        };
        f.write_str(s)
    }
}

/// A predicted future: `PRED_STEPS` positions at `DT` spacing.
#[derive(Debug, Clone)]
pub struct PredictedTrajectory {
    pub source: PredictorKind,
    pub points: Vec<Point2<f64>>,
    /// Per-step symmetric covariance `(xx, xy, yy)` in the global frame;
    /// identity-scaled for the CV and GT sources.
    pub cov: Vec<[f64; 3]>,
}

impl PredictedTrajectory {
    fn with_unit_cov(source: PredictorKind, points: Vec<Point2<f64>>) -> Self {
        let cov = vec![[1.0, 0.0, 1.0]; points.len()];
        Self {
            source,
            points,
            cov,
        }
    }
}

/// Straight-line constant-velocity extrapolation in the Cartesian frame.
pub fn predict_cv(track: &Track, frame: i64) -> Result<PredictedTrajectory, PredictError> {
    let f = track.at(frame).ok_or(PredictError::NoFrame {
        id: track.id,
        frame,
    })?;
    let points = (1..=PRED_STEPS)
        .map(|k| f.pos + f.vel * (k as f64 * DT))
        .collect();
    Ok(PredictedTrajectory::with_unit_cov(PredictorKind::Cv, points))
}

/// Replays the recorded future.
pub fn predict_gt(track: &Track, frame: i64) -> Result<PredictedTrajectory, PredictError> {
    track.at(frame).ok_or(PredictError::NoFrame {
        id: track.id,
        frame,
    })?;
    let mut points = Vec::with_capacity(PRED_STEPS);
    for k in 1..=PRED_STEPS {
        match track.at(frame + k as i64) {
            Some(f) => points.push(f.pos),
            None => {
                return Err(PredictError::InsufficientFuture {
                    id: track.id,
                    needed: PRED_STEPS,
                    have: k - 1,
                })
            }
        }
    }
    Ok(PredictedTrajectory::with_unit_cov(PredictorKind::Gt, points))
}

/// The learned predictor: observation window in Frenet, autoregressive
/// decoding, cumulative displacement, conversion back to Cartesian.
pub struct PovlPredictor {
    pub model: PovlModel,
}

impl PovlPredictor {
    pub fn new(model: PovlModel) -> Self {
        Self { model }
    }

    pub fn predict(
        &self,
        tracks: &TrackSet,
        map: &MapModel,
        id: u64,
        frame: i64,
        t_obs: usize,
    ) -> Result<PredictedTrajectory, PredictError> {
        let builder = WindowBuilder::new(map);
        let (window, kind) = builder.build_window(tracks, id, frame, t_obs)?;
        let gauss = self.model.predict(&window)?;

        let track = tracks.get(id).expect("window built for unknown vehicle");
        let anchor = track.at(frame).expect("window built for missing frame");
        let path = map.paths.path(kind);
        let proj = path.to_frenet(anchor.pos);

        let mut points = Vec::with_capacity(gauss.steps.len());
        let mut cov = Vec::with_capacity(gauss.steps.len());
        for (s, d) in gauss.cumulative_positions(proj.state.s, proj.state.d) {
            points.push(path.to_cartesian(s, d)?);
        }
        for (step, (s, _)) in gauss
            .steps
            .iter()
            .zip(gauss.cumulative_positions(proj.state.s, proj.state.d))
        {
            // Rotate the Frenet step covariance into the global frame.
            let t = path.tangent_at(s);
            let n = Vector2::new(-t.y, t.x);
            let sxx = step.sigma_s * step.sigma_s;
            let syy = step.sigma_d * step.sigma_d;
            let sxy = step.rho * step.sigma_s * step.sigma_d;
            let cxx = t.x * t.x * sxx + 2.0 * t.x * n.x * sxy + n.x * n.x * syy;
            let cxy = t.x * t.y * sxx + (t.x * n.y + t.y * n.x) * sxy + n.x * n.y * syy;
            let cyy = t.y * t.y * sxx + 2.0 * t.y * n.y * sxy + n.y * n.y * syy;
            cov.push([cxx, cxy, cyy]);
        }
        Ok(PredictedTrajectory {
            source: PredictorKind::Povl,
            points,
            cov,
        })
    }
}

/// Dispatching handle used by the closed-loop simulation.
pub enum Predictor {
    Cv,
    Gt,
    Povl(Box<PovlPredictor>),
}

impl Predictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Cv => PredictorKind::Cv,
            Predictor::Gt => PredictorKind::Gt,
            Predictor::Povl(_) => PredictorKind::Povl,
        }
    }

    pub fn predict(
        &self,
        tracks: &TrackSet,
        map: &MapModel,
        id: u64,
        frame: i64,
        t_obs: usize,
    ) -> Result<PredictedTrajectory, PredictError> {
        let track = tracks.get(id).ok_or(PredictError::NoFrame { id, frame })?;
        match self {
            Predictor::Cv => predict_cv(track, frame),
            Predictor::Gt => predict_gt(track, frame),
            Predictor::Povl(p) => p.predict(tracks, map, id, frame, t_obs),
        }
    }
}
