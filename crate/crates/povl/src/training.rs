//! Dataset assembly, the training loop, and the prediction evaluation
//! driver.
//!
//! Samples pair an observation window with the 25 future Frenet
//! displacements of the same vehicle; the observation length is drawn
//! uniformly from the valid range per sample, which is the whole training
//! signal for variable-length robustness. The split between training and
//! evaluation happens at the recording level, never per frame.

use nalgebra::Point2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureNorm, ObservationWindow, WindowBuilder, T_MAX, T_MIN};
use crate::geometry::SegmentKind;
use crate::metrics::rmse;
use crate::predictor::{predict_cv, PovlPredictor, PredictError};
use crate::scene::{MapModel, TrackSet};
use crate::transformer::{
    adam_step, AdamState, Mat, ModelConfig, ModelError, PovlModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at batch {batch}; last good checkpoint returned")]
    Diverged {
        batch: usize,
        last_good: Box<PovlModel>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Desk-scale default; the full-scale setting is 1e5 batches of 2000.
    pub max_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep a divergence-recovery snapshot every this many batches.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_batches: 2000,
            batch_size: 64,
            seed: 7,
            checkpoint_every: 250,
            log_every: 50,
        }
    }
}

/// Controls how anchors are drawn from tracks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Use every `stride`-th eligible frame as an anchor.
    pub stride: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { stride: 5, seed: 11 }
    }
}

/// One training pair: a window and its future displacements in the frame
/// of the path the vehicle was associated with at the anchor.
#[derive(Debug, Clone)]
pub struct Sample {
    pub vehicle_id: u64,
    pub anchor_frame: i64,
    pub path: SegmentKind,
    pub window: ObservationWindow,
    /// `t_pred x 2` per-step (ds, dd) displacements.
    pub targets: Mat,
}

#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn fit_norm(&self) -> FeatureNorm {
        FeatureNorm::fit(self.samples.iter().map(|s| &s.window))
    }
}

/// Future displacements of a track in one path's Frenet frame, starting at
/// `anchor_frame`.
fn displacement_targets(
    tracks: &TrackSet,
    map: &MapModel,
    id: u64,
    anchor_frame: i64,
    path: SegmentKind,
    t_pred: usize,
) -> Option<Mat> {
    let track = tracks.get(id)?;
    let ref_path = map.paths.path(path);
    let mut prev = {
        let f = track.at(anchor_frame)?;
        let p = ref_path.to_frenet(f.pos);
        (p.state.s, p.state.d)
    };
    let mut targets = Mat::zeros(t_pred, 2);
    for k in 0..t_pred {
        let f = track.at(anchor_frame + k as i64 + 1)?;
        let proj = ref_path.to_frenet(f.pos);
        if proj.status.is_clamped() {
            return None;
        }
        targets[(k, 0)] = proj.state.s - prev.0;
        targets[(k, 1)] = proj.state.d - prev.1;
        prev = (proj.state.s, proj.state.d);
    }
    Some(targets)
}

/// Builds the dataset: every eligible (vehicle, frame) anchor with at
/// least one past step and a full future, observation length drawn
/// uniformly from what the track supports.
pub fn make_samples(
    tracks: &TrackSet,
    map: &MapModel,
    model_cfg: &ModelConfig,
    cfg: &SampleConfig,
) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let builder = WindowBuilder::new(map);
    let mut samples = Vec::new();
    for track in tracks.iter() {
        let n = track.frames.len() as i64;
        let mut local = (T_MIN as i64 - 1).max(0);
        while local + (model_cfg.t_pred as i64) < n {
            let frame = track.start_frame + local;
            let history = (local + 1) as usize;
            let t_obs = rng.gen_range(T_MIN..=history.min(T_MAX));
            match builder.build_window(tracks, track.id, frame, t_obs) {
                Ok((window, path)) => {
                    if let Some(targets) = displacement_targets(
                        tracks,
                        map,
                        track.id,
                        frame,
                        path,
                        model_cfg.t_pred,
                    ) {
                        samples.push(Sample {
                            vehicle_id: track.id,
                            anchor_frame: frame,
                            path,
                            window,
                            targets,
                        });
                    }
                }
                // Vehicles outside both corridors (e.g. clamped at a path
                // end) simply contribute no samples.
                Err(_) => {}
            }
            local += cfg.stride.max(1) as i64;
        }
    }
    SampleSet { samples }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PovlModel,
    /// (batch index, mean batch NLL) at the logging cadence.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Trains a fresh model on the sample set. Deterministic given the seeds.
pub fn train(
    samples: &SampleSet,
    model_cfg: ModelConfig,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let norm = samples.fit_norm();
    let mut model = PovlModel::init(model_cfg, norm, cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut cursor = samples.len(); // trigger a shuffle on first use
    let mut loss_curve = Vec::new();
    let mut last_good = model.clone();

    for batch in 0..cfg.max_batches {
        let mut grads = model.params.zeros_like();
        let mut batch_loss = 0.0;
        let actual = cfg.batch_size.min(samples.len());
        for _ in 0..actual {
            if cursor >= order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let sample = &samples.samples[order[cursor]];
            cursor += 1;
            let (loss, g) = match model.loss_grads(&sample.window, &sample.targets) {
                Ok(v) => v,
                Err(ModelError::NonFiniteLoss) | Err(ModelError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged {
                        batch,
                        last_good: Box::new(last_good),
                    });
                }
                Err(e) => return Err(e.into()),
            };
            batch_loss += loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += gi / actual as f64;
            }
        }
        batch_loss /= actual as f64;
        if !batch_loss.is_finite() {
            return Err(TrainError::Diverged {
                batch,
                last_good: Box::new(last_good),
            });
        }
        adam_step(&mut model.params, &grads, &mut adam, cfg.learning_rate);
        if !model.params.all_finite() {
            return Err(TrainError::Diverged {
                batch,
                last_good: Box::new(last_good),
            });
        }
        if batch % cfg.log_every == 0 || batch + 1 == cfg.max_batches {
            loss_curve.push((batch, batch_loss));
        }
        if batch % cfg.checkpoint_every == 0 {
            last_good = model.clone();
        }
    }
    Ok(TrainOutcome { model, loss_curve })
}

/// Where to cut the per-horizon RMSE columns (1 s .. 5 s at 5 fps).
pub const HORIZON_STEPS: [usize; 5] = [5, 10, 15, 20, 25];

#[derive(Debug, Clone, Serialize)]
pub struct ObsLengthRow {
    pub t_obs: usize,
    pub povl_rmse: f64,
    pub cv_rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport {
    /// RMSE at 1..5 s for the full observation window.
    pub povl_by_horizon: Vec<f64>,
    pub cv_by_horizon: Vec<f64>,
    /// Pooled RMSE per observation length, 14 rows for 2..=15 steps.
    pub by_obslength: Vec<ObsLengthRow>,
    /// Ground-truth self-check; nonzero would mean the horizon alignment
    /// between predictions and scoring is off.
    pub gt_self_rmse: f64,
    pub anchors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub stride: usize,
    pub max_anchors: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            max_anchors: 400,
        }
    }
}

/// Evaluates a trained model against the CV baseline on held-out tracks.
/// Anchors require a full 15-step history so every observation length is
/// scored on identical anchors.
pub fn evaluate(
    model: &PovlModel,
    tracks: &TrackSet,
    map: &MapModel,
    cfg: &EvalConfig,
) -> Result<PredictionReport, TrainError> {
    let predictor = PovlPredictor::new(model.clone());
    let t_pred = model.cfg.t_pred;

    // Collect anchors.
    let mut anchors: Vec<(u64, i64)> = Vec::new();
    for track in tracks.iter() {
        let n = track.frames.len() as i64;
        let mut local = T_MAX as i64 - 1;
        while local + (t_pred as i64) < n {
            anchors.push((track.id, track.start_frame + local));
            local += cfg.stride.max(1) as i64;
        }
    }
    anchors.truncate(cfg.max_anchors);
    if anchors.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    // Ground truth per anchor.
    let truth: Vec<Vec<Point2<f64>>> = anchors
        .iter()
        .map(|&(id, frame)| {
            let track = tracks.get(id).unwrap();
            (1..=t_pred)
                .map(|k| track.at(frame + k as i64).unwrap().pos)
                .collect()
        })
        .collect();

    // CV baseline and the ground-truth self check.
    let mut cv_points: Vec<Vec<Point2<f64>>> = Vec::with_capacity(anchors.len());
    let mut gt_pairs = Vec::new();
    for (&(id, frame), gt) in anchors.iter().zip(&truth) {
        let track = tracks.get(id).unwrap();
        let cv = predict_cv(track, frame)?;
        cv_points.push(cv.points.clone());
        let gt_pred = crate::predictor::predict_gt(track, frame)?;
        gt_pairs.extend(gt_pred.points.iter().copied().zip(gt.iter().copied()));
    }
    let gt_self_rmse = rmse(&gt_pairs).unwrap_or(0.0);

    let horizon_rmse = |points: &[Vec<Point2<f64>>]| -> Vec<f64> {
        HORIZON_STEPS
            .iter()
            .map(|&h| {
                let pairs: Vec<(Point2<f64>, Point2<f64>)> = points
                    .iter()
                    .zip(&truth)
                    .map(|(p, t)| (p[h - 1], t[h - 1]))
                    .collect();
                rmse(&pairs).unwrap()
            })
            .collect()
    };
    let pooled_rmse = |points: &[Vec<Point2<f64>>]| -> f64 {
        let pairs: Vec<(Point2<f64>, Point2<f64>)> = points
            .iter()
            .zip(&truth)
            .flat_map(|(p, t)| p.iter().copied().zip(t.iter().copied()))
            .collect();
        rmse(&pairs).unwrap()
    };

    let cv_pooled = pooled_rmse(&cv_points);
    let cv_by_horizon = horizon_rmse(&cv_points);

    let mut by_obslength = Vec::with_capacity(T_MAX - T_MIN + 1);
    let mut povl_full: Vec<Vec<Point2<f64>>> = Vec::new();
    for t_obs in T_MIN..=T_MAX {
        let mut points: Vec<Vec<Point2<f64>>> = Vec::with_capacity(anchors.len());
        for &(id, frame) in &anchors {
            let pred = predictor.predict(tracks, map, id, frame, t_obs)?;
            points.push(pred.points);
        }
        by_obslength.push(ObsLengthRow {
            t_obs,
            povl_rmse: pooled_rmse(&points),
            cv_rmse: cv_pooled,
        });
        if t_obs == T_MAX {
            povl_full = points;
        }
    }

    Ok(PredictionReport {
        povl_by_horizon: horizon_rmse(&povl_full),
        cv_by_horizon,
        by_obslength,
        gt_self_rmse,
        anchors: anchors.len(),
    })
}
