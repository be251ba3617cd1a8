//! Transformer encoder-decoder for displacement prediction.
//!
//! The encoder consumes a (possibly padded) observation window and masks
//! padded positions out of every attention step, so the latents at valid
//! positions are independent of both the pad contents and the pad length.
//! Encoder positions are anchored at the current time step (position 0 =
//! newest observation) to keep that invariance across pad counts. The
//! decoder runs causally over displacement steps: teacher forcing during
//! training, greedy mean feedback at inference.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tape::{gaussian_step_from_raw, GaussianStep, Mask, Mat, NodeId, Tape, TapeError};
use crate::features::{FeatureNorm, ObservationWindow, NUM_FEATURES, T_MAX};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite activations in {stage}")]
    NonFinite { stage: String },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("input has shape {got_rows}x{got_cols}, expected Tx{want_cols} with T in [1, {max_rows}]")]
    BadShape {
        got_rows: usize,
        got_cols: usize,
        want_cols: usize,
        max_rows: usize,
    },
    #[error("checkpoint version {0} not supported")]
    BadVersion(u32),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    /// Desk-scale default 64; the full-scale value 512 is supported.
    pub d_model: usize,
    pub d_ff: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub t_max: usize,
    pub t_pred: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 8,
            d_model: 64,
            d_ff: 128,
            input_dim: NUM_FEATURES,
            output_dim: 5,
            t_max: T_MAX,
            t_pred: 25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.output_dim != 5 {
            return Err(ModelError::BadConfig(
                "output head must emit 5 Gaussian parameters".into(),
            ));
        }
        Ok(())
    }
}

/// Named dense parameters in a stable order.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    names: Vec<String>,
    mats: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            mats: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, mat: Mat) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.mats.len());
        self.names.push(name.to_string());
        self.mats.push(mat);
    }

    pub fn position(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.mats[self.index[name]]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.mats
            .iter()
            .map(|m| Mat::zeros(m.nrows(), m.ncols()))
            .collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-step bivariate Gaussian displacement parameters over the prediction
/// horizon, in the Frenet frame of the TV's path.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTrajectory {
    pub steps: Vec<GaussianStep>,
}

impl GaussianTrajectory {
    /// Cumulative sum of mean displacements from `(s0, d0)`.
    pub fn cumulative_positions(&self, s0: f64, d0: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.steps.len());
        let (mut s, mut d) = (s0, d0);
        for step in &self.steps {
            s += step.mu_s;
            d += step.mu_d;
            out.push((s, d));
        }
        out
    }
}

/// Mean per-step bivariate Gaussian negative log-likelihood.
pub fn nll_loss(pred: &GaussianTrajectory, truth: &[(f64, f64)]) -> Result<f64, ModelError> {
    debug_assert_eq!(pred.steps.len(), truth.len());
    let mut total = 0.0;
    for (step, t) in pred.steps.iter().zip(truth) {
        total += super::tape::gaussian_nll_step(step, *t);
    }
    let loss = total / truth.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFiniteLoss)
    }
}

/// The trajectory prediction network with its normalization constants.
#[derive(Debug, Clone)]
pub struct PovlModel {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
    pub norm: FeatureNorm,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl PovlModel {
    pub fn init(cfg: ModelConfig, norm: FeatureNorm, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let d = cfg.d_model;

        p.insert("enc.embed.w", xavier(&mut rng, cfg.input_dim, d));
        p.insert("enc.embed.b", Mat::zeros(1, d));
        for l in 0..cfg.n_layers_enc {
            insert_attention(&mut p, &mut rng, &format!("enc.{l}.attn"), d);
            insert_layer_norm(&mut p, &format!("enc.{l}.ln1"), d);
            insert_feed_forward(&mut p, &mut rng, &format!("enc.{l}.ff"), d, cfg.d_ff);
            insert_layer_norm(&mut p, &format!("enc.{l}.ln2"), d);
        }
        p.insert("dec.embed.w", xavier(&mut rng, 2, d));
        p.insert("dec.embed.b", Mat::zeros(1, d));
        for l in 0..cfg.n_layers_dec {
            insert_attention(&mut p, &mut rng, &format!("dec.{l}.self"), d);
            insert_layer_norm(&mut p, &format!("dec.{l}.ln1"), d);
            insert_attention(&mut p, &mut rng, &format!("dec.{l}.cross"), d);
            insert_layer_norm(&mut p, &format!("dec.{l}.ln2"), d);
            insert_feed_forward(&mut p, &mut rng, &format!("dec.{l}.ff"), d, cfg.d_ff);
            insert_layer_norm(&mut p, &format!("dec.{l}.ln3"), d);
        }
        p.insert("head.w", xavier(&mut rng, d, cfg.output_dim));
        p.insert("head.b", Mat::zeros(1, cfg.output_dim));

        Ok(Self {
            cfg,
            params: p,
            norm,
        })
    }

    /// Normalized feature matrix of a window; padded rows stay exactly zero.
    pub fn normalized_features(&self, window: &ObservationWindow) -> Mat {
        let mut m = Mat::zeros(T_MAX, NUM_FEATURES);
        for (i, (row, &valid)) in window.features.iter().zip(&window.mask).enumerate() {
            if valid {
                let n = self.norm.apply(row);
                for (j, v) in n.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
        }
        m
    }

    /// Encoder latents for a padded window.
    pub fn encode_window(&self, window: &ObservationWindow) -> Result<Mat, ModelError> {
        self.encode_raw(&self.normalized_features(window), &window.mask)
    }

    /// Encoder latents for already-normalized rows with an explicit mask.
    /// Accepts any sequence length in `[1, t_max]`.
    pub fn encode_raw(&self, features: &Mat, valid: &[bool]) -> Result<Mat, ModelError> {
        self.check_input(features, valid)?;
        let mut tape = Tape::new();
        let pids = self.leaves(&mut tape);
        let latents = self.encode_nodes(&mut tape, &pids, features, valid)?;
        Ok(tape.value(latents).clone())
    }

    /// Autoregressive prediction: encode once, then feed each step's mean
    /// displacement back as the next decoder input.
    pub fn predict(&self, window: &ObservationWindow) -> Result<GaussianTrajectory, ModelError> {
        self.predict_raw(&self.normalized_features(window), &window.mask)
    }

    pub fn predict_raw(
        &self,
        features: &Mat,
        valid: &[bool],
    ) -> Result<GaussianTrajectory, ModelError> {
        self.check_input(features, valid)?;
        let mut tape = Tape::new();
        let pids = self.leaves(&mut tape);
        let latents = self.encode_nodes(&mut tape, &pids, features, valid)?;

        let mut dec_in = Mat::zeros(1, 2);
        let mut steps: Vec<GaussianStep> = Vec::with_capacity(self.cfg.t_pred);
        for k in 0..self.cfg.t_pred {
            let raw = self.decode_nodes(&mut tape, &pids, latents, valid, &dec_in)?;
            let out = tape.value(raw);
            let row = out.row(k);
            let step = gaussian_step_from_raw(&[row[0], row[1], row[2], row[3], row[4]]);
            steps.push(step);
            if k + 1 < self.cfg.t_pred {
                let mut next = Mat::zeros(k + 2, 2);
                next.rows_mut(0, k + 1).copy_from(&dec_in);
                next[(k + 1, 0)] = step.mu_s;
                next[(k + 1, 1)] = step.mu_d;
                dec_in = next;
            }
        }
        Ok(GaussianTrajectory { steps })
    }

    /// Teacher-forced raw head outputs for the full horizon (one pass).
    pub fn teacher_forced_raw(
        &self,
        window: &ObservationWindow,
        targets: &Mat,
    ) -> Result<Mat, ModelError> {
        let features = self.normalized_features(window);
        let mut tape = Tape::new();
        let pids = self.leaves(&mut tape);
        let latents = self.encode_nodes(&mut tape, &pids, &features, &window.mask)?;
        let dec_in = teacher_inputs(targets, self.cfg.t_pred);
        let raw = self.decode_nodes(&mut tape, &pids, latents, &window.mask, &dec_in)?;
        Ok(tape.value(raw).clone())
    }

    /// Teacher-forced NLL of `targets` (t_pred × 2 displacements).
    pub fn loss(&self, window: &ObservationWindow, targets: &Mat) -> Result<f64, ModelError> {
        let (loss, _, _) = self.forward_loss(window, targets, false)?;
        Ok(loss)
    }

    /// Teacher-forced NLL plus gradients for every parameter, aligned with
    /// the parameter store order.
    pub fn loss_grads(
        &self,
        window: &ObservationWindow,
        targets: &Mat,
    ) -> Result<(f64, Vec<Mat>), ModelError> {
        let (loss, _, grads) = self.forward_loss(window, targets, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    fn forward_loss(
        &self,
        window: &ObservationWindow,
        targets: &Mat,
        backward: bool,
    ) -> Result<(f64, Mat, Option<Vec<Mat>>), ModelError> {
        let features = self.normalized_features(window);
        let mut tape = Tape::new();
        let pids = self.leaves(&mut tape);
        let latents = self.encode_nodes(&mut tape, &pids, &features, &window.mask)?;
        let dec_in = teacher_inputs(targets, self.cfg.t_pred);
        let raw = self.decode_nodes(&mut tape, &pids, latents, &window.mask, &dec_in)?;
        let loss_node = tape.gaussian_nll(raw, targets.clone());
        let loss = tape.value(loss_node)[(0, 0)];
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        let grads = if backward {
            let all = tape.backward(loss_node);
            Some(
                pids.ids
                    .iter()
                    .map(|id| all[id.index()].clone())
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        Ok((loss, tape.value(raw).clone(), grads))
    }

    fn check_input(&self, features: &Mat, valid: &[bool]) -> Result<(), ModelError> {
        let ok = features.ncols() == self.cfg.input_dim
            && features.nrows() >= 1
            && features.nrows() <= self.cfg.t_max
            && valid.len() == features.nrows();
        if !ok {
            return Err(ModelError::BadShape {
                got_rows: features.nrows(),
                got_cols: features.ncols(),
                want_cols: self.cfg.input_dim,
                max_rows: self.cfg.t_max,
            });
        }
        Ok(())
    }

    fn leaves(&self, tape: &mut Tape) -> ParamLeaves {
        let ids = self
            .params
            .mats()
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect();
        ParamLeaves { ids }
    }

    fn node(&self, pids: &ParamLeaves, name: &str) -> NodeId {
        pids.ids[self.params.position(name)]
    }

    fn encode_nodes(
        &self,
        tape: &mut Tape,
        pids: &ParamLeaves,
        features: &Mat,
        valid: &[bool],
    ) -> Result<NodeId, ModelError> {
        let x = tape.leaf(features.clone());
        let w = self.node(pids, "enc.embed.w");
        let b = self.node(pids, "enc.embed.b");
        let emb = tape.matmul(x, w);
        let emb = tape.add_bias(emb, b);
        // Positions counted backwards from the current time step, so the
        // same valid suffix embeds identically for any pad length.
        let t = features.nrows();
        let pe = tape.leaf(positional_encoding(
            (0..t).map(|r| t - 1 - r),
            self.cfg.d_model,
        ));
        let mut h = tape.add(emb, pe);
        self.ensure_finite(tape, h, "enc.embed")?;

        let mask = Mask::Keys(valid.to_vec());
        for l in 0..self.cfg.n_layers_enc {
            let a = self.attention(tape, pids, h, h, mask.clone(), &format!("enc.{l}.attn"))?;
            let r = tape.add(h, a);
            h = self.layer_norm(tape, pids, r, &format!("enc.{l}.ln1"));
            let f = self.feed_forward(tape, pids, h, &format!("enc.{l}.ff"));
            let r = tape.add(h, f);
            h = self.layer_norm(tape, pids, r, &format!("enc.{l}.ln2"));
            self.ensure_finite(tape, h, &format!("enc.{l}"))?;
        }
        Ok(h)
    }

    fn decode_nodes(
        &self,
        tape: &mut Tape,
        pids: &ParamLeaves,
        latents: NodeId,
        enc_valid: &[bool],
        dec_in: &Mat,
    ) -> Result<NodeId, ModelError> {
        let x = tape.leaf(dec_in.clone());
        let w = self.node(pids, "dec.embed.w");
        let b = self.node(pids, "dec.embed.b");
        let emb = tape.matmul(x, w);
        let emb = tape.add_bias(emb, b);
        let k = dec_in.nrows();
        let pe = tape.leaf(positional_encoding(0..k, self.cfg.d_model));
        let mut h = tape.add(emb, pe);
        self.ensure_finite(tape, h, "dec.embed")?;

        let enc_mask = Mask::Keys(enc_valid.to_vec());
        for l in 0..self.cfg.n_layers_dec {
            let sa = self.attention(tape, pids, h, h, Mask::Causal, &format!("dec.{l}.self"))?;
            let r = tape.add(h, sa);
            h = self.layer_norm(tape, pids, r, &format!("dec.{l}.ln1"));
            let ca = self.attention(
                tape,
                pids,
                h,
                latents,
                enc_mask.clone(),
                &format!("dec.{l}.cross"),
            )?;
            let r = tape.add(h, ca);
            h = self.layer_norm(tape, pids, r, &format!("dec.{l}.ln2"));
            let f = self.feed_forward(tape, pids, h, &format!("dec.{l}.ff"));
            let r = tape.add(h, f);
            h = self.layer_norm(tape, pids, r, &format!("dec.{l}.ln3"));
            self.ensure_finite(tape, h, &format!("dec.{l}"))?;
        }
        let w = self.node(pids, "head.w");
        let b = self.node(pids, "head.b");
        let out = tape.matmul(h, w);
        let out = tape.add_bias(out, b);
        self.ensure_finite(tape, out, "head")?;
        Ok(out)
    }

    /// Multi-head scaled dot-product attention with a key-side mask.
    /// The key projection carries no bias: softmax scores are invariant to
    /// a constant shift per query row, so it would be a dead parameter.
    fn attention(
        &self,
        tape: &mut Tape,
        pids: &ParamLeaves,
        x_q: NodeId,
        x_kv: NodeId,
        mask: Mask,
        prefix: &str,
    ) -> Result<NodeId, ModelError> {
        let q = self.projection(tape, pids, x_q, prefix, "q");
        let wk = self.node(pids, &format!("{prefix}.wk"));
        let k = tape.matmul(x_kv, wk);
        let v = self.projection(tape, pids, x_kv, prefix, "v");
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, mask.clone())?;
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let wo = self.node(pids, &format!("{prefix}.wo"));
        let bo = self.node(pids, &format!("{prefix}.bo"));
        let out = tape.matmul(ctx, wo);
        Ok(tape.add_bias(out, bo))
    }

    fn projection(
        &self,
        tape: &mut Tape,
        pids: &ParamLeaves,
        x: NodeId,
        prefix: &str,
        which: &str,
    ) -> NodeId {
        let w = self.node(pids, &format!("{prefix}.w{which}"));
        let b = self.node(pids, &format!("{prefix}.b{which}"));
        let p = tape.matmul(x, w);
        tape.add_bias(p, b)
    }

    fn layer_norm(&self, tape: &mut Tape, pids: &ParamLeaves, x: NodeId, prefix: &str) -> NodeId {
        let g = self.node(pids, &format!("{prefix}.g"));
        let b = self.node(pids, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b)
    }

    fn feed_forward(&self, tape: &mut Tape, pids: &ParamLeaves, x: NodeId, prefix: &str) -> NodeId {
        let w1 = self.node(pids, &format!("{prefix}.w1"));
        let b1 = self.node(pids, &format!("{prefix}.b1"));
        let w2 = self.node(pids, &format!("{prefix}.w2"));
        let b2 = self.node(pids, &format!("{prefix}.b2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, w2);
        tape.add_bias(h, b2)
    }

    fn ensure_finite(&self, tape: &Tape, node: NodeId, stage: &str) -> Result<(), ModelError> {
        if tape.value(node).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::NonFinite {
                stage: stage.to_string(),
            })
        }
    }
}

struct ParamLeaves {
    ids: Vec<NodeId>,
}

/// Decoder inputs under teacher forcing: a zero start token followed by the
/// first `t_pred - 1` ground-truth displacements.
fn teacher_inputs(targets: &Mat, t_pred: usize) -> Mat {
    let mut dec_in = Mat::zeros(t_pred, 2);
    for k in 1..t_pred {
        dec_in[(k, 0)] = targets[(k - 1, 0)];
        dec_in[(k, 1)] = targets[(k - 1, 1)];
    }
    dec_in
}

/// Fixed sinusoidal positional encoding for the given position of each row.
fn positional_encoding(positions: impl Iterator<Item = usize>, d_model: usize) -> Mat {
    let positions: Vec<usize> = positions.collect();
    let mut pe = Mat::zeros(positions.len(), d_model);
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[(r, 2 * i)] = (pos as f64 * freq).sin();
            pe[(r, 2 * i + 1)] = (pos as f64 * freq).cos();
        }
    }
    pe
}

fn insert_attention(p: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for which in ["q", "k", "v", "o"] {
        p.insert(&format!("{prefix}.w{which}"), xavier(rng, d, d));
        if which != "k" {
            p.insert(&format!("{prefix}.b{which}"), Mat::zeros(1, d));
        }
    }
}

fn insert_layer_norm(p: &mut ParameterStore, prefix: &str, d: usize) {
    p.insert(&format!("{prefix}.g"), Mat::from_element(1, d, 1.0));
    p.insert(&format!("{prefix}.b"), Mat::zeros(1, d));
}

fn insert_feed_forward(
    p: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    d_ff: usize,
) {
    p.insert(&format!("{prefix}.w1"), xavier(rng, d, d_ff));
    p.insert(&format!("{prefix}.b1"), Mat::zeros(1, d_ff));
    p.insert(&format!("{prefix}.w2"), xavier(rng, d_ff, d));
    p.insert(&format!("{prefix}.b2"), Mat::zeros(1, d));
}

/// Adam optimizer state (first/second moments and step counter).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Standard Adam update with bias correction; deterministic given state.
pub fn adam_step(params: &mut ParameterStore, grads: &[Mat], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, mat) in params.mats_mut().iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((p, gv), (mv, vv)) in mat
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk model format: JSON of config, normalization constants, and named
/// tensors.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &PovlModel) -> Self {
        let params = model
            .params
            .names()
            .iter()
            .zip(model.params.mats())
            .map(|(name, mat)| NamedTensor {
                name: name.clone(),
                rows: mat.nrows(),
                cols: mat.ncols(),
                data: mat.iter().copied().collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.cfg,
            norm: model.norm.clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<PovlModel, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::BadVersion(self.version));
        }
        self.config.validate()?;
        let mut store = ParameterStore::new();
        for t in &self.params {
            let mat = Mat::from_iterator(t.rows, t.cols, t.data.iter().copied());
            store.insert(&t.name, mat);
        }
        Ok(PovlModel {
            cfg: self.config,
            params: store,
            norm: self.norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            t_pred: 4,
            ..ModelConfig::default()
        }
    }

    fn random_window(rng: &mut ChaCha8Rng, t_obs: usize) -> ObservationWindow {
        let mut features = vec![[0.0; NUM_FEATURES]; T_MAX];
        let mut mask = vec![false; T_MAX];
        for row in features.iter_mut().skip(T_MAX - t_obs) {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        for m in mask.iter_mut().skip(T_MAX - t_obs) {
            *m = true;
        }
        ObservationWindow {
            features,
            mask,
            t_obs,
        }
    }

    #[test]
    fn encode_output_shape() {
        let model = PovlModel::init(ModelConfig::default(), FeatureNorm::identity(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let window = random_window(&mut rng, 15);
        let latents = model.encode_window(&window).unwrap();
        assert_eq!(latents.shape(), (15, 64));
    }

    #[test]
    fn latents_at_valid_positions_ignore_padding() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_obs = 5;
        let window = random_window(&mut rng, t_obs);
        let normed = model.normalized_features(&window);

        // Variant A: garbage in the padded rows instead of zeros.
        let mut garbage = normed.clone();
        for i in 0..T_MAX - t_obs {
            for j in 0..NUM_FEATURES {
                garbage[(i, j)] = rng.gen_range(-10.0..10.0);
            }
        }
        // Variant B: the valid suffix alone, with no padding at all.
        let truncated = normed.rows(T_MAX - t_obs, t_obs).into_owned();

        let base = model.encode_raw(&normed, &window.mask).unwrap();
        let noisy = model.encode_raw(&garbage, &window.mask).unwrap();
        let short = model.encode_raw(&truncated, &vec![true; t_obs]).unwrap();

        for k in 0..t_obs {
            let full_row = base.row(T_MAX - t_obs + k);
            let noisy_row = noisy.row(T_MAX - t_obs + k);
            let short_row = short.row(k);
            for j in 0..model.cfg.d_model {
                assert!((full_row[j] - noisy_row[j]).abs() < 1e-9, "pad contents leaked");
                assert!((full_row[j] - short_row[j]).abs() < 1e-9, "pad length leaked");
            }
        }
    }

    #[test]
    fn zero_weights_ignore_input_features() {
        let mut model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 5).unwrap();
        let zero_names: Vec<String> = model
            .params
            .names()
            .iter()
            .filter(|n| n.ends_with(".w") || n.contains(".w"))
            .cloned()
            .collect();
        for name in zero_names {
            let idx = model.params.position(&name);
            model.params.mats_mut()[idx].fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = model.encode_window(&random_window(&mut rng, 7)).unwrap();
        let b = model.encode_window(&random_window(&mut rng, 7)).unwrap();
        assert_eq!(a, b, "with zero weights only positions should matter");
    }

    #[test]
    fn decode_shape_and_parameter_ranges() {
        let model = PovlModel::init(ModelConfig::default(), FeatureNorm::identity(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let window = random_window(&mut rng, 2);
        let pred = model.predict(&window).unwrap();
        assert_eq!(pred.steps.len(), 25);
        for s in &pred.steps {
            assert!(s.sigma_s > 0.0 && s.sigma_d > 0.0);
            assert!(s.rho.abs() < 1.0);
        }
    }

    #[test]
    fn activation_ranges_over_random_raw_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let s = gaussian_step_from_raw(&raw);
            assert!(s.sigma_s > 0.0 && s.sigma_d > 0.0);
            assert!(s.rho > -1.0 && s.rho < 1.0);
        }
    }

    #[test]
    fn autoregressive_decode_is_prefix_stable() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let window = random_window(&mut rng, 6);
        let pred = model.predict(&window).unwrap();

        // Re-run the decoder on the full mean-fed input; each row must match
        // the step that was emitted when that row was last.
        let mut dec_in = Mat::zeros(model.cfg.t_pred, 2);
        for k in 1..model.cfg.t_pred {
            dec_in[(k, 0)] = pred.steps[k - 1].mu_s;
            dec_in[(k, 1)] = pred.steps[k - 1].mu_d;
        }
        let features = model.normalized_features(&window);
        let mut tape = Tape::new();
        let pids = model.leaves(&mut tape);
        let latents = model
            .encode_nodes(&mut tape, &pids, &features, &window.mask)
            .unwrap();
        let raw = model
            .decode_nodes(&mut tape, &pids, latents, &window.mask, &dec_in)
            .unwrap();
        let out = tape.value(raw);
        for (k, step) in pred.steps.iter().enumerate() {
            let row = out.row(k);
            let again = gaussian_step_from_raw(&[row[0], row[1], row[2], row[3], row[4]]);
            assert!((again.mu_s - step.mu_s).abs() < 1e-12);
            assert!((again.mu_d - step.mu_d).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let window = random_window(&mut rng, 5);
        let targets = Mat::from_fn(model.cfg.t_pred, 2, |_, _| rng.gen_range(-0.5..0.5));
        let (_, grads) = model.loss_grads(&window, &targets).unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        for pi in 0..model.params.len() {
            let mat = &model.params.mats()[pi];
            // Sample a few entries per parameter to keep the test fast; the
            // acceptance suite sweeps every scalar.
            let take = mat.len().min(3);
            for e in 0..take {
                let r = e % mat.nrows();
                let c = (e * 7 + 1) % mat.ncols();
                let mut plus = model.clone();
                plus.params.mats_mut()[pi][(r, c)] += h;
                let mut minus = model.clone();
                minus.params.mats_mut()[pi][(r, c)] -= h;
                let fd = (plus.loss(&window, &targets).unwrap()
                    - minus.loss(&window, &targets).unwrap())
                    / (2.0 * h);
                let ad = grads[pi][(r, c)];
                let denom = ad.abs().max(fd.abs()).max(1e-6);
                // 1e-8 absolute floor: central differences cannot resolve
                // gradients below their own roundoff.
                assert!(
                    (ad - fd).abs() < 1e-8 || (ad - fd).abs() / denom < 1e-4,
                    "param {} ({r},{c}): ad={ad:.6e} fd={fd:.6e}",
                    model.params.names()[pi]
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn masked_input_rows_get_zero_gradient() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let window = random_window(&mut rng, 4);
        let targets = Mat::from_fn(model.cfg.t_pred, 2, |_, _| rng.gen_range(-0.5..0.5));

        let features = model.normalized_features(&window);
        let mut tape = Tape::new();
        let pids = model.leaves(&mut tape);
        // The input leaf is pushed first inside encode_nodes; reproduce that
        // here to grab its id.
        let x = tape.leaf(features.clone());
        let w = model.node(&pids, "enc.embed.w");
        let b = model.node(&pids, "enc.embed.b");
        let emb = tape.matmul(x, w);
        let emb = tape.add_bias(emb, b);
        let t = features.nrows();
        let pe = tape.leaf(positional_encoding((0..t).map(|r| t - 1 - r), model.cfg.d_model));
        let mut hnode = tape.add(emb, pe);
        let mask = Mask::Keys(window.mask.clone());
        for l in 0..model.cfg.n_layers_enc {
            let a = model
                .attention(&mut tape, &pids, hnode, hnode, mask.clone(), &format!("enc.{l}.attn"))
                .unwrap();
            let r = tape.add(hnode, a);
            hnode = model.layer_norm(&mut tape, &pids, r, &format!("enc.{l}.ln1"));
            let f = model.feed_forward(&mut tape, &pids, hnode, &format!("enc.{l}.ff"));
            let r = tape.add(hnode, f);
            hnode = model.layer_norm(&mut tape, &pids, r, &format!("enc.{l}.ln2"));
        }
        let dec_in = teacher_inputs(&targets, model.cfg.t_pred);
        let raw = model
            .decode_nodes(&mut tape, &pids, hnode, &window.mask, &dec_in)
            .unwrap();
        let loss = tape.gaussian_nll(raw, targets);
        let grads = tape.backward(loss);
        let dx = &grads[x.index()];
        for i in 0..T_MAX - window.t_obs {
            for j in 0..NUM_FEATURES {
                assert_eq!(dx[(i, j)], 0.0, "padded row {i} received gradient");
            }
        }
        // Valid rows do receive gradient.
        let valid_grad: f64 = (T_MAX - window.t_obs..T_MAX)
            .map(|i| dx.row(i).amax())
            .sum();
        assert!(valid_grad > 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 16).unwrap();
        let mut params = model.params.clone();
        let before = params.mats().to_vec();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-2);
        assert_eq!(params.mats(), before.as_slice());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = ParameterStore::new();
        params.insert("w", Mat::from_row_slice(1, 3, &[1.0, -2.0, 0.5]));
        let grads = vec![Mat::from_row_slice(1, 3, &[0.3, -0.7, 0.0])];
        let mut state = AdamState::new(&params);
        let lr = 1e-3;
        adam_step(&mut params, &grads, &mut state, lr);
        let w = params.get("w");
        // First-step bias correction makes the update -lr * sign(g) up to
        // the epsilon regularizer.
        assert!((w[(0, 0)] - (1.0 - lr)).abs() < 1e-6);
        assert!((w[(0, 1)] - (-2.0 + lr)).abs() < 1e-6);
        assert_eq!(w[(0, 2)], 0.5);
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        // f(x) = 0.5 * sum(a_i * x_i^2), gradient a_i * x_i.
        let a = [4.0, 1.0, 0.25, 9.0];
        let mut params = ParameterStore::new();
        params.insert("x", Mat::from_row_slice(1, 4, &[1.0, -2.0, 3.0, -0.5]));
        let mut state = AdamState::new(&params);
        for _ in 0..200 {
            let x = params.get("x").clone();
            let grad = Mat::from_fn(1, 4, |_, j| a[j] * x[(0, j)]);
            adam_step(&mut params, &vec![grad], &mut state, 0.05);
        }
        let x = params.get("x");
        let grad_norm: f64 = (0..4).map(|j| (a[j] * x[(0, j)]).powi(2)).sum::<f64>().sqrt();
        assert!(grad_norm < 1e-3, "gradient norm {grad_norm}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_model(&model).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.norm, model.norm);
        assert_eq!(loaded.params.mats(), model.params.mats());

        let mut bad = Checkpoint::from_model(&model);
        bad.version = 99;
        assert!(matches!(bad.into_model(), Err(ModelError::BadVersion(99))));
    }

    #[test]
    fn teacher_forced_loss_matches_pure_nll() {
        let model = PovlModel::init(small_cfg(), FeatureNorm::identity(), 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let window = random_window(&mut rng, 8);
        let targets = Mat::from_fn(model.cfg.t_pred, 2, |_, _| rng.gen_range(-0.5..0.5));
        let loss = model.loss(&window, &targets).unwrap();

        let raw = model.teacher_forced_raw(&window, &targets).unwrap();
        let steps: Vec<GaussianStep> = (0..raw.nrows())
            .map(|k| {
                let r = raw.row(k);
                gaussian_step_from_raw(&[r[0], r[1], r[2], r[3], r[4]])
            })
            .collect();
        let truth: Vec<(f64, f64)> = (0..targets.nrows())
            .map(|k| (targets[(k, 0)], targets[(k, 1)]))
            .collect();
        let pure = nll_loss(&GaussianTrajectory { steps }, &truth).unwrap();
        assert!((loss - pure).abs() < 1e-12);
    }
}
