//! The vector-quantized conditional trajectory model and its two training
//! phases.
//!
//! Phase 1 (unsupervised): each step samples a demonstration, encodes a
//! random context into a latent `z_e`, snaps it to the nearest codebook
//! vector `z_q`, and decodes Gaussian predictions at random target times.
//! The loss is the negative log likelihood plus the two vector-quantization
//! terms; the decoder gradient reaches the encoder through the
//! straight-through copy.
//!
//! Phase 2 (self-supervised fine-tuning): a fresh model is trained the same
//! way, except the codebook index per demonstration is frozen to the
//! assignment discovered in phase 1 instead of being chosen by nearest
//! neighbor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{fmt_f64, sample_context, Dataset, Demonstration, NormStats, TrajectoryPoint};
use crate::nn_core::{
    adam_step, clip_global_norm, gaussian_nll, mlp_backward_acc, mlp_forward, softplus_grad,
    softplus_positive, AdamHyper, AdamState, Activation, ForwardCache, GaussianPrediction,
    MlpGrads, MlpParams,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Codebook vectors start uniform in this range, near the encoder's initial
/// output scale so early assignments are data-driven.
const CODEBOOK_INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("context must be non-empty")]
    EmptyContext,
    #[error("codebook must hold at least one vector")]
    EmptyCodebook,
    #[error("target time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("dataset must be normalized before training or assignment")]
    NotNormalized,
    #[error("demo {0:?} missing from the frozen assignment")]
    MissingAssignment(String),
    #[error("assignment for demo {id:?} is {index}, outside codebook of size {k}")]
    AssignmentOutOfRange { id: String, index: usize, k: usize },
    #[error(
        "non-finite loss at step {step} (k={k}, nll={nll}, codebook={codebook}, commitment={commitment})"
    )]
    NonFiniteLoss { step: usize, k: usize, nll: f64, codebook: f64, commitment: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint shape error: {0}")]
    Shape(String),
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// The learned skill space: `k` latent vectors of dimension `d_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillCodebook {
    vectors: Vec<f64>,
    k: usize,
    d_z: usize,
}

impl SkillCodebook {
    pub fn init(k: usize, d_z: usize, rng: &mut ChaCha8Rng) -> SkillCodebook {
        assert!(k >= 1, "codebook needs at least one vector");
        let vectors =
            (0..k * d_z).map(|_| rng.gen_range(-CODEBOOK_INIT_RANGE..CODEBOOK_INIT_RANGE)).collect();
        SkillCodebook { vectors, k, d_z }
    }

    pub fn from_vectors(rows: Vec<Vec<f64>>) -> Result<SkillCodebook, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyCodebook);
        }
        let d_z = rows[0].len();
        if rows.iter().any(|r| r.len() != d_z) {
            return Err(ModelError::Shape("codebook rows have mixed dimensions".into()));
        }
        let k = rows.len();
        Ok(SkillCodebook { vectors: rows.into_iter().flatten().collect(), k, d_z })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.d_z
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.d_z..(index + 1) * self.d_z]
    }

    pub fn vector_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.vectors[index * self.d_z..(index + 1) * self.d_z]
    }

    pub(crate) fn flat(&self) -> &[f64] {
        &self.vectors
    }

    pub(crate) fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }
}

/// Encoder, decoder, codebook, and the normalization stats they were trained
/// in.
#[derive(Debug, Clone, PartialEq)]
pub struct VqCnmpModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub codebook: SkillCodebook,
    /// Sensorimotor dimension.
    pub d: usize,
    /// Latent dimension.
    pub d_z: usize,
    pub norm_stats: NormStats,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Unsupervised,
    SelfSupervised,
}

/// Knobs of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Codebook size.
    pub k: usize,
    /// Commitment weight; values near 1 make the gradients explode.
    pub beta: f64,
    pub iterations: usize,
    /// Upper bound on context size per step.
    pub n_max: usize,
    /// Upper bound on target count per step.
    pub m_max: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub mode: TrainingMode,
    /// Latent dimension.
    pub d_z: usize,
    /// Hidden layer widths shared by encoder and decoder.
    pub hidden: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            k: 5,
            beta: 0.25,
            iterations: 30_000,
            n_max: 20,
            m_max: 10,
            lr: 1e-4,
            clip_norm: 1.0,
            seed: 0,
            mode: TrainingMode::Unsupervised,
            d_z: 16,
            hidden: vec![128, 128],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 1 {
            return Err(ModelError::EmptyCodebook);
        }
        if !(self.beta > 0.0) {
            return Err(ModelError::Shape("beta must be positive".into()));
        }
        Ok(())
    }
}

/// The three loss terms of one training step, logged per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Reconstruction negative log likelihood, averaged over targets.
    pub nll: f64,
    /// Squared distance pulling the chosen vector toward the (stopped)
    /// encoder output.
    pub codebook_term: f64,
    /// Squared distance pulling the encoder output toward the (stopped)
    /// chosen vector; weighted by beta in the total.
    pub commitment_term: f64,
    pub total: f64,
    pub chosen_index: usize,
}

/// Demonstration id -> codebook index.
pub type Assignment = BTreeMap<String, usize>;

// ---------------------------------------------------------------------------
// Inference operations
// ---------------------------------------------------------------------------

/// Initialize a fresh model for a `d`-channel dataset using the architecture
/// in `cfg`. Consumes draws from `rng` in a fixed order.
pub fn init_model(
    d: usize,
    norm_stats: NormStats,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> VqCnmpModel {
    let mut enc_dims = vec![d + 1];
    enc_dims.extend_from_slice(&cfg.hidden);
    enc_dims.push(cfg.d_z);
    let mut dec_dims = vec![cfg.d_z + 1];
    dec_dims.extend_from_slice(&cfg.hidden);
    dec_dims.push(2 * d);
    let encoder = MlpParams::init(&enc_dims, rng);
    let decoder = MlpParams::init(&dec_dims, rng);
    let codebook = SkillCodebook::init(cfg.k, cfg.d_z, rng);
    VqCnmpModel { encoder, decoder, codebook, d, d_z: cfg.d_z, norm_stats, version: CHECKPOINT_VERSION }
}

fn encode_point(model: &VqCnmpModel, p: &TrajectoryPoint) -> (Vec<f64>, ForwardCache) {
    let mut input = Vec::with_capacity(model.d + 1);
    input.push(p.t);
    input.extend_from_slice(&p.sm);
    mlp_forward(&model.encoder, &input)
}

/// Encode a context into its latent mean. Points are pre-sorted on `t` so
/// the summation order, and therefore the result, is independent of the
/// caller's ordering.
pub fn encode(model: &VqCnmpModel, context: &[TrajectoryPoint]) -> Result<Vec<f64>, ModelError> {
    let (z_e, _) = encode_with_caches(model, context)?;
    Ok(z_e)
}

pub(crate) fn encode_with_caches(
    model: &VqCnmpModel,
    context: &[TrajectoryPoint],
) -> Result<(Vec<f64>, Vec<ForwardCache>), ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let mut sorted: Vec<&TrajectoryPoint> = context.iter().collect();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));

    let n = sorted.len() as f64;
    let mut z_e = vec![0.0; model.d_z];
    let mut caches = Vec::with_capacity(sorted.len());
    for p in sorted {
        let (z_i, cache) = encode_point(model, p);
        for (acc, v) in z_e.iter_mut().zip(&z_i) {
            *acc += v;
        }
        caches.push(cache);
    }
    for v in &mut z_e {
        *v /= n;
    }
    Ok((z_e, caches))
}

/// Nearest codebook vector by Euclidean distance; ties resolve to the lowest
/// index. Returns the index and a copy of the vector.
pub fn quantize(cb: &SkillCodebook, z_e: &[f64]) -> (usize, Vec<f64>) {
    assert_eq!(z_e.len(), cb.dim(), "latent length mismatch");
    assert!(!cb.is_empty(), "empty codebook");
    let mut best = 0usize;
    let mut best_sq = f64::INFINITY;
    for m in 0..cb.len() {
        let v = cb.vector(m);
        let mut sq = 0.0;
        for (a, b) in z_e.iter().zip(v) {
            let r = a - b;
            sq += r * r;
        }
        if sq < best_sq {
            best_sq = sq;
            best = m;
        }
    }
    (best, cb.vector(best).to_vec())
}

/// Decode a latent vector at one target time into a Gaussian prediction in
/// normalized space.
pub fn decode(model: &VqCnmpModel, z: &[f64], t_target: f64) -> Result<GaussianPrediction, ModelError> {
    if !(0.0..=1.0).contains(&t_target) {
        return Err(ModelError::TimeOutOfRange(t_target));
    }
    let (out, _) = decode_raw(model, z, t_target);
    Ok(split_prediction(model.d, &out))
}

pub(crate) fn decode_raw(model: &VqCnmpModel, z: &[f64], t_target: f64) -> (Vec<f64>, ForwardCache) {
    assert_eq!(z.len(), model.d_z, "latent length mismatch");
    let mut input = Vec::with_capacity(model.d_z + 1);
    input.extend_from_slice(z);
    input.push(t_target);
    mlp_forward(&model.decoder, &input)
}

pub(crate) fn split_prediction(d: usize, out: &[f64]) -> GaussianPrediction {
    GaussianPrediction { mu: out[..d].to_vec(), sigma: softplus_positive(&out[d..]) }
}

/// Encode every demonstration with its full trajectory as context and record
/// the quantized index.
pub fn assign_all(model: &VqCnmpModel, ds: &Dataset) -> Result<Assignment, ModelError> {
    if !ds.is_normalized() {
        return Err(ModelError::NotNormalized);
    }
    let mut asg = Assignment::new();
    for demo in &ds.demos {
        let z_e = encode(model, &demo.points)?;
        let (k, _) = quantize(&model.codebook, &z_e);
        asg.insert(demo.id.clone(), k);
    }
    Ok(asg)
}

/// Pure loss evaluation for a fixed context/target split and a fixed
/// codebook choice; used by tests and diagnostics as an independent check on
/// the training step.
pub fn evaluate_loss(
    model: &VqCnmpModel,
    context: &[TrajectoryPoint],
    targets: &[TrajectoryPoint],
    k: usize,
    beta: f64,
) -> Result<LossBreakdown, ModelError> {
    let (z_e, _) = encode_with_caches(model, context)?;
    let z_q = model.codebook.vector(k);
    let mut nll_sum = 0.0;
    for tgt in targets {
        let (out, _) = decode_raw(model, z_q, tgt.t);
        let pred = split_prediction(model.d, &out);
        let (nll, _, _) = gaussian_nll(&pred, &tgt.sm);
        nll_sum += nll;
    }
    let nll = nll_sum / targets.len() as f64;
    let sq: f64 = z_e.iter().zip(z_q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(LossBreakdown {
        nll,
        codebook_term: sq,
        commitment_term: sq,
        total: nll + sq + beta * sq,
        chosen_index: k,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Owns a model mid-training plus optimizer state and the per-step gradient
/// buffers. Inference on a finished model goes through the free functions.
pub struct Trainer {
    model: VqCnmpModel,
    cfg: TrainingConfig,
    hyper: AdamHyper,
    opt: Vec<AdamState>,
    assignment: Option<Assignment>,
    enc_grads: MlpGrads,
    dec_grads: MlpGrads,
    cb_grads: Vec<f64>,
    steps_done: usize,
    /// How many times the nearest-neighbor selection ran; must stay zero in
    /// self-supervised mode.
    quantize_calls: u64,
}

impl Trainer {
    pub fn new(model: VqCnmpModel, cfg: TrainingConfig) -> Trainer {
        let mut opt = Vec::new();
        for l in &model.encoder.layers {
            opt.push(AdamState::new(l.weight.len()));
            opt.push(AdamState::new(l.bias.len()));
        }
        for l in &model.decoder.layers {
            opt.push(AdamState::new(l.weight.len()));
            opt.push(AdamState::new(l.bias.len()));
        }
        opt.push(AdamState::new(model.codebook.flat().len()));
        let enc_grads = MlpGrads::zeros_like(&model.encoder);
        let dec_grads = MlpGrads::zeros_like(&model.decoder);
        let cb_len = model.codebook.flat().len();
        let hyper = AdamHyper::with_lr(cfg.lr);
        Trainer {
            model,
            cfg,
            hyper,
            opt,
            assignment: None,
            enc_grads,
            dec_grads,
            cb_grads: vec![0.0; cb_len],
            steps_done: 0,
            quantize_calls: 0,
        }
    }

    pub fn with_assignment(mut self, asg: Assignment) -> Trainer {
        self.assignment = Some(asg);
        self
    }

    pub fn model(&self) -> &VqCnmpModel {
        &self.model
    }

    pub fn into_model(self) -> VqCnmpModel {
        self.model
    }

    pub fn quantize_calls(&self) -> u64 {
        self.quantize_calls
    }

    /// One optimization step on one demonstration: sample context/targets,
    /// encode, pick the codebook vector (nearest neighbor, or the frozen
    /// assignment in self-supervised mode), decode targets, and update
    /// encoder, decoder, and the chosen vector under the clipped gradient.
    pub fn step(
        &mut self,
        demo: &Demonstration,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown, ModelError> {
        let (context, targets) = sample_context(demo, rng, self.cfg.n_max, self.cfg.m_max);
        let (z_e, enc_caches) = encode_with_caches(&self.model, &context)?;

        let k = match self.cfg.mode {
            TrainingMode::SelfSupervised => {
                let asg = self
                    .assignment
                    .as_ref()
                    .ok_or_else(|| ModelError::MissingAssignment(demo.id.clone()))?;
                *asg.get(&demo.id).ok_or_else(|| ModelError::MissingAssignment(demo.id.clone()))?
            }
            TrainingMode::Unsupervised => {
                self.quantize_calls += 1;
                quantize(&self.model.codebook, &z_e).0
            }
        };
        if k >= self.model.codebook.len() {
            return Err(ModelError::AssignmentOutOfRange {
                id: demo.id.clone(),
                index: k,
                k: self.model.codebook.len(),
            });
        }
        let z_q = self.model.codebook.vector(k).to_vec();

        zero_grads(&mut self.enc_grads);
        zero_grads(&mut self.dec_grads);
        self.cb_grads.iter_mut().for_each(|g| *g = 0.0);

        // Decode every target with z_q; the NLL gradient w.r.t. z_q is
        // accumulated and later copied straight through onto z_e.
        let d = self.model.d;
        let m = targets.len() as f64;
        let mut nll_sum = 0.0;
        let mut d_zq = vec![0.0; self.model.d_z];
        let mut dy = vec![0.0; 2 * d];
        for tgt in &targets {
            let (out, cache) = decode_raw(&self.model, &z_q, tgt.t);
            let pred = split_prediction(d, &out);
            let (nll, dmu, dsigma) = gaussian_nll(&pred, &tgt.sm);
            nll_sum += nll;
            for j in 0..d {
                dy[j] = dmu[j] / m;
                dy[d + j] = dsigma[j] * softplus_grad(out[d + j]) / m;
            }
            let dx = mlp_backward_acc(&self.model.decoder, &cache, &dy, &mut self.dec_grads);
            for (acc, v) in d_zq.iter_mut().zip(&dx) {
                *acc += v;
            }
        }
        let nll = nll_sum / m;

        let diff: Vec<f64> = z_e.iter().zip(&z_q).map(|(a, b)| a - b).collect();
        let sq: f64 = diff.iter().map(|r| r * r).sum();
        let breakdown = LossBreakdown {
            nll,
            codebook_term: sq,
            commitment_term: sq,
            total: nll + sq + self.cfg.beta * sq,
            chosen_index: k,
        };

        // Straight-through copy plus the commitment pull on the encoder.
        let n = context.len() as f64;
        let mut dz_e = d_zq;
        for (g, r) in dz_e.iter_mut().zip(&diff) {
            *g += 2.0 * self.cfg.beta * r;
        }
        let per_point: Vec<f64> = dz_e.iter().map(|g| g / n).collect();
        for cache in &enc_caches {
            mlp_backward_acc(&self.model.encoder, cache, &per_point, &mut self.enc_grads);
        }

        // Codebook term moves only the chosen vector.
        let d_z = self.model.d_z;
        for (g, r) in self.cb_grads[k * d_z..(k + 1) * d_z].iter_mut().zip(&diff) {
            *g = -2.0 * r;
        }

        let mut tensors: Vec<&mut [f64]> = Vec::with_capacity(self.opt.len());
        for lg in self.enc_grads.layers.iter_mut().chain(self.dec_grads.layers.iter_mut()) {
            tensors.push(&mut lg.weight);
            tensors.push(&mut lg.bias);
        }
        tensors.push(&mut self.cb_grads);
        let norm = clip_global_norm(&mut tensors, self.cfg.clip_norm);

        if !breakdown.total.is_finite() || !norm.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: self.steps_done,
                k,
                nll: breakdown.nll,
                codebook: breakdown.codebook_term,
                commitment: breakdown.commitment_term,
            });
        }

        self.apply_adam();
        self.steps_done += 1;
        Ok(breakdown)
    }

    fn apply_adam(&mut self) {
        let mut si = 0;
        for (l, g) in self.model.encoder.layers.iter_mut().zip(&self.enc_grads.layers) {
            adam_step(&mut l.weight, &g.weight, &mut self.opt[si], &self.hyper);
            adam_step(&mut l.bias, &g.bias, &mut self.opt[si + 1], &self.hyper);
            si += 2;
        }
        for (l, g) in self.model.decoder.layers.iter_mut().zip(&self.dec_grads.layers) {
            adam_step(&mut l.weight, &g.weight, &mut self.opt[si], &self.hyper);
            adam_step(&mut l.bias, &g.bias, &mut self.opt[si + 1], &self.hyper);
            si += 2;
        }
        adam_step(&mut self.model.codebook.flat_mut(), &self.cb_grads, &mut self.opt[si], &self.hyper);
    }
}

fn zero_grads(g: &mut MlpGrads) {
    for l in &mut g.layers {
        l.weight.iter_mut().for_each(|v| *v = 0.0);
        l.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Unsupervised skill discovery: train a freshly initialized model for
/// `cfg.iterations` steps, each on a uniformly sampled demonstration.
/// Deterministic given `cfg.seed`.
pub fn train(
    ds: &Dataset,
    cfg: &TrainingConfig,
) -> Result<(VqCnmpModel, Vec<LossBreakdown>), ModelError> {
    run_training(ds, cfg, None)
}

/// Self-supervised fine-tuning: identical to [`train`] except each step uses
/// the frozen assignment instead of nearest-neighbor selection.
pub fn finetune(
    ds: &Dataset,
    asg: &Assignment,
    cfg: &TrainingConfig,
) -> Result<(VqCnmpModel, Vec<LossBreakdown>), ModelError> {
    for demo in &ds.demos {
        match asg.get(&demo.id) {
            None => return Err(ModelError::MissingAssignment(demo.id.clone())),
            Some(&index) if index >= cfg.k => {
                return Err(ModelError::AssignmentOutOfRange {
                    id: demo.id.clone(),
                    index,
                    k: cfg.k,
                })
            }
            _ => {}
        }
    }
    let mut cfg = cfg.clone();
    cfg.mode = TrainingMode::SelfSupervised;
    run_training(ds, &cfg, Some(asg.clone()))
}

fn run_training(
    ds: &Dataset,
    cfg: &TrainingConfig,
    asg: Option<Assignment>,
) -> Result<(VqCnmpModel, Vec<LossBreakdown>), ModelError> {
    let stats = ds.norm_stats.clone().ok_or(ModelError::NotNormalized)?;
    assert!(!ds.demos.is_empty(), "cannot train on an empty dataset");
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = init_model(ds.d, stats, cfg, &mut rng);
    let mut trainer = Trainer::new(model, cfg.clone());
    if let Some(asg) = asg {
        trainer = trainer.with_assignment(asg);
    }

    let mut history = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let idx = rng.gen_range(0..ds.demos.len());
        let lb = trainer.step(&ds.demos[idx], &mut rng).map_err(|e| match e {
            ModelError::NonFiniteLoss { k, nll, codebook, commitment, .. } => {
                ModelError::NonFiniteLoss { step, k, nll, codebook, commitment }
            }
            other => other,
        })?;
        history.push(lb);
    }
    if cfg.mode == TrainingMode::SelfSupervised {
        debug_assert_eq!(trainer.quantize_calls(), 0);
    }
    Ok((trainer.into_model(), history))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerShape {
    rows: usize,
    cols: usize,
    activation: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    d: usize,
    d_z: usize,
    k: usize,
    encoder: Vec<LayerShape>,
    decoder: Vec<LayerShape>,
    norm_stats: NormStats,
}

fn shape_of(p: &MlpParams) -> Vec<LayerShape> {
    p.layers
        .iter()
        .map(|l| LayerShape {
            rows: l.rows,
            cols: l.cols,
            activation: match l.activation {
                Activation::Relu => "relu".into(),
                Activation::Identity => "identity".into(),
            },
        })
        .collect()
}

/// Write a versioned checkpoint: JSON header line, then one line per
/// parameter tensor in declared order (encoder, decoder, codebook), floats
/// at 17 significant digits.
pub fn save_model(model: &VqCnmpModel, path: &Path) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        version: model.version,
        d: model.d,
        d_z: model.d_z,
        k: model.codebook.len(),
        encoder: shape_of(&model.encoder),
        decoder: shape_of(&model.decoder),
        norm_stats: model.norm_stats.clone(),
    };
    let mut out = serde_json::to_string(&header)
        .map_err(|e| ModelError::Parse { line: 1, msg: e.to_string() })?;
    out.push('\n');
    for l in model.encoder.layers.iter().chain(&model.decoder.layers) {
        push_tensor_line(&mut out, &l.weight);
        push_tensor_line(&mut out, &l.bias);
    }
    push_tensor_line(&mut out, model.codebook.flat());
    fs::write(path, out)?;
    Ok(())
}

fn push_tensor_line(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

/// Restore a checkpoint written by [`save_model`]; refuses unknown versions
/// and mismatched shapes.
pub fn load_model(path: &Path) -> Result<VqCnmpModel, ModelError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_text =
        lines.next().ok_or(ModelError::Parse { line: 1, msg: "empty checkpoint".into() })?;
    let header: CheckpointHeader = serde_json::from_str(header_text)
        .map_err(|e| ModelError::Parse { line: 1, msg: e.to_string() })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(header.version));
    }

    let mut line_no = 1usize;
    let mut read_tensor = |expected: usize, lines: &mut std::str::Lines| -> Result<Vec<f64>, ModelError> {
        line_no += 1;
        let line = lines
            .next()
            .ok_or(ModelError::Shape(format!("missing tensor line {line_no}")))?;
        let mut values = Vec::with_capacity(expected);
        for tok in line.split_ascii_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| ModelError::Parse { line: line_no, msg: format!("bad float {tok:?}") })?;
            values.push(v);
        }
        if values.len() != expected {
            return Err(ModelError::Shape(format!(
                "tensor at line {line_no} has {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(values)
    };

    let mut load_mlp = |shapes: &[LayerShape], lines: &mut std::str::Lines| -> Result<MlpParams, ModelError> {
        let mut layers = Vec::with_capacity(shapes.len());
        for s in shapes {
            let activation = match s.activation.as_str() {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => {
                    return Err(ModelError::Shape(format!("unknown activation {other:?}")));
                }
            };
            let weight = read_tensor(s.rows * s.cols, lines)?;
            let bias = read_tensor(s.rows, lines)?;
            layers.push(crate::nn_core::DenseLayer {
                weight,
                bias,
                rows: s.rows,
                cols: s.cols,
                activation,
            });
        }
        Ok(MlpParams { layers })
    };

    let encoder = load_mlp(&header.encoder, &mut lines)?;
    let decoder = load_mlp(&header.decoder, &mut lines)?;
    let cb_flat = read_tensor(header.k * header.d_z, &mut lines)?;
    let codebook = SkillCodebook { vectors: cb_flat, k: header.k, d_z: header.d_z };

    let model = VqCnmpModel {
        encoder,
        decoder,
        codebook,
        d: header.d,
        d_z: header.d_z,
        norm_stats: header.norm_stats,
        version: header.version,
    };
    if model.encoder.output_dim() != model.d_z
        || model.decoder.input_dim() != model.d_z + 1
        || model.decoder.output_dim() != 2 * model.d
    {
        return Err(ModelError::Shape("header shapes are inconsistent".into()));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        generate_synthetic_dataset, normalize_dataset, DemoCount, KitchenConfig,
    };

    fn toy_dataset(seed: u64) -> Dataset {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(2), 0.002, seed);
        normalize_dataset(&generate_synthetic_dataset(&cfg).unwrap()).unwrap()
    }

    fn small_cfg() -> TrainingConfig {
        TrainingConfig {
            hidden: vec![32, 32],
            d_z: 8,
            iterations: 40,
            ..TrainingConfig::default()
        }
    }

    fn toy_model(seed: u64) -> (Dataset, VqCnmpModel, TrainingConfig) {
        let ds = toy_dataset(seed);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = init_model(ds.d, ds.norm_stats.clone().unwrap(), &cfg, &mut rng);
        (ds, model, cfg)
    }

    #[test]
    fn encode_of_single_point_is_the_point_encoding() {
        let (ds, model, _) = toy_model(1);
        let p = &ds.demos[0].points[10];
        let z = encode(&model, std::slice::from_ref(p)).unwrap();
        let (direct, _) = encode_point(&model, p);
        assert_eq!(z, direct);
    }

    #[test]
    fn encode_is_order_invariant() {
        let (ds, model, _) = toy_model(2);
        let pts = ds.demos[0].points[0..7].to_vec();
        let mut reversed = pts.clone();
        reversed.reverse();
        let a = encode(&model, &pts).unwrap();
        let b = encode(&model, &reversed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_matches_external_mean() {
        let (ds, model, _) = toy_model(3);
        let pts = ds.demos[0].points[40..43].to_vec();
        let z = encode(&model, &pts).unwrap();
        // Hand-average the per-point encodings in sorted order.
        let mut mean = vec![0.0; model.d_z];
        for p in &pts {
            let (zi, _) = encode_point(&model, p);
            for (m, v) in mean.iter_mut().zip(&zi) {
                *m += v / 3.0;
            }
        }
        for (a, b) in z.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_empty_context() {
        let (_, model, _) = toy_model(4);
        assert!(matches!(encode(&model, &[]), Err(ModelError::EmptyContext)));
    }

    #[test]
    fn quantize_exact_member_and_ties() {
        let cb = SkillCodebook::from_vectors(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-0.5, 0.25],
        ])
        .unwrap();
        let (k, z_q) = quantize(&cb, &[-0.5, 0.25]);
        assert_eq!(k, 2);
        assert_eq!(z_q, vec![-0.5, 0.25]);
        // Exactly between v0 and v1: lowest index wins.
        let (k, _) = quantize(&cb, &[0.5, 0.5]);
        assert_eq!(k, 0);
    }

    #[test]
    fn quantize_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_z = 16;
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..d_z).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cb = SkillCodebook::from_vectors(rows.clone()).unwrap();
        for _ in 0..200 {
            let z: Vec<f64> = (0..d_z).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (k, _) = quantize(&cb, &z);
            // Independent linear scan.
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (m, row) in rows.iter().enumerate() {
                let d: f64 = row.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = m;
                }
            }
            assert_eq!(k, best);
        }
    }

    #[test]
    fn empty_codebook_is_rejected() {
        assert!(matches!(SkillCodebook::from_vectors(vec![]), Err(ModelError::EmptyCodebook)));
    }

    #[test]
    fn decode_sigma_is_strictly_positive() {
        let (_, model, _) = toy_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..model.d_z).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(0.0..=1.0);
            let pred = decode(&model, &z, t).unwrap();
            assert!(pred.sigma.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn decode_rejects_time_outside_unit_interval() {
        let (_, model, _) = toy_model(7);
        let z = vec![0.0; model.d_z];
        assert!(matches!(decode(&model, &z, 1.5), Err(ModelError::TimeOutOfRange(_))));
        assert!(matches!(decode(&model, &z, -0.1), Err(ModelError::TimeOutOfRange(_))));
    }

    #[test]
    fn decode_is_deterministic_and_continuous_in_t() {
        let (_, model, _) = toy_model(8);
        let z: Vec<f64> = (0..model.d_z).map(|i| 0.05 * i as f64).collect();
        let grid: Vec<f64> = (0..150).map(|i| i as f64 / 149.0).collect();
        let a: Vec<_> = grid.iter().map(|&t| decode(&model, &z, t).unwrap()).collect();
        let b: Vec<_> = grid.iter().map(|&t| decode(&model, &z, t).unwrap()).collect();
        assert_eq!(a, b);
        // Lipschitz bound on mu from the product of layer Frobenius norms
        // (relu and the identity are 1-Lipschitz).
        let lip: f64 = model
            .decoder
            .layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>().sqrt())
            .product();
        let dt = 1.0 / 149.0;
        for w in a.windows(2) {
            let step: f64 = w[0]
                .mu
                .iter()
                .zip(&w[1].mu)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(w[1].mu.iter().all(|v| v.is_finite()));
            assert!(step <= lip * dt + 1e-9, "step {step} exceeds Lipschitz bound {}", lip * dt);
        }
    }

    #[test]
    fn loss_breakdown_reassembles_with_beta() {
        let (ds, model, cfg) = toy_model(9);
        let mut trainer = Trainer::new(model, cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..20 {
            let lb = trainer.step(&ds.demos[0], &mut rng).unwrap();
            let reassembled = lb.nll + lb.codebook_term + 0.25 * lb.commitment_term;
            assert!((lb.total - reassembled).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_latent_zeroes_vq_terms() {
        let (ds, mut model, cfg) = toy_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        // Peek at the context the next step will draw, then plant v_k on the
        // exact encoder output for that context.
        let mut peek = rng.clone();
        let (context, _) =
            sample_context(&ds.demos[0], &mut peek, cfg.n_max, cfg.m_max);
        let z_e = encode(&model, &context).unwrap();
        let k = quantize(&model.codebook, &z_e).0;
        model.codebook.vector_mut(k).copy_from_slice(&z_e);
        let mut trainer = Trainer::new(model, cfg);
        let lb = trainer.step(&ds.demos[0], &mut rng).unwrap();
        assert_eq!(lb.chosen_index, k);
        assert!(lb.codebook_term.abs() < 1e-18);
        assert!(lb.commitment_term.abs() < 1e-18);
    }

    #[test]
    fn one_step_on_a_single_point_decreases_its_loss() {
        // A one-point demonstration makes context and target deterministic,
        // so the loss can be re-evaluated independently after the update.
        let ds = toy_dataset(11);
        let point = ds.demos[0].points[75].clone();
        let demo = Demonstration {
            id: "single".into(),
            points: vec![point.clone()],
            skill_label: None,
            contact_time: None,
            object_pose: None,
        };
        let mut cfg = small_cfg();
        cfg.n_max = 1;
        cfg.m_max = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = init_model(ds.d, ds.norm_stats.clone().unwrap(), &cfg, &mut rng);

        let before_model = model.clone();
        let mut trainer = Trainer::new(model, cfg.clone());
        let lb = trainer.step(&demo, &mut rng).unwrap();
        let after = trainer.into_model();

        let ctx = std::slice::from_ref(&point);
        let before =
            evaluate_loss(&before_model, ctx, ctx, lb.chosen_index, cfg.beta).unwrap();
        assert!((before.total - lb.total).abs() < 1e-9);
        let after_loss = evaluate_loss(&after, ctx, ctx, lb.chosen_index, cfg.beta).unwrap();
        assert!(
            after_loss.total < before.total,
            "loss did not decrease: {} -> {}",
            before.total,
            after_loss.total
        );
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let ds = toy_dataset(12);
        let mut cfg = small_cfg();
        cfg.iterations = 0;
        let (model, history) = train(&ds, &cfg).unwrap();
        assert!(history.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = init_model(ds.d, ds.norm_stats.clone().unwrap(), &cfg, &mut rng);
        assert_eq!(model, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(13);
        let cfg = small_cfg();
        let (a, ha) = train(&ds, &cfg).unwrap();
        let (b, hb) = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn training_rejects_unnormalized_data() {
        let cfg_k = KitchenConfig::default_layout(DemoCount::Uniform(1), 0.0, 77);
        let raw = generate_synthetic_dataset(&cfg_k).unwrap();
        assert!(matches!(train(&raw, &small_cfg()), Err(ModelError::NotNormalized)));
    }

    #[test]
    fn assignment_is_deterministic_and_forced_for_k1() {
        let ds = toy_dataset(14);
        let mut cfg = small_cfg();
        cfg.k = 1;
        let (model, _) = train(&ds, &cfg).unwrap();
        let a = assign_all(&model, &ds).unwrap();
        let b = assign_all(&model, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), ds.demos.len());
        assert!(a.values().all(|&k| k == 0));
    }

    #[test]
    fn finetune_requires_full_coverage() {
        let ds = toy_dataset(15);
        let cfg = small_cfg();
        let mut asg = Assignment::new();
        asg.insert(ds.demos[0].id.clone(), 0);
        assert!(matches!(
            finetune(&ds, &asg, &cfg),
            Err(ModelError::MissingAssignment(_))
        ));
    }

    #[test]
    fn finetune_with_constant_assignment_matches_unsupervised_k1() {
        // With K=1 the nearest-neighbor choice is forced to 0, so freezing
        // the assignment to 0 changes nothing.
        let ds = toy_dataset(16);
        let mut cfg = small_cfg();
        cfg.k = 1;
        let (plain, _) = train(&ds, &cfg).unwrap();
        let asg: Assignment = ds.demos.iter().map(|d| (d.id.clone(), 0usize)).collect();
        let (tuned, _) = finetune(&ds, &asg, &cfg).unwrap();
        assert_eq!(plain, tuned);
    }

    #[test]
    fn self_supervised_mode_never_quantizes() {
        let ds = toy_dataset(17);
        let mut cfg = small_cfg();
        cfg.mode = TrainingMode::SelfSupervised;
        let asg: Assignment = ds.demos.iter().map(|d| (d.id.clone(), 1usize)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(170);
        let model = init_model(ds.d, ds.norm_stats.clone().unwrap(), &cfg, &mut rng);
        let mut trainer = Trainer::new(model, cfg).with_assignment(asg);
        for _ in 0..25 {
            trainer.step(&ds.demos[0], &mut rng).unwrap();
        }
        assert_eq!(trainer.quantize_calls(), 0);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let ds = toy_dataset(18);
        let mut cfg = small_cfg();
        cfg.iterations = 15;
        let (model, _) = train(&ds, &cfg).unwrap();
        // Probe one weight logged at save time.
        let probe = model.encoder.layers[0].weight[7];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(back.encoder.layers[0].weight[7], probe);
    }

    #[test]
    fn checkpoint_rejects_unknown_version_and_corruption() {
        let ds = toy_dataset(19);
        let mut cfg = small_cfg();
        cfg.iterations = 1;
        let (model, _) = train(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        fs::write(&path, &bumped).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::UnsupportedVersion(9))));

        let mut lines: Vec<&str> = text.lines().collect();
        let second = lines[1];
        let cut = &second[..second.len() / 2];
        lines[1] = cut;
        fs::write(&path, lines.join("\n")).unwrap();
        match load_model(&path) {
            Err(ModelError::Shape(_)) | Err(ModelError::Parse { .. }) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
