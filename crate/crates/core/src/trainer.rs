//! Bi-level training: an anchor-consistent inner loop writes parametric
//! memory into fast weights, a first-order outer update trains the base
//! model conditioned on it. The standard masked-diffusion baseline is the
//! same loop with the inner stage disabled.
//!
//! First-order structure comes for free from the per-pass tapes: the inner
//! stages differentiate only the fast weights, and the outer pass re-reads
//! the adapted fast-weight values as constants on a fresh tape.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::diffusion::{
    denoise_step, forward_mask, further_mask, mdlm_loss, pre_anchor_ratio, DiffusionError,
    NoiseSchedule, NoisyState,
};
use crate::metrics::{self, MetricRecord, MetricsWriter, Phase};
use crate::model::{
    BaseModel, FastInit, FastScope, FastWeights, ForwardOut, GradScope, ModelError, NamedTensor,
};
use crate::rng::{stream_rng, stream};
use crate::tape::{Tape, Tensor, TensorError};
use crate::taskgen::{read_toks_list, Pair, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    CrossEntropy,
    KlDistill,
    ReverseKlDistill,
    HiddenCosine,
    HiddenMse,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::CrossEntropy => "cross_entropy",
            Supervision::KlDistill => "kl_distill",
            Supervision::ReverseKlDistill => "reverse_kl_distill",
            Supervision::HiddenCosine => "hidden_cosine",
            Supervision::HiddenMse => "hidden_mse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage1Target {
    BroadClean,
    AnchorTokenOnly,
}

impl Stage1Target {
    pub fn name(self) -> &'static str {
        match self {
            Stage1Target::BroadClean => "broad_clean",
            Stage1Target::AnchorTokenOnly => "anchor_token_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Local,
    Global,
    Off,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Local => "local",
            Normalization::Global => "global",
            Normalization::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trajectory {
    AnchorConsistent,
    Inconsistent,
}

impl Trajectory {
    pub fn name(self) -> &'static str {
        match self {
            Trajectory::AnchorConsistent => "anchor_consistent",
            Trajectory::Inconsistent => "inconsistent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    StandardMdlm,
    Memdlm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::StandardMdlm => "standard_mdlm",
            Method::Memdlm => "memdlm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterMode {
    Full,
    Lora,
}

impl OuterMode {
    pub fn name(self) -> &'static str {
        match self {
            OuterMode::Full => "full",
            OuterMode::Lora => "lora",
        }
    }
}

/// Every knob of the inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopConfig {
    pub eta: f32,
    /// Total inner stages: k-1 pre-anchor stages plus one anchor stage.
    pub k: usize,
    pub s_pre: f32,
    pub supervision: Supervision,
    pub stage1_target: Stage1Target,
    pub normalization: Normalization,
    pub clip: Option<f32>,
    pub scope: FastScope,
    pub rank: usize,
    pub alpha: f32,
    pub fast_init: FastInit,
    pub trajectory: Trajectory,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        InnerLoopConfig {
            eta: 0.05,
            k: 2,
            s_pre: 1.5,
            supervision: Supervision::CrossEntropy,
            stage1_target: Stage1Target::BroadClean,
            normalization: Normalization::Local,
            clip: Some(1.0),
            scope: FastScope::default(),
            rank: 4,
            alpha: 8.0,
            fast_init: FastInit::ZeroBoth,
            trajectory: Trajectory::AnchorConsistent,
        }
    }
}

impl InnerLoopConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.eta < 0.0 {
            return Err(TrainError::Config("inner learning rate must be nonnegative".into()));
        }
        if self.k < 1 {
            return Err(TrainError::Config("inner stage count must be at least 1".into()));
        }
        if self.trajectory == Trajectory::AnchorConsistent && self.s_pre < 1.0 {
            return Err(TrainError::Config("s_pre must be >= 1 for anchor-consistent trajectories".into()));
        }
        Ok(())
    }

    pub fn make_fast_weights(&self, model_cfg: &crate::model::ModelConfig, seed: u64) -> FastWeights {
        let mut rng = stream_rng(seed, &[stream::INIT, 777]);
        FastWeights::new(model_cfg, self.scope, self.rank, self.alpha, self.fast_init, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub beta: f32,
    pub weight_decay: f32,
    pub warmup: f32,
    pub schedule: LrSchedule,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_batches: usize,
    pub save_every: u64,
    pub outer: OuterMode,
}

/// One training sample: clean tokens and the anchor state built from them.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x0: Vec<u32>,
    pub anchor: NoisyState,
}

// ── gradient normalization ──────────────────────────────────────────

const NORM_EPS: f32 = 1e-12;

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

fn scale_in_place(v: &mut [f32], c: f32) {
    v.iter_mut().for_each(|x| *x *= c);
}

/// Scale fast-weight gradients in place. Local mode gives each tensor a
/// unit direction before clipping; global mode scales everything by the
/// joint norm; off applies only the (global) clip when one is set.
pub fn normalize_gradients(grads: &mut [Vec<f32>], mode: Normalization, clip: Option<f32>) {
    match mode {
        Normalization::Local => {
            for g in grads.iter_mut() {
                let n = l2(g);
                scale_in_place(g, 1.0 / n.max(NORM_EPS));
                if let Some(c) = clip {
                    let n2 = l2(g);
                    if n2 > c {
                        scale_in_place(g, c / n2);
                    }
                }
            }
        }
        Normalization::Global => {
            let total = grads.iter().map(|g| (l2(g) as f64).powi(2)).sum::<f64>().sqrt() as f32;
            for g in grads.iter_mut() {
                scale_in_place(g, 1.0 / total.max(NORM_EPS));
            }
            if let Some(c) = clip {
                let total2 = grads.iter().map(|g| (l2(g) as f64).powi(2)).sum::<f64>().sqrt() as f32;
                if total2 > c {
                    for g in grads.iter_mut() {
                        scale_in_place(g, c / total2);
                    }
                }
            }
        }
        Normalization::Off => {
            if let Some(c) = clip {
                let total = grads.iter().map(|g| (l2(g) as f64).powi(2)).sum::<f64>().sqrt() as f32;
                if total > c {
                    for g in grads.iter_mut() {
                        scale_in_place(g, c / total);
                    }
                }
            }
        }
    }
}

// ── inner-loop losses ───────────────────────────────────────────────

fn masked_set(state: &NoisyState) -> Vec<usize> {
    state.masked_positions()
}

/// Pre-anchor stage loss: cross-entropy toward the clean tokens, either
/// over every position masked in the noisier state (broad clean target) or
/// only over the positions that become visible at the anchor.
pub fn stage1_loss(
    tape: &mut Tape,
    model: &BaseModel,
    fast: &FastWeights,
    x_tpre: &NoisyState,
    x_t: &NoisyState,
    x0: &[u32],
    cfg: &InnerLoopConfig,
) -> Result<(Tensor, ForwardOut), TrainError> {
    let pre_masks = masked_set(x_tpre);
    if cfg.trajectory == Trajectory::AnchorConsistent {
        let anchor: std::collections::HashSet<usize> = masked_set(x_t).into_iter().collect();
        let pre: std::collections::HashSet<usize> = pre_masks.iter().copied().collect();
        if !anchor.is_subset(&pre) {
            return Err(TrainError::Config(
                "pre-anchor state must mask a superset of the anchor state".into(),
            ));
        }
    }
    let positions: Vec<usize> = match cfg.stage1_target {
        Stage1Target::BroadClean => pre_masks,
        Stage1Target::AnchorTokenOnly => {
            let anchor: std::collections::HashSet<usize> = masked_set(x_t).into_iter().collect();
            pre_masks.into_iter().filter(|p| !anchor.contains(p)).collect()
        }
    };
    let fwd = model.forward_on_tape(tape, Some(fast), &x_tpre.tokens, GradScope::FastOnly)?;
    let loss = tape.cross_entropy_masked(&fwd.logits, x0, &positions)?;
    Ok((loss, fwd))
}

/// The state the frozen teacher branch sees for the distillation modes:
/// one denoising step ahead of the student, revealing ⌈|masks|/4⌉ tokens
/// through the model's own confident predictions.
pub fn teacher_state(
    model: &BaseModel,
    fast: &FastWeights,
    x_t: &NoisyState,
) -> Result<NoisyState, TrainError> {
    let masked = x_t.masked_count();
    if masked == 0 {
        return Ok(x_t.clone());
    }
    let k = masked.div_ceil(4);
    Ok(denoise_step(model, Some(fast), x_t, k)?)
}

fn probs_from_logits(logits: &[f32], vocab: usize) -> Vec<f32> {
    let rows = logits.len() / vocab;
    let mut out = vec![0.0f32; logits.len()];
    for r in 0..rows {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (o, &x) in out[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in out[r * vocab..(r + 1) * vocab].iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Anchor stage loss under the configured supervision mode. Distillation
/// modes build their teacher one denoising step ahead.
pub fn stage2_loss(
    tape: &mut Tape,
    model: &BaseModel,
    fast: &FastWeights,
    x_t: &NoisyState,
    x0: &[u32],
    cfg: &InnerLoopConfig,
) -> Result<(Tensor, ForwardOut), TrainError> {
    match cfg.supervision {
        Supervision::CrossEntropy => {
            let positions = masked_set(x_t);
            let fwd = model.forward_on_tape(tape, Some(fast), &x_t.tokens, GradScope::FastOnly)?;
            let loss = tape.cross_entropy_masked(&fwd.logits, x0, &positions)?;
            Ok((loss, fwd))
        }
        _ => {
            let teacher = teacher_state(model, fast, x_t)?;
            stage2_loss_with_teacher(tape, model, fast, x_t, x0, &teacher, cfg)
        }
    }
}

/// Anchor stage loss with an explicit teacher state (the self-distillation
/// identity holds when the teacher state equals the student state).
pub fn stage2_loss_with_teacher(
    tape: &mut Tape,
    model: &BaseModel,
    fast: &FastWeights,
    x_t: &NoisyState,
    x0: &[u32],
    teacher: &NoisyState,
    cfg: &InnerLoopConfig,
) -> Result<(Tensor, ForwardOut), TrainError> {
    let positions = masked_set(x_t);
    let fwd = model.forward_on_tape(tape, Some(fast), &x_t.tokens, GradScope::FastOnly)?;
    let loss = match cfg.supervision {
        Supervision::CrossEntropy => tape.cross_entropy_masked(&fwd.logits, x0, &positions)?,
        Supervision::KlDistill | Supervision::ReverseKlDistill => {
            let t_logits = model.forward(Some(fast), &teacher.tokens)?;
            let t_probs = probs_from_logits(&t_logits, model.cfg.vocab_size);
            if cfg.supervision == Supervision::KlDistill {
                tape.kl_masked(&fwd.logits, &t_probs, &positions)?
            } else {
                tape.reverse_kl_masked(&fwd.logits, &t_probs, &positions)?
            }
        }
        Supervision::HiddenCosine => {
            let t_hidden = model.hidden_states(Some(fast), &teacher.tokens)?;
            tape.cosine_masked(&fwd.hidden, &t_hidden, &positions)?
        }
        Supervision::HiddenMse => {
            let t_hidden = model.hidden_states(Some(fast), &teacher.tokens)?;
            tape.mse_masked(&fwd.hidden, &t_hidden, &positions)?
        }
    };
    Ok((loss, fwd))
}

// ── inner loop ──────────────────────────────────────────────────────

/// Stage states for one sample: `states[j]` is the input of stage j and
/// `toward[j]` the state a pre-anchor stage denoises toward.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub states: Vec<NoisyState>,
    pub toward: Vec<NoisyState>,
}

/// Build the per-sample inner trajectory. Anchor-consistent plans form a
/// nested chain from the noisiest pre-anchor ratio down to the anchor;
/// the inconsistent ablation draws fresh independent (t', mask) states per
/// stage with no nesting.
pub fn build_stage_plans(
    batch: &[BatchItem],
    t: f32,
    cfg: &InnerLoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SamplePlan>, TrainError> {
    let mut plans = Vec::with_capacity(batch.len());
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
    for (item, &seed) in batch.iter().zip(&seeds) {
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = &item.anchor;
        let mut states = Vec::with_capacity(cfg.k);
        let mut toward = Vec::with_capacity(cfg.k);
        match cfg.trajectory {
            Trajectory::AnchorConsistent => {
                let resp = anchor.response_len();
                let anchor_count = anchor.masked_count();
                let r_anchor = anchor.mask_ratio();
                let r_pre = pre_anchor_ratio(t, cfg.s_pre).max(r_anchor);
                // Noisiest pre-anchor state; later stages reveal a suffix
                // of its extra masks, keeping the chain nested.
                let noisiest = further_mask(anchor, r_pre, &mut srng)?;
                let mut extras: Vec<usize> = (anchor.prompt_len..anchor.tokens.len())
                    .filter(|&i| noisiest.tokens[i] == anchor.mask_id && anchor.tokens[i] != anchor.mask_id)
                    .collect();
                for i in (1..extras.len()).rev() {
                    let j = srng.gen_range(0..=i);
                    extras.swap(i, j);
                }
                let denom = cfg.k.max(2) - 1;
                for j in 0..cfg.k - 1 {
                    let ratio = r_pre - (r_pre - r_anchor) * j as f32 / denom as f32;
                    let count = ((ratio as f64 * resp as f64).round() as usize)
                        .clamp(anchor_count, anchor_count + extras.len());
                    let mut tokens = anchor.tokens.clone();
                    for &p in extras.iter().take(count - anchor_count) {
                        tokens[p] = anchor.mask_id;
                    }
                    states.push(NoisyState {
                        tokens,
                        t: ratio,
                        prompt_len: anchor.prompt_len,
                        mask_id: anchor.mask_id,
                    });
                }
                states.push(anchor.clone());
                for j in 0..cfg.k {
                    let next = if j + 1 < cfg.k { states[j + 1].clone() } else { anchor.clone() };
                    toward.push(next);
                }
            }
            Trajectory::Inconsistent => {
                for _ in 0..cfg.k {
                    let tj = 1.0 - srng.gen::<f32>();
                    let state =
                        forward_mask(&item.x0, tj, anchor.prompt_len, anchor.mask_id, &mut srng)?;
                    states.push(state);
                    toward.push(anchor.clone());
                }
            }
        }
        plans.push(SamplePlan { states, toward });
    }
    Ok(plans)
}

#[derive(Debug, Clone, Default)]
pub struct InnerStats {
    pub stage_losses: Vec<f32>,
}

/// Run the K-stage inner loop on a batch, updating `fast` in place with
/// normalized SGD steps. The base model is immutable throughout; the
/// returned stats carry the per-stage mean losses.
pub fn inner_adapt(
    model: &BaseModel,
    fast: &mut FastWeights,
    batch: &[BatchItem],
    t: f32,
    cfg: &InnerLoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<InnerStats, TrainError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Ok(InnerStats::default());
    }
    let plans = build_stage_plans(batch, t, cfg, rng)?;
    inner_adapt_planned(model, fast, batch, &plans, cfg)
}

/// Inner loop over pre-built stage plans (split out so tests can unroll
/// the same trajectory by hand).
pub fn inner_adapt_planned(
    model: &BaseModel,
    fast: &mut FastWeights,
    batch: &[BatchItem],
    plans: &[SamplePlan],
    cfg: &InnerLoopConfig,
) -> Result<InnerStats, TrainError> {
    let nb = batch.len() as f32;
    let mut stats = InnerStats::default();
    for stage in 0..cfg.k {
        let is_final = stage == cfg.k - 1;
        let results: Vec<(f32, Vec<Vec<f32>>)> = batch
            .par_iter()
            .zip(plans.par_iter())
            .map(|(item, plan)| -> Result<(f32, Vec<Vec<f32>>), TrainError> {
                let mut tape = Tape::new();
                let (loss, fwd) = if is_final {
                    stage2_loss(&mut tape, model, fast, &plan.states[stage], &item.x0, cfg)?
                } else {
                    stage1_loss(
                        &mut tape,
                        model,
                        fast,
                        &plan.states[stage],
                        &plan.toward[stage],
                        &item.x0,
                        cfg,
                    )?
                };
                tape.backward(&loss);
                let grads = fwd.fast_handles.iter().map(|h| tape.grad_or_zeros(h)).collect();
                Ok((tape.scalar(&loss), grads))
            })
            .collect::<Result<_, _>>()?;

        let mut mean_loss = 0.0f32;
        let mut mean_grads: Vec<Vec<f32>> =
            fast.param_views().iter().map(|v| vec![0.0; v.len()]).collect();
        for (loss, grads) in &results {
            mean_loss += loss / nb;
            for (acc, g) in mean_grads.iter_mut().zip(grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b / nb;
                }
            }
        }
        normalize_gradients(&mut mean_grads, cfg.normalization, cfg.clip);
        for (param, g) in fast.param_views_mut().into_iter().zip(&mean_grads) {
            for (p, gi) in param.iter_mut().zip(g) {
                *p -= cfg.eta * gi;
            }
        }
        stats.stage_losses.push(mean_loss);
    }
    Ok(stats)
}

// ── outer loop ──────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(model: &BaseModel, weight_decay: f32) -> Self {
        let m = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamW { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn step(&mut self, model: &mut BaseModel, grads: &[Option<Vec<f32>>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = model.param_data_mut(idx);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
    }

    pub fn to_named(&self, model: &BaseModel) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, p) in model.params().iter().enumerate() {
            out.push(NamedTensor { name: format!("opt/m/{}", p.name), shape: p.shape.clone(), data: self.m[i].clone() });
            out.push(NamedTensor { name: format!("opt/v/{}", p.name), shape: p.shape.clone(), data: self.v[i].clone() });
        }
        out.push(NamedTensor { name: "opt/t".into(), shape: vec![1], data: vec![self.t as f32] });
        out
    }

    pub fn load_named(&mut self, model: &BaseModel, named: &HashMap<String, NamedTensor>) {
        for (i, p) in model.params().iter().enumerate() {
            if let Some(t) = named.get(&format!("opt/m/{}", p.name)) {
                self.m[i].copy_from_slice(&t.data);
            }
            if let Some(t) = named.get(&format!("opt/v/{}", p.name)) {
                self.v[i].copy_from_slice(&t.data);
            }
        }
        if let Some(t) = named.get("opt/t") {
            self.t = t.data[0] as u64;
        }
    }
}

/// Whether an error is a numeric failure (non-finite values anywhere in
/// the step) rather than a configuration or IO problem.
pub fn is_numeric_failure(e: &TrainError) -> bool {
    match e {
        TrainError::NonFinite { .. } => true,
        TrainError::Tensor(TensorError::NonFinite { .. }) => true,
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => true,
        TrainError::Diffusion(DiffusionError::Model(ModelError::Tensor(
            TensorError::NonFinite { .. },
        ))) => true,
        TrainError::Diffusion(DiffusionError::Tensor(TensorError::NonFinite { .. })) => true,
        _ => false,
    }
}

/// Learning rate at a 1-based step: linear warmup then cosine (or
/// constant) decay.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f32 {
    let warmup_steps = ((cfg.warmup as f64) * cfg.steps as f64).round() as u64;
    if warmup_steps > 0 && step <= warmup_steps {
        return cfg.beta * step as f32 / warmup_steps as f32;
    }
    match cfg.schedule {
        LrSchedule::Constant => cfg.beta,
        LrSchedule::Cosine => {
            let total = cfg.steps.saturating_sub(warmup_steps).max(1);
            let done = step.saturating_sub(warmup_steps).min(total);
            let progress = done as f32 / total as f32;
            cfg.beta * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
        }
    }
}

/// One outer update: the weighted masked loss on the anchor states with
/// the fast weights held constant, backward w.r.t. θ only, one optimizer
/// step. Returns the batch-mean loss.
pub fn outer_step(
    model: &mut BaseModel,
    fast: Option<&FastWeights>,
    batch: &[BatchItem],
    opt: &mut AdamW,
    lr: f32,
    schedule: &NoiseSchedule,
) -> Result<f32, TrainError> {
    let results: Vec<(f32, Vec<(usize, Vec<f32>)>)> = batch
        .par_iter()
        .map(|item| -> Result<(f32, Vec<(usize, Vec<f32>)>), TrainError> {
            let mut tape = Tape::new();
            let fwd = model.forward_on_tape(&mut tape, fast, &item.anchor.tokens, GradScope::ThetaOnly)?;
            let loss = mdlm_loss(&mut tape, &fwd.logits, &item.x0, &item.anchor, schedule)?;
            tape.backward(&loss);
            let grads = fwd
                .theta_handles
                .iter()
                .map(|(idx, h)| (*idx, tape.grad_or_zeros(h)))
                .collect();
            Ok((tape.scalar(&loss), grads))
        })
        .collect::<Result<_, _>>()?;

    let nb = batch.len() as f32;
    let mean_loss = results.iter().map(|r| r.0).sum::<f32>() / nb;
    if !mean_loss.is_finite() {
        return Err(TrainError::NonFinite { step: opt.t + 1 });
    }
    let mut acc: Vec<Option<Vec<f32>>> = vec![None; model.params().len()];
    for (_, grads) in &results {
        for (idx, g) in grads {
            let slot = acc[*idx].get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(g) {
                *a += b / nb;
            }
        }
    }
    opt.step(model, &acc, lr);
    Ok(mean_loss)
}

/// Unweighted masked cross-entropy sum and masked-token count for one
/// state (evaluation path, no tape).
pub fn masked_ce_per_token(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    state: &NoisyState,
    x0: &[u32],
) -> Result<(f64, usize), TrainError> {
    let logits = model.forward(fast, &state.tokens)?;
    let vocab = model.cfg.vocab_size;
    let positions = state.masked_positions();
    let mut sum = 0.0f64;
    for &p in &positions {
        let row = &logits[p * vocab..(p + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln() + max as f64;
        sum += lse - row[x0[p] as usize] as f64;
    }
    Ok((sum, positions.len()))
}

// ── training orchestration ──────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub out_dir: PathBuf,
}

fn build_batch(
    pairs: &[Pair],
    indices: &[usize],
    t: f32,
    mask_id: u32,
    seed: u64,
    tags: &[u64],
) -> Result<Vec<BatchItem>, TrainError> {
    indices
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            let pair = &pairs[idx];
            let mut x0 = pair.prompt.clone();
            x0.extend_from_slice(&pair.response);
            let mut mask_tags = tags.to_vec();
            mask_tags.push(i as u64);
            let mut rng = stream_rng(seed, &mask_tags);
            let anchor = forward_mask(&x0, t, pair.prompt.len(), mask_id, &mut rng)?;
            Ok(BatchItem { x0, anchor })
        })
        .collect()
}

fn run_eval(
    model: &BaseModel,
    method: Method,
    fast_ws: &mut Option<FastWeights>,
    eval_pairs: &[Pair],
    train_cfg: &TrainConfig,
    inner_cfg: &InnerLoopConfig,
    schedule: &NoiseSchedule,
    mask_id: u32,
) -> Result<f64, TrainError> {
    let seed = train_cfg.seed;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for j in 0..train_cfg.eval_batches as u64 {
        let mut sel = stream_rng(seed, &[stream::EVAL, j]);
        let t = schedule.t_min + (1.0 - schedule.t_min) * sel.gen::<f32>();
        let indices: Vec<usize> =
            (0..train_cfg.batch).map(|_| sel.gen_range(0..eval_pairs.len())).collect();
        let items = build_batch(eval_pairs, &indices, t, mask_id, seed, &[stream::EVAL_MASK, j])?;
        let fast_ref = match (method, fast_ws.as_mut()) {
            (Method::Memdlm, Some(fast)) => {
                fast.reset();
                let mut irng = stream_rng(seed, &[stream::EVAL_INNER, j]);
                inner_adapt(model, fast, &items, t, inner_cfg, &mut irng)?;
                Some(&*fast)
            }
            _ => None,
        };
        for item in &items {
            let (s, c) = masked_ce_per_token(model, fast_ref, &item.anchor, &item.x0)?;
            total += s;
            count += c;
        }
    }
    Ok(total / count.max(1) as f64)
}

fn save_checkpoint(
    dir: &Path,
    step: u64,
    model: &BaseModel,
    opt: &AdamW,
) -> Result<PathBuf, TrainError> {
    let mut tensors: Vec<NamedTensor> = model.params().to_vec();
    tensors.extend(opt.to_named(model));
    tensors.push(NamedTensor { name: "meta/step".into(), shape: vec![1], data: vec![step as f32] });
    let path = dir.join(format!("ckpt-{step}.bin"));
    checkpoint::save(&path, &tensors)?;
    Ok(path)
}

/// Latest `ckpt-<step>.bin` in a directory.
pub fn find_latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()? {
        let entry = entry.ok()?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(step) = step.parse::<u64>() {
                if best.as_ref().map_or(true, |(b, _)| step > *b) {
                    best = Some((step, entry.path()));
                }
            }
        }
    }
    best
}

/// Full training run driven by a resolved configuration. Writes
/// `resolved-config.txt`, `metrics.jsonl`, and periodic `ckpt-<step>.bin`
/// files into `out_dir`; resumable from the latest checkpoint.
pub fn train(run: &RunConfig, out_dir: &Path, resume: bool) -> Result<TrainOutcome, TrainError> {
    run.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let train_cfg = run.train_settings();
    let inner_cfg = run.inner_config();
    let schedule = run.noise_schedule();
    let model_cfg = run.model_config();
    let mask_id = model_cfg.vocab().mask_id();

    let (vocab, train_pairs) = read_toks_list(&run.data_train)?;
    if vocab != model_cfg.vocab_size {
        return Err(TrainError::Data(format!(
            "data vocab {vocab} does not match model vocab {}",
            model_cfg.vocab_size
        )));
    }
    if train_pairs.is_empty() {
        return Err(TrainError::Data("training data is empty".into()));
    }
    for p in &train_pairs {
        if p.prompt.len() + p.response.len() > model_cfg.max_len {
            return Err(TrainError::Data(format!(
                "instance of length {} exceeds model.max_len {}",
                p.prompt.len() + p.response.len(),
                model_cfg.max_len
            )));
        }
    }
    let eval_pairs = if run.data_eval.trim().is_empty() {
        train_pairs.clone()
    } else {
        read_toks_list(&run.data_eval)?.1
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("resolved-config.txt"), run.resolved())?;

    let mut model = BaseModel::new_with_outer(model_cfg.clone(), train_cfg.seed, run.outer_lora());
    let mut opt = AdamW::new(&model, train_cfg.weight_decay);
    let mut start_step = 0u64;
    let metrics_path = out_dir.join("metrics.jsonl");

    let mut writer = if resume {
        let (step, path) = find_latest_checkpoint(out_dir)
            .ok_or_else(|| TrainError::Config("no checkpoint to resume from".into()))?;
        let named = checkpoint::load_map(&path)?;
        model.load_named(&named).map_err(TrainError::Data)?;
        opt.load_named(&model, &named);
        start_step = step;
        metrics::truncate_after(&metrics_path, step)?;
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let mut fast_ws: Option<FastWeights> = match train_cfg.method {
        Method::Memdlm => Some(inner_cfg.make_fast_weights(&model_cfg, train_cfg.seed)),
        Method::StandardMdlm => None,
    };

    let started = Instant::now();
    let seed = train_cfg.seed;
    for step in start_step + 1..=train_cfg.steps {
        let mut data_rng = stream_rng(seed, &[stream::DATA, step]);
        let indices: Vec<usize> =
            (0..train_cfg.batch).map(|_| data_rng.gen_range(0..train_pairs.len())).collect();
        let mut anchor_rng = stream_rng(seed, &[stream::ANCHOR, step]);
        let t = schedule.t_min + (1.0 - schedule.t_min) * anchor_rng.gen::<f32>();
        let items = build_batch(&train_pairs, &indices, t, mask_id, seed, &[stream::ANCHOR, step])?;

        let abort_nonfinite = |writer: &mut MetricsWriter| -> TrainError {
            let mut rec = MetricRecord::new(step, Phase::Train, seed).field("nonfinite", 1.0);
            rec.wall_ms = started.elapsed().as_millis() as u64;
            let _ = writer.write(&rec);
            TrainError::NonFinite { step }
        };

        if let Some(fast) = fast_ws.as_mut() {
            fast.reset();
            let mut irng = stream_rng(seed, &[stream::INNER, step]);
            if let Err(e) = inner_adapt(&model, fast, &items, t, &inner_cfg, &mut irng) {
                if is_numeric_failure(&e) {
                    return Err(abort_nonfinite(&mut writer));
                }
                return Err(e);
            }
        }

        let lr = lr_at(&train_cfg, step);
        let loss = match outer_step(&mut model, fast_ws.as_ref(), &items, &mut opt, lr, &schedule) {
            Ok(loss) => loss,
            Err(e) if is_numeric_failure(&e) => return Err(abort_nonfinite(&mut writer)),
            Err(e) => return Err(e),
        };

        let mut rec = MetricRecord::new(step, Phase::Train, seed)
            .field("loss", loss as f64)
            .field("lr", lr as f64);
        rec.wall_ms = started.elapsed().as_millis() as u64;
        writer.write(&rec)?;

        if train_cfg.eval_every > 0 && step % train_cfg.eval_every == 0 {
            let eval = run_eval(
                &model,
                train_cfg.method,
                &mut fast_ws,
                &eval_pairs,
                &train_cfg,
                &inner_cfg,
                &schedule,
                mask_id,
            )?;
            let mut rec = MetricRecord::new(step, Phase::Eval, seed).field("loss", eval);
            rec.wall_ms = started.elapsed().as_millis() as u64;
            writer.write(&rec)?;
        }

        if (train_cfg.save_every > 0 && step % train_cfg.save_every == 0) || step == train_cfg.steps {
            save_checkpoint(out_dir, step, &model, &opt)?;
        }
    }

    Ok(TrainOutcome { final_step: train_cfg.steps, out_dir: out_dir.to_path_buf() })
}

use rand_chacha::rand_core::SeedableRng;
