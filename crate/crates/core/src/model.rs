//! Tiny bidirectional transformer with mask-token vocabulary and detachable
//! low-rank fast-weight adapters on selected linears.
//!
//! The base weights θ are plain named f32 buffers; every forward pass
//! re-registers them on a fresh tape, so differentiation scope is chosen per
//! pass: `FastOnly` for inner-loop updates of the adapters, `ThetaOnly` for
//! the outer update with the adapters held constant, `None` for sampling.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng::{stream_rng, stream};
use crate::tape::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside embeddable range {limit}")]
    InvalidToken { id: u32, limit: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Output vocabulary plus the special input-only ids.
///
/// The mask token sits one slot past the output vocabulary: it is
/// embeddable as input but the output projection has width `vocab_size`
/// and can never score it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSpec {
    pub vocab_size: usize,
}

impl VocabSpec {
    pub fn new(vocab_size: usize) -> Self {
        VocabSpec { vocab_size }
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab_size as u32 + 1
    }

    /// Rows of the input embedding table (vocab + mask + pad).
    pub fn embed_rows(&self) -> usize {
        self.vocab_size + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            max_len: 256,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> VocabSpec {
        VocabSpec::new(self.vocab_size)
    }

    pub fn head_dim(&self) -> usize {
        assert!(self.d_model % self.n_heads == 0, "d_model must divide by n_heads");
        self.d_model / self.n_heads
    }
}

/// A named parameter buffer; also the record type of the checkpoint format.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Which linear inside a block an adapter attaches to, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinearSlot {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl LinearSlot {
    pub fn is_ffn(self) -> bool {
        matches!(self, LinearSlot::W1 | LinearSlot::W2)
    }

    pub fn tag(self) -> &'static str {
        match self {
            LinearSlot::Wq => "wq",
            LinearSlot::Wk => "wk",
            LinearSlot::Wv => "wv",
            LinearSlot::Wo => "wo",
            LinearSlot::W1 => "w1",
            LinearSlot::W2 => "w2",
        }
    }
}

const ALL_SLOTS: [LinearSlot; 6] = [
    LinearSlot::Wq,
    LinearSlot::Wk,
    LinearSlot::Wv,
    LinearSlot::Wo,
    LinearSlot::W1,
    LinearSlot::W2,
];

/// Adapter placement knobs: layer fraction, FFN-only restriction, and the
/// dense full-parameter variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastScope {
    pub fraction: f32,
    pub ffn_only: bool,
    pub full_param: bool,
}

impl Default for FastScope {
    fn default() -> Self {
        FastScope { fraction: 0.25, ffn_only: true, full_param: false }
    }
}

/// Initialization of the low-rank pair. `ZeroBoth` zeroes A and B, which
/// also zeroes both gradients at the initial point; `RandomA` is the
/// conventional zero-product init (random A, zero B).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastInit {
    ZeroBoth,
    RandomA,
}

#[derive(Debug, Clone)]
pub enum FastKind {
    LowRank { a: Vec<f32>, b: Vec<f32>, a_init: Vec<f32> },
    Dense { delta: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct FastEntry {
    pub layer: usize,
    pub slot: LinearSlot,
    pub d_in: usize,
    pub d_out: usize,
    pub kind: FastKind,
}

/// Transient fast weights φ. Reset to the initial state at the start of
/// every batch (or prompt); never shared across threads.
#[derive(Debug, Clone)]
pub struct FastWeights {
    pub rank: usize,
    pub alpha: f32,
    pub scope: FastScope,
    pub entries: Vec<FastEntry>,
}

/// Layers targeted by a scope fraction: the last ⌈fraction · n_layers⌉.
pub fn targeted_layers(n_layers: usize, fraction: f32) -> Vec<usize> {
    let count = ((fraction as f64) * n_layers as f64).ceil() as usize;
    let count = count.min(n_layers);
    (n_layers - count..n_layers).collect()
}

impl FastWeights {
    pub fn new(
        cfg: &ModelConfig,
        scope: FastScope,
        rank: usize,
        alpha: f32,
        init: FastInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut entries = Vec::new();
        let d = cfg.d_model;
        let ff = cfg.d_model * cfg.ffn_mult;
        for layer in targeted_layers(cfg.n_layers, scope.fraction) {
            for slot in ALL_SLOTS {
                if scope.ffn_only && !slot.is_ffn() {
                    continue;
                }
                let (d_in, d_out) = match slot {
                    LinearSlot::W1 => (d, ff),
                    LinearSlot::W2 => (ff, d),
                    _ => (d, d),
                };
                let kind = if scope.full_param {
                    FastKind::Dense { delta: vec![0.0; d_in * d_out] }
                } else {
                    let a_init = match init {
                        FastInit::ZeroBoth => vec![0.0; d_in * rank],
                        FastInit::RandomA => {
                            let bound = 1.0 / (d_in as f32).sqrt();
                            (0..d_in * rank).map(|_| rng.gen_range(-bound..bound)).collect()
                        }
                    };
                    FastKind::LowRank { a: a_init.clone(), b: vec![0.0; rank * d_out], a_init }
                };
                entries.push(FastEntry { layer, slot, d_in, d_out, kind });
            }
        }
        FastWeights { rank, alpha, scope, entries }
    }

    /// Restore the initial state: zero B (and A for zero-both init), zero
    /// dense deltas. The effective adapter weight returns to exactly zero.
    pub fn reset(&mut self) {
        for e in &mut self.entries {
            match &mut e.kind {
                FastKind::LowRank { a, b, a_init } => {
                    a.copy_from_slice(a_init);
                    b.iter_mut().for_each(|v| *v = 0.0);
                }
                FastKind::Dense { delta } => delta.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    fn entry_for(&self, layer: usize, slot: LinearSlot) -> Option<usize> {
        self.entries.iter().position(|e| e.layer == layer && e.slot == slot)
    }

    /// Stable ordered list of fast parameter buffers (layer asc, slot order,
    /// A before B). This ordering is shared by the inner optimizer, gradient
    /// normalization, and the forward pass's gradient handles.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for e in &self.entries {
            let base = format!("fast/block{}.{}", e.layer, e.slot.tag());
            match &e.kind {
                FastKind::LowRank { .. } => {
                    out.push((format!("{base}.a"), vec![e.d_in, self.rank]));
                    out.push((format!("{base}.b"), vec![self.rank, e.d_out]));
                }
                FastKind::Dense { .. } => out.push((format!("{base}.delta"), vec![e.d_in, e.d_out])),
            }
        }
        out
    }

    pub fn param_views(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for e in &self.entries {
            match &e.kind {
                FastKind::LowRank { a, b, .. } => {
                    out.push(a);
                    out.push(b);
                }
                FastKind::Dense { delta } => out.push(delta),
            }
        }
        out
    }

    pub fn param_views_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = Vec::new();
        for e in &mut self.entries {
            match &mut e.kind {
                FastKind::LowRank { a, b, .. } => {
                    out.push(a);
                    out.push(b);
                }
                FastKind::Dense { delta } => out.push(delta),
            }
        }
        out
    }

    pub fn is_effectively_zero(&self) -> bool {
        self.entries.iter().all(|e| match &e.kind {
            FastKind::LowRank { a, b, .. } => {
                a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0)
            }
            FastKind::Dense { delta } => delta.iter().all(|&v| v == 0.0),
        })
    }

    /// Export as named tensors for checkpointing.
    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.param_shapes()
            .into_iter()
            .zip(self.param_views())
            .map(|((name, shape), data)| NamedTensor { name, shape, data: data.to_vec() })
            .collect()
    }

    pub fn load_named(&mut self, named: &HashMap<String, NamedTensor>) {
        let shapes = self.param_shapes();
        for ((name, _), view) in shapes.iter().zip(self.param_views_mut()) {
            if let Some(t) = named.get(name) {
                view.copy_from_slice(&t.data);
            }
        }
    }
}

/// Which leaves the next backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    FastOnly,
    ThetaOnly,
}

/// Handles returned by a tape forward: logits, final hidden states, and
/// the registered leaf tensors for gradient readout.
pub struct ForwardOut {
    pub logits: Tensor,
    pub hidden: Tensor,
    /// (model param index, tape handle) for each trainable θ leaf.
    pub theta_handles: Vec<(usize, Tensor)>,
    /// Tape handles aligned with `FastWeights::param_views` order.
    pub fast_handles: Vec<Tensor>,
}

/// Tracks which leaves are registered on the current tape and with what
/// gradient role. Each θ parameter is registered at most once per tape.
struct Registrar {
    trainable: Vec<bool>,
    cache: HashMap<usize, Tensor>,
    theta_handles: Vec<(usize, Tensor)>,
    fast_handles: Vec<Tensor>,
    fast_scope: bool,
}

impl Registrar {
    fn theta(&mut self, tape: &mut Tape, params: &[NamedTensor], idx: usize) -> Tensor {
        if let Some(t) = self.cache.get(&idx) {
            return t.clone();
        }
        let p = &params[idx];
        let t = if self.trainable[idx] {
            let h = tape.param(&p.data, &p.shape);
            self.theta_handles.push((idx, h.clone()));
            h
        } else {
            tape.input(p.data.clone(), &p.shape)
        };
        self.cache.insert(idx, t.clone());
        t
    }

    fn fast_leaf(&mut self, tape: &mut Tape, data: &[f32], shape: &[usize]) -> Tensor {
        if self.fast_scope {
            let h = tape.param(data, shape);
            self.fast_handles.push(h.clone());
            h
        } else {
            tape.input(data.to_vec(), shape)
        }
    }
}

/// Optional persistent low-rank adapters trained by the outer loop in
/// place of the full base weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterLora {
    pub rank: usize,
    pub alpha: f32,
}

pub struct BaseModel {
    pub cfg: ModelConfig,
    pub outer_lora: Option<OuterLora>,
    params: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

impl BaseModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        Self::new_with_outer(cfg, seed, None)
    }

    pub fn new_with_outer(cfg: ModelConfig, seed: u64, outer_lora: Option<OuterLora>) -> Self {
        let mut rng = stream_rng(seed, &[stream::INIT]);
        let mut params = Vec::new();
        let d = cfg.d_model;
        let ff = d * cfg.ffn_mult;
        let v = cfg.vocab_size;
        let std = 0.02f32;

        let push_normal = |params: &mut Vec<NamedTensor>, rng: &mut ChaCha8Rng, name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal(rng, std)).collect();
            params.push(NamedTensor { name, shape, data });
        };
        let push_const = |params: &mut Vec<NamedTensor>, name: String, shape: Vec<usize>, val: f32| {
            let n: usize = shape.iter().product();
            params.push(NamedTensor { name, shape, data: vec![val; n] });
        };

        push_normal(&mut params, &mut rng, "tok_emb".into(), vec![cfg.vocab().embed_rows(), d]);
        push_normal(&mut params, &mut rng, "pos_emb".into(), vec![cfg.max_len, d]);
        for i in 0..cfg.n_layers {
            push_const(&mut params, format!("block{i}.ln1.g"), vec![d], 1.0);
            push_const(&mut params, format!("block{i}.ln1.b"), vec![d], 0.0);
            for slot in ["wq", "wk", "wv", "wo"] {
                push_normal(&mut params, &mut rng, format!("block{i}.attn.{slot}"), vec![d, d]);
                push_const(&mut params, format!("block{i}.attn.b{}", &slot[1..]), vec![d], 0.0);
            }
            push_const(&mut params, format!("block{i}.ln2.g"), vec![d], 1.0);
            push_const(&mut params, format!("block{i}.ln2.b"), vec![d], 0.0);
            push_normal(&mut params, &mut rng, format!("block{i}.ffn.w1"), vec![d, ff]);
            push_const(&mut params, format!("block{i}.ffn.b1"), vec![ff], 0.0);
            push_normal(&mut params, &mut rng, format!("block{i}.ffn.w2"), vec![ff, d]);
            push_const(&mut params, format!("block{i}.ffn.b2"), vec![d], 0.0);
        }
        push_const(&mut params, "ln_f.g".into(), vec![d], 1.0);
        push_const(&mut params, "ln_f.b".into(), vec![d], 0.0);
        push_normal(&mut params, &mut rng, "out.w".into(), vec![d, v]);
        push_const(&mut params, "out.b".into(), vec![v], 0.0);

        if let Some(ol) = outer_lora {
            for i in 0..cfg.n_layers {
                for slot in ALL_SLOTS {
                    let (d_in, d_out) = match slot {
                        LinearSlot::W1 => (d, ff),
                        LinearSlot::W2 => (ff, d),
                        _ => (d, d),
                    };
                    let bound = 1.0 / (d_in as f32).sqrt();
                    let a: Vec<f32> = (0..d_in * ol.rank).map(|_| rng.gen_range(-bound..bound)).collect();
                    params.push(NamedTensor {
                        name: format!("outer/block{i}.{}.a", slot.tag()),
                        shape: vec![d_in, ol.rank],
                        data: a,
                    });
                    params.push(NamedTensor {
                        name: format!("outer/block{i}.{}.b", slot.tag()),
                        shape: vec![ol.rank, d_out],
                        data: vec![0.0; ol.rank * d_out],
                    });
                }
            }
        }

        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        BaseModel { cfg, outer_lora, params, index }
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn param_data_mut(&mut self, idx: usize) -> &mut Vec<f32> {
        &mut self.params[idx].data
    }

    fn pid(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    /// Indices of the θ leaves the outer optimizer updates: all parameters
    /// in full mode, only the persistent adapters in outer-LoRA mode.
    pub fn trainable_indices(&self) -> Vec<usize> {
        match self.outer_lora {
            None => (0..self.params.len()).collect(),
            Some(_) => self
                .params
                .iter()
                .enumerate()
                .filter(|(_, p)| p.name.starts_with("outer/"))
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn named_map(&self) -> HashMap<String, NamedTensor> {
        self.params.iter().map(|p| (p.name.clone(), p.clone())).collect()
    }

    pub fn load_named(&mut self, named: &HashMap<String, NamedTensor>) -> Result<(), String> {
        for p in &mut self.params {
            match named.get(&p.name) {
                Some(t) if t.shape == p.shape => p.data.copy_from_slice(&t.data),
                Some(t) => return Err(format!("shape mismatch for {}: {:?} vs {:?}", p.name, p.shape, t.shape)),
                None => return Err(format!("missing tensor {}", p.name)),
            }
        }
        Ok(())
    }

    fn validate(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.cfg.max_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.cfg.max_len });
        }
        let limit = self.cfg.vocab().embed_rows() as u32;
        for &t in tokens {
            if t >= limit {
                return Err(ModelError::InvalidToken { id: t, limit });
            }
        }
        Ok(())
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        fast: Option<&FastWeights>,
        tokens: &[u32],
        scope: GradScope,
    ) -> Result<ForwardOut, ModelError> {
        self.validate(tokens)?;
        let len = tokens.len();
        let n_heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();

        let mut reg = Registrar {
            trainable: {
                let mut mask = vec![false; self.params.len()];
                if scope == GradScope::ThetaOnly {
                    for i in self.trainable_indices() {
                        mask[i] = true;
                    }
                }
                mask
            },
            cache: HashMap::new(),
            theta_handles: Vec::new(),
            fast_handles: Vec::new(),
            fast_scope: scope == GradScope::FastOnly,
        };

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok_emb = reg.theta(tape, &self.params, self.pid("tok_emb"));
        let pos_emb = reg.theta(tape, &self.params, self.pid("pos_emb"));
        let tok = tape.embedding_lookup(&tok_emb, &ids)?;
        let pos = tape.slice_rows(&pos_emb, 0, len)?;
        let mut h = tape.add(&tok, &pos)?;

        for layer in 0..self.cfg.n_layers {
            // Attention sublayer (pre-LN, full bidirectional attention).
            let ln1g = reg.theta(tape, &self.params, self.pid(&format!("block{layer}.ln1.g")));
            let ln1b = reg.theta(tape, &self.params, self.pid(&format!("block{layer}.ln1.b")));
            let a_in = tape.layer_norm(&h, &ln1g, &ln1b)?;
            let q = self.linear(tape, &mut reg, &a_in, layer, LinearSlot::Wq, fast)?;
            let k = self.linear(tape, &mut reg, &a_in, layer, LinearSlot::Wk, fast)?;
            let v = self.linear(tape, &mut reg, &a_in, layer, LinearSlot::Wv, fast)?;
            let mut heads = Vec::with_capacity(n_heads);
            let inv_sqrt = 1.0 / (hd as f32).sqrt();
            for hidx in 0..n_heads {
                let qh = tape.slice_cols(&q, hidx * hd, hd)?;
                let kh = tape.slice_cols(&k, hidx * hd, hd)?;
                let vh = tape.slice_cols(&v, hidx * hd, hd)?;
                let scores = tape.matmul_nt(&qh, &kh)?;
                let scaled = tape.scale(&scores, inv_sqrt);
                let probs = tape.softmax_rows(&scaled)?;
                heads.push(tape.matmul(&probs, &vh)?);
            }
            let attn = tape.concat_cols(&heads)?;
            let o = self.linear(tape, &mut reg, &attn, layer, LinearSlot::Wo, fast)?;
            h = tape.add(&h, &o)?;

            // FFN sublayer.
            let ln2g = reg.theta(tape, &self.params, self.pid(&format!("block{layer}.ln2.g")));
            let ln2b = reg.theta(tape, &self.params, self.pid(&format!("block{layer}.ln2.b")));
            let f_in = tape.layer_norm(&h, &ln2g, &ln2b)?;
            let f1 = self.linear(tape, &mut reg, &f_in, layer, LinearSlot::W1, fast)?;
            let f1a = tape.gelu(&f1);
            let f2 = self.linear(tape, &mut reg, &f1a, layer, LinearSlot::W2, fast)?;
            h = tape.add(&h, &f2)?;
        }

        let lnfg = reg.theta(tape, &self.params, self.pid("ln_f.g"));
        let lnfb = reg.theta(tape, &self.params, self.pid("ln_f.b"));
        let hidden = tape.layer_norm(&h, &lnfg, &lnfb)?;
        let w_out = reg.theta(tape, &self.params, self.pid("out.w"));
        let b_out = reg.theta(tape, &self.params, self.pid("out.b"));
        let proj = tape.matmul(&hidden, &w_out)?;
        let logits = tape.add_bias(&proj, &b_out)?;

        Ok(ForwardOut {
            logits,
            hidden,
            theta_handles: reg.theta_handles,
            fast_handles: reg.fast_handles,
        })
    }

    /// One (possibly adapter-augmented) linear layer with bias.
    fn linear(
        &self,
        tape: &mut Tape,
        reg: &mut Registrar,
        x: &Tensor,
        layer: usize,
        slot: LinearSlot,
        fast: Option<&FastWeights>,
    ) -> Result<Tensor, ModelError> {
        let (w_name, b_name) = match slot {
            LinearSlot::Wq => (format!("block{layer}.attn.wq"), format!("block{layer}.attn.bq")),
            LinearSlot::Wk => (format!("block{layer}.attn.wk"), format!("block{layer}.attn.bk")),
            LinearSlot::Wv => (format!("block{layer}.attn.wv"), format!("block{layer}.attn.bv")),
            LinearSlot::Wo => (format!("block{layer}.attn.wo"), format!("block{layer}.attn.bo")),
            LinearSlot::W1 => (format!("block{layer}.ffn.w1"), format!("block{layer}.ffn.b1")),
            LinearSlot::W2 => (format!("block{layer}.ffn.w2"), format!("block{layer}.ffn.b2")),
        };
        let w = reg.theta(tape, &self.params, self.pid(&w_name));
        let mut y = tape.matmul(x, &w)?;

        if let Some(ol) = self.outer_lora {
            let a = reg.theta(tape, &self.params, self.pid(&format!("outer/block{layer}.{}.a", slot.tag())));
            let b = reg.theta(tape, &self.params, self.pid(&format!("outer/block{layer}.{}.b", slot.tag())));
            let xa = tape.matmul(x, &a)?;
            let xab = tape.matmul(&xa, &b)?;
            let scaled = tape.scale(&xab, ol.alpha / ol.rank as f32);
            y = tape.add(&y, &scaled)?;
        }

        if let Some(fw) = fast {
            if let Some(eidx) = fw.entry_for(layer, slot) {
                let scaling = fw.scaling();
                let e = &fw.entries[eidx];
                match &e.kind {
                    FastKind::LowRank { a, b, .. } => {
                        let ta = reg.fast_leaf(tape, a, &[e.d_in, fw.rank]);
                        let tb = reg.fast_leaf(tape, b, &[fw.rank, e.d_out]);
                        let xa = tape.matmul(x, &ta)?;
                        let xab = tape.matmul(&xa, &tb)?;
                        let scaled = tape.scale(&xab, scaling);
                        y = tape.add(&y, &scaled)?;
                    }
                    FastKind::Dense { delta } => {
                        let td = reg.fast_leaf(tape, delta, &[e.d_in, e.d_out]);
                        let xd = tape.matmul(x, &td)?;
                        y = tape.add(&y, &xd)?;
                    }
                }
            }
        }

        let bt = reg.theta(tape, &self.params, self.pid(&b_name));
        Ok(tape.add_bias(&y, &bt)?)
    }

    /// Plain no-grad forward: logits over the output vocabulary, [L × V]
    /// row-major.
    pub fn forward(&self, fast: Option<&FastWeights>, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, fast, tokens, GradScope::None)?;
        Ok(tape.value(&out.logits).to_vec())
    }

    /// Final pre-projection hidden states, [L × d] row-major.
    pub fn hidden_states(&self, fast: Option<&FastWeights>, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, fast, tokens, GradScope::None)?;
        Ok(tape.value(&out.hidden).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { vocab_size: 16, d_model: 16, n_heads: 2, n_layers: 2, max_len: 24, ffn_mult: 2 }
    }

    #[test]
    fn zero_adapter_matches_absent_adapter_exactly() {
        let cfg = tiny_cfg();
        let model = BaseModel::new(cfg.clone(), 3);
        let mut rng = stream_rng(3, &[stream::INIT, 1]);
        let fast = FastWeights::new(&cfg, FastScope::default(), 2, 4.0, FastInit::ZeroBoth, &mut rng);
        let tokens: Vec<u32> = vec![1, 5, 9, 16, 2, 16];
        let with = model.forward(Some(&fast), &tokens).unwrap();
        let without = model.forward(None, &tokens).unwrap();
        assert_eq!(with.len(), without.len());
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Same for the random-A zero-product init: effective weight is zero.
        let fast2 = FastWeights::new(&cfg, FastScope::default(), 2, 4.0, FastInit::RandomA, &mut rng);
        let with2 = model.forward(Some(&fast2), &tokens).unwrap();
        for (a, b) in with2.iter().zip(&without) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fully_masked_input_has_finite_logits() {
        let cfg = tiny_cfg();
        let model = BaseModel::new(cfg.clone(), 11);
        let tokens = vec![cfg.vocab().mask_id(); 8];
        let logits = model.forward(None, &tokens).unwrap();
        assert_eq!(logits.len(), 8 * cfg.vocab_size);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logits_width_excludes_mask_token() {
        let cfg = tiny_cfg();
        let model = BaseModel::new(cfg.clone(), 1);
        let logits = model.forward(None, &[0, 1, 2]).unwrap();
        assert_eq!(logits.len(), 3 * cfg.vocab_size); // width V, mask never scored
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = BaseModel::new(cfg, 5);
        let a = model.forward(None, &[3, 1, 4, 1, 5]).unwrap();
        let b = model.forward(None, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hidden_states_shape_and_self_similarity() {
        let cfg = tiny_cfg();
        let model = BaseModel::new(cfg.clone(), 5);
        let h = model.hidden_states(None, &[2, 7, 7, 1]).unwrap();
        assert_eq!(h.len(), 4 * cfg.d_model);
        let mut tape = Tape::new();
        let hs = tape.input(h.clone(), &[4, cfg.d_model]);
        let cos = tape.cosine_masked(&hs, &h, &[0, 1, 2, 3]).unwrap();
        assert!(tape.scalar(&cos).abs() < 1e-5);
    }

    #[test]
    fn invalid_token_and_length_errors() {
        let cfg = tiny_cfg();
        let model = BaseModel::new(cfg.clone(), 5);
        assert!(matches!(model.forward(None, &[99]), Err(ModelError::InvalidToken { .. })));
        let long = vec![0u32; cfg.max_len + 1];
        assert!(matches!(model.forward(None, &long), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn scope_fraction_nests_and_counts_match() {
        let cfg = ModelConfig { n_layers: 4, ..tiny_cfg() };
        let mut rng = stream_rng(0, &[stream::INIT]);
        let quarter = FastWeights::new(
            &cfg,
            FastScope { fraction: 0.25, ffn_only: true, full_param: false },
            4,
            8.0,
            FastInit::ZeroBoth,
            &mut rng,
        );
        // One targeted layer, two FFN linears, (A, B) each -> 4 tensors.
        assert_eq!(quarter.param_views().len(), 4);

        let full = FastWeights::new(
            &cfg,
            FastScope { fraction: 1.0, ffn_only: false, full_param: false },
            4,
            8.0,
            FastInit::ZeroBoth,
            &mut rng,
        );
        assert_eq!(full.param_views().len(), 4 * 6 * 2);

        let layers_q: Vec<usize> = quarter.entries.iter().map(|e| e.layer).collect();
        let layers_f: Vec<usize> = full.entries.iter().map(|e| e.layer).collect();
        for l in &layers_q {
            assert!(layers_f.contains(l));
        }
        // Ordering is stable across calls.
        assert_eq!(
            quarter.param_shapes(),
            quarter.param_shapes()
        );
    }

    #[test]
    fn permutation_equivariance_with_zero_positions() {
        let cfg = tiny_cfg();
        let mut model = BaseModel::new(cfg.clone(), 9);
        let pid = model.pid("pos_emb");
        model.params[pid].data.iter_mut().for_each(|v| *v = 0.0);
        let tokens = vec![4, 9, 2, 13, 6];
        let base = model.forward(None, &tokens).unwrap();
        let mut swapped = tokens.clone();
        swapped.swap(1, 3);
        let out = model.forward(None, &swapped).unwrap();
        let v = cfg.vocab_size;
        // Un-permute rows and compare. Summation order inside softmax and
        // matmul differs under permutation, so allow a few ulps.
        for (orig_row, swapped_row) in [(1usize, 3usize), (3, 1), (0, 0), (2, 2), (4, 4)] {
            for c in 0..v {
                let a = base[orig_row * v + c];
                let b = out[swapped_row * v + c];
                assert!(
                    (a - b).abs() <= 1e-5 * a.abs().max(1.0),
                    "row {orig_row} col {c}: {a} vs {b}"
                );
            }
        }
    }
}
