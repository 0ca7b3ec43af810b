//! Absorbing-state forward corruption, loss weighting, and the iterative
//! confidence-based denoising sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{BaseModel, FastWeights, ModelError};
use crate::tape::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside [0, 1]")]
    BadTimestep { t: f32 },
    #[error("prompt length {prompt_len} exceeds sequence length {len}")]
    PromptTooLong { prompt_len: usize, len: usize },
    #[error("empty response region with t > 0")]
    DegenerateInput,
    #[error("target mask ratio {target} below current ratio {current}")]
    RatioOrder { target: f32, current: f32 },
    #[error("unmask budget {k} exceeds remaining masks {masked}")]
    UnmaskBudget { k: usize, masked: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A token sequence with masked corruptions and timestep metadata. The
/// prefix `[0, prompt_len)` is never masked during training.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub tokens: Vec<u32>,
    pub t: f32,
    pub prompt_len: usize,
    pub mask_id: u32,
}

impl NoisyState {
    pub fn masked_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &tok)| tok == self.mask_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&tok| tok == self.mask_id).count()
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Current masked fraction of the response region.
    pub fn mask_ratio(&self) -> f32 {
        if self.response_len() == 0 {
            0.0
        } else {
            self.masked_count() as f32 / self.response_len() as f32
        }
    }
}

/// Linear schedule: masking probability at time t is t. The weight is
/// 1/t with t floored at `t_min` inside the weight only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub t_min: f32,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { t_min: 0.02 }
    }
}

impl NoiseSchedule {
    pub fn weight(&self, t: f32) -> f32 {
        1.0 / t.max(self.t_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n_steps: 8 }
    }
}

/// Mask each response position independently with probability t. If t > 0
/// and the draw left the response clean, one uniformly chosen response
/// position is force-masked so the state carries a defined training signal.
pub fn forward_mask(
    x0: &[u32],
    t: f32,
    prompt_len: usize,
    mask_id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<NoisyState, DiffusionError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DiffusionError::BadTimestep { t });
    }
    if prompt_len > x0.len() {
        return Err(DiffusionError::PromptTooLong { prompt_len, len: x0.len() });
    }
    let mut tokens = x0.to_vec();
    if t > 0.0 {
        if prompt_len == x0.len() {
            return Err(DiffusionError::DegenerateInput);
        }
        let mut any = false;
        for tok in tokens.iter_mut().take(x0.len()).skip(prompt_len) {
            if rng.gen::<f32>() < t {
                *tok = mask_id;
                any = true;
            }
        }
        if !any {
            let pos = rng.gen_range(prompt_len..x0.len());
            tokens[pos] = mask_id;
        }
    }
    Ok(NoisyState { tokens, t, prompt_len, mask_id })
}

/// Build a strictly noisier state by masking additional visible response
/// tokens: the output's masked set always contains the input's.
pub fn further_mask(
    xt: &NoisyState,
    target_ratio: f32,
    rng: &mut ChaCha8Rng,
) -> Result<NoisyState, DiffusionError> {
    let resp = xt.response_len();
    let current = xt.masked_count();
    let current_ratio = xt.mask_ratio();
    if target_ratio < current_ratio {
        return Err(DiffusionError::RatioOrder { target: target_ratio, current: current_ratio });
    }
    let target_count = ((target_ratio as f64 * resp as f64).round() as usize).clamp(current, resp);
    let mut tokens = xt.tokens.clone();
    let extra = target_count - current;
    if extra > 0 {
        let mut visible: Vec<usize> = (xt.prompt_len..xt.tokens.len())
            .filter(|&i| xt.tokens[i] != xt.mask_id)
            .collect();
        for i in 0..extra {
            let j = rng.gen_range(i..visible.len());
            visible.swap(i, j);
            tokens[visible[i]] = xt.mask_id;
        }
    }
    Ok(NoisyState { tokens, t: target_ratio, prompt_len: xt.prompt_len, mask_id: xt.mask_id })
}

/// Starting ratio for the noisier pre-anchor state: min(1, max(s_pre·t, t)).
pub fn pre_anchor_ratio(t: f32, s_pre: f32) -> f32 {
    (s_pre * t).max(t).min(1.0)
}

/// Weighted masked cross-entropy: ω(t) · Σ over masked response positions
/// of −log softmax(logits)[i, x0[i]].
pub fn mdlm_loss(
    tape: &mut Tape,
    logits: &Tensor,
    x0: &[u32],
    state: &NoisyState,
    schedule: &NoiseSchedule,
) -> Result<Tensor, TensorError> {
    mdlm_loss_with_weight(tape, logits, x0, state, schedule.weight(state.t))
}

pub fn mdlm_loss_with_weight(
    tape: &mut Tape,
    logits: &Tensor,
    x0: &[u32],
    state: &NoisyState,
    weight: f32,
) -> Result<Tensor, TensorError> {
    let positions = state.masked_positions();
    let ce = tape.cross_entropy_masked(logits, x0, &positions)?;
    Ok(tape.scale(&ce, weight))
}

/// Per-masked-position confidence (max softmax probability) and argmax
/// class from a raw logits buffer.
pub(crate) fn confidences(
    logits: &[f32],
    vocab: usize,
    positions: &[usize],
) -> Vec<(usize, f32, u32)> {
    positions
        .iter()
        .map(|&p| {
            let row = &logits[p * vocab..(p + 1) * vocab];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let max = row[best];
            let denom: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            (p, 1.0 / denom, best as u32)
        })
        .collect()
}

/// Unmask the `k_unmask` highest-confidence masked positions (ties broken
/// toward the lowest index), filling each with its argmax token. Already
/// unmasked tokens are never touched.
pub fn denoise_step(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    state: &NoisyState,
    k_unmask: usize,
) -> Result<NoisyState, DiffusionError> {
    let masked = state.masked_positions();
    if k_unmask > masked.len() {
        return Err(DiffusionError::UnmaskBudget { k: k_unmask, masked: masked.len() });
    }
    let mut next = state.clone();
    if k_unmask == 0 {
        return Ok(next);
    }
    let logits = model.forward(fast, &state.tokens)?;
    let mut conf = confidences(&logits, model.cfg.vocab_size, &masked);
    conf.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(p, _, tok) in conf.iter().take(k_unmask) {
        next.tokens[p] = tok;
    }
    next.t = next.mask_ratio();
    Ok(next)
}

/// Progressive denoising from a fully masked response: n_steps rounds with
/// a near-equal per-step unmask budget (remainder spent on the earliest
/// steps). Greedy argmax filling; deterministic.
pub fn generate(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    prompt: &[u32],
    response_len: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<u32>, DiffusionError> {
    assert!(cfg.n_steps >= 1, "sampler needs at least one step");
    let mask_id = model.cfg.vocab().mask_id();
    let mut tokens = prompt.to_vec();
    tokens.extend(std::iter::repeat(mask_id).take(response_len));
    if tokens.len() > model.cfg.max_len {
        return Err(DiffusionError::Model(ModelError::TooLong {
            len: tokens.len(),
            max: model.cfg.max_len,
        }));
    }
    let mut state = NoisyState { tokens, t: 1.0, prompt_len: prompt.len(), mask_id };
    let base = response_len / cfg.n_steps;
    let rem = response_len % cfg.n_steps;
    for s in 0..cfg.n_steps {
        let k = base + usize::from(s < rem);
        if k == 0 {
            continue;
        }
        state = denoise_step(model, fast, &state, k)?;
    }
    debug_assert_eq!(state.masked_count(), 0);
    Ok(state.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseModel, ModelConfig};
    use crate::rng::{stream_rng, stream};

    fn tiny_model() -> BaseModel {
        BaseModel::new(
            ModelConfig { vocab_size: 16, d_model: 16, n_heads: 2, n_layers: 1, max_len: 32, ffn_mult: 2 },
            42,
        )
    }

    #[test]
    fn forward_mask_endpoints() {
        let x0: Vec<u32> = (0..12).collect();
        let mut rng = stream_rng(1, &[stream::ANCHOR]);
        let clean = forward_mask(&x0, 0.0, 2, 99, &mut rng).unwrap();
        assert_eq!(clean.tokens, x0);
        assert!(clean.masked_positions().is_empty());

        let noisy = forward_mask(&x0, 1.0, 2, 99, &mut rng).unwrap();
        assert_eq!(noisy.masked_count(), 10);
        assert_eq!(&noisy.tokens[..2], &x0[..2]);
    }

    #[test]
    fn forward_mask_forces_at_least_one() {
        let x0: Vec<u32> = (0..8).collect();
        for trial in 0..200 {
            let mut rng = stream_rng(trial, &[stream::ANCHOR, 7]);
            let st = forward_mask(&x0, 0.01, 0, 99, &mut rng).unwrap();
            assert!(st.masked_count() >= 1);
        }
    }

    #[test]
    fn forward_mask_degenerate_response() {
        let x0: Vec<u32> = (0..4).collect();
        let mut rng = stream_rng(0, &[stream::ANCHOR]);
        assert!(matches!(
            forward_mask(&x0, 0.5, 4, 99, &mut rng),
            Err(DiffusionError::DegenerateInput)
        ));
    }

    #[test]
    fn further_mask_noop_saturation_and_order() {
        let x0: Vec<u32> = (0..10).collect();
        let mut rng = stream_rng(3, &[stream::INNER]);
        let st = forward_mask(&x0, 0.4, 0, 99, &mut rng).unwrap();
        let same = further_mask(&st, st.mask_ratio(), &mut rng).unwrap();
        assert_eq!(same.tokens, st.tokens);

        let full = further_mask(&st, 1.0, &mut rng).unwrap();
        assert_eq!(full.masked_count(), 10);

        if st.mask_ratio() > 0.0 {
            assert!(matches!(
                further_mask(&st, st.mask_ratio() / 2.0 - 0.01, &mut rng),
                Err(DiffusionError::RatioOrder { .. })
            ));
        }
    }

    #[test]
    fn further_mask_nests() {
        let x0: Vec<u32> = (0..20).collect();
        for trial in 0..100 {
            let mut rng = stream_rng(trial, &[stream::INNER, 5]);
            let st = forward_mask(&x0, 0.3, 3, 99, &mut rng).unwrap();
            let noisier = further_mask(&st, 0.8, &mut rng).unwrap();
            for p in st.masked_positions() {
                assert_eq!(noisier.tokens[p], 99);
            }
            assert!(noisier.masked_count() >= st.masked_count());
        }
    }

    #[test]
    fn pre_anchor_ratio_formula() {
        assert!((pre_anchor_ratio(0.4, 1.5) - 0.6).abs() < 1e-6);
        assert_eq!(pre_anchor_ratio(0.8, 1.5), 1.0);
        assert_eq!(pre_anchor_ratio(0.5, 1.0), 0.5);
    }

    #[test]
    fn mdlm_loss_uniform_and_empty() {
        let vocab = 64usize;
        let len = 16usize;
        let mut tape = Tape::new();
        let logits = tape.input(vec![0.0; len * vocab], &[len, vocab]);
        let x0: Vec<u32> = (0..len as u32).map(|i| i % vocab as u32).collect();
        let mut tokens = x0.clone();
        for p in 0..10 {
            tokens[p] = vocab as u32;
        }
        let state = NoisyState { tokens, t: 0.5, prompt_len: 0, mask_id: vocab as u32 };
        let schedule = NoiseSchedule::default();
        let loss = mdlm_loss(&mut tape, &logits, &x0, &state, &schedule).unwrap();
        let expect = 2.0 * 10.0 * (vocab as f32).ln();
        assert!((tape.scalar(&loss) - expect).abs() < 1e-3, "{}", tape.scalar(&loss));

        let clean = NoisyState { tokens: x0.clone(), t: 0.5, prompt_len: 0, mask_id: vocab as u32 };
        let zero = mdlm_loss(&mut tape, &logits, &x0, &clean, &schedule).unwrap();
        assert_eq!(tape.scalar(&zero), 0.0);
    }

    #[test]
    fn mdlm_loss_doubling_weight_doubles_loss() {
        let vocab = 8usize;
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..4 * vocab).map(|i| ((i * 37 % 11) as f32) / 3.0 - 1.0).collect();
        let logits = tape.input(data, &[4, vocab]);
        let x0 = vec![1, 2, 3, 4];
        let state = NoisyState { tokens: vec![8, 2, 8, 4], t: 0.5, prompt_len: 0, mask_id: 8 };
        let l1 = mdlm_loss_with_weight(&mut tape, &logits, &x0, &state, 1.7).unwrap();
        let l2 = mdlm_loss_with_weight(&mut tape, &logits, &x0, &state, 3.4).unwrap();
        assert_eq!(tape.scalar(&l2), 2.0 * tape.scalar(&l1));
    }

    #[test]
    fn denoise_step_matches_direct_forward_oracle() {
        let model = tiny_model();
        let mask = model.cfg.vocab().mask_id();
        let tokens = vec![1, 2, mask, 4, mask, 6, mask, 8];
        let state = NoisyState { tokens: tokens.clone(), t: 0.375, prompt_len: 2, mask_id: mask };
        let next = denoise_step(&model, None, &state, 2).unwrap();

        // Oracle: single forward pass, rank masked positions by max softmax.
        let logits = model.forward(None, &tokens).unwrap();
        let v = model.cfg.vocab_size;
        let mut ranked = confidences(&logits, v, &state.masked_positions());
        ranked.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<(usize, u32)> = ranked.iter().take(2).map(|&(p, _, tok)| (p, tok)).collect();
        for (p, tok) in expect {
            assert_eq!(next.tokens[p], tok);
        }
        // Unmasked positions identical before/after.
        for (i, (&a, &b)) in tokens.iter().zip(&next.tokens).enumerate() {
            if a != mask {
                assert_eq!(a, b, "position {i} changed");
            }
        }
        assert_eq!(next.masked_count(), 1);
        // One mask remaining, k = 1 finishes the job.
        let done = denoise_step(&model, None, &next, 1).unwrap();
        assert_eq!(done.masked_count(), 0);
    }

    #[test]
    fn denoise_step_budget_error() {
        let model = tiny_model();
        let mask = model.cfg.vocab().mask_id();
        let state = NoisyState { tokens: vec![1, mask], t: 0.5, prompt_len: 1, mask_id: mask };
        assert!(matches!(
            denoise_step(&model, None, &state, 2),
            Err(DiffusionError::UnmaskBudget { .. })
        ));
    }

    #[test]
    fn generate_is_mask_free_and_deterministic() {
        let model = tiny_model();
        let prompt = vec![3, 1, 4];
        let a = generate(&model, None, &prompt, 6, &SamplerConfig { n_steps: 6 }).unwrap();
        let b = generate(&model, None, &prompt, 6, &SamplerConfig { n_steps: 6 }).unwrap();
        assert_eq!(a, b);
        let mask = model.cfg.vocab().mask_id();
        assert!(a.iter().all(|&t| t != mask));
        assert_eq!(&a[..3], &prompt[..]);

        // Single-shot fill equals one argmax pass.
        let c = generate(&model, None, &prompt, 6, &SamplerConfig { n_steps: 1 }).unwrap();
        assert!(c.iter().all(|&t| t != mask));
    }
}
