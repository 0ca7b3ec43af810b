//! Inference-time reactivation of the inner loop on the prompt: writes a
//! prompt-specific parametric memory into fast weights before generation.
//! The fast weights live for one response and are reset per prompt.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::NoisyState;
use crate::model::{BaseModel, FastWeights};
use crate::trainer::{inner_adapt, BatchItem, InnerLoopConfig, Supervision, TrainError};

/// Knobs for prompt adaptation. `anchor_ratio` is the target mask ratio of
/// the adapted prompt state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceAdaptConfig {
    pub enabled: bool,
    pub anchor_ratio: f32,
    pub eta: f32,
    pub epochs: usize,
    pub s_pre: f32,
    pub supervision: Supervision,
}

impl Default for InferenceAdaptConfig {
    fn default() -> Self {
        InferenceAdaptConfig {
            enabled: false,
            anchor_ratio: 0.2,
            eta: 0.05,
            epochs: 1,
            s_pre: 1.5,
            supervision: Supervision::CrossEntropy,
        }
    }
}

/// Minimum prompt length for adaptation; below this the prompt carries too
/// few tokens to mask anything meaningful and adaptation is skipped.
pub const MIN_ADAPT_PROMPT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptStatus {
    Adapted,
    Disabled,
    PromptTooShort,
}

/// Reset `fast` and, when enabled, run the two-stage inner loop on a
/// synthetic anchor built from the prompt (the whole prompt is treated as
/// maskable; the true prompt tokens are the clean targets). Returns what
/// happened; on anything but `Adapted` the fast weights are left at zero.
pub fn adapt_on_prompt(
    model: &BaseModel,
    fast: &mut FastWeights,
    prompt: &[u32],
    cfg: &InferenceAdaptConfig,
    inner_cfg: &InnerLoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptStatus, TrainError> {
    fast.reset();
    if !cfg.enabled || cfg.eta == 0.0 {
        return Ok(AdaptStatus::Disabled);
    }
    if prompt.len() < MIN_ADAPT_PROMPT {
        return Ok(AdaptStatus::PromptTooShort);
    }
    let mask_id = model.cfg.vocab().mask_id();
    let n_mask = (((cfg.anchor_ratio as f64) * prompt.len() as f64).round() as usize)
        .clamp(1, prompt.len() - 1);

    // Uniform masked subset of the prompt.
    let mut order: Vec<usize> = (0..prompt.len()).collect();
    for i in 0..n_mask {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let mut tokens = prompt.to_vec();
    for &p in order.iter().take(n_mask) {
        tokens[p] = mask_id;
    }
    let anchor = NoisyState {
        tokens,
        t: n_mask as f32 / prompt.len() as f32,
        prompt_len: 0,
        mask_id,
    };

    let adapted_cfg = InnerLoopConfig {
        eta: cfg.eta,
        s_pre: cfg.s_pre,
        supervision: cfg.supervision,
        ..inner_cfg.clone()
    };
    let batch = vec![BatchItem { x0: prompt.to_vec(), anchor }];
    for _ in 0..cfg.epochs {
        inner_adapt(model, fast, &batch, cfg.anchor_ratio, &adapted_cfg, rng)?;
    }
    Ok(AdaptStatus::Adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FastInit, FastScope, ModelConfig};
    use crate::rng::{stream_rng, stream};

    fn setup() -> (BaseModel, InnerLoopConfig) {
        let model = BaseModel::new(
            ModelConfig { vocab_size: 16, d_model: 16, n_heads: 2, n_layers: 2, max_len: 32, ffn_mult: 2 },
            33,
        );
        let inner = InnerLoopConfig {
            scope: FastScope { fraction: 0.5, ffn_only: true, full_param: false },
            rank: 2,
            alpha: 4.0,
            fast_init: FastInit::RandomA,
            ..InnerLoopConfig::default()
        };
        (model, inner)
    }

    #[test]
    fn disabled_and_eta_zero_leave_zero_weights() {
        let (model, inner) = setup();
        let mut fast = inner.make_fast_weights(&model.cfg, 1);
        let prompt: Vec<u32> = (0..12).map(|i| i % 16).collect();

        let mut rng = stream_rng(0, &[stream::INFER]);
        let off = InferenceAdaptConfig::default();
        assert_eq!(
            adapt_on_prompt(&model, &mut fast, &prompt, &off, &inner, &mut rng).unwrap(),
            AdaptStatus::Disabled
        );
        assert!(fast.is_effectively_zero());

        let null = InferenceAdaptConfig { enabled: true, eta: 0.0, ..off };
        assert_eq!(
            adapt_on_prompt(&model, &mut fast, &prompt, &null, &inner, &mut rng).unwrap(),
            AdaptStatus::Disabled
        );
        assert!(fast.is_effectively_zero());
    }

    #[test]
    fn short_prompt_is_skipped() {
        let (model, inner) = setup();
        let mut fast = inner.make_fast_weights(&model.cfg, 1);
        let cfg = InferenceAdaptConfig { enabled: true, ..Default::default() };
        let mut rng = stream_rng(0, &[stream::INFER]);
        assert_eq!(
            adapt_on_prompt(&model, &mut fast, &[1, 2, 3], &cfg, &inner, &mut rng).unwrap(),
            AdaptStatus::PromptTooShort
        );
        assert!(fast.is_effectively_zero());
    }

    #[test]
    fn per_prompt_isolation() {
        let (model, inner) = setup();
        let cfg = InferenceAdaptConfig { enabled: true, ..Default::default() };
        let prompt_a: Vec<u32> = (0..12).map(|i| i % 16).collect();
        let prompt_b: Vec<u32> = (0..12).map(|i| (i * 3 + 1) % 16).collect();

        // Adapt on A, then on B, versus B from a fresh workspace.
        let mut fast1 = inner.make_fast_weights(&model.cfg, 1);
        let mut rng_a = stream_rng(7, &[stream::INFER, 0]);
        adapt_on_prompt(&model, &mut fast1, &prompt_a, &cfg, &inner, &mut rng_a).unwrap();
        let mut rng_b = stream_rng(7, &[stream::INFER, 1]);
        adapt_on_prompt(&model, &mut fast1, &prompt_b, &cfg, &inner, &mut rng_b).unwrap();

        let mut fast2 = inner.make_fast_weights(&model.cfg, 1);
        let mut rng_b2 = stream_rng(7, &[stream::INFER, 1]);
        adapt_on_prompt(&model, &mut fast2, &prompt_b, &cfg, &inner, &mut rng_b2).unwrap();

        for (a, b) in fast1.param_views().iter().zip(fast2.param_views().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn adaptation_changes_fast_weights_and_masks_only_prompt() {
        let (model, inner) = setup();
        let cfg = InferenceAdaptConfig { enabled: true, ..Default::default() };
        let mut fast = inner.make_fast_weights(&model.cfg, 1);
        let prompt: Vec<u32> = (0..16).map(|i| (i * 5) % 16).collect();
        let mut rng = stream_rng(3, &[stream::INFER]);
        let status = adapt_on_prompt(&model, &mut fast, &prompt, &cfg, &inner, &mut rng).unwrap();
        assert_eq!(status, AdaptStatus::Adapted);
        assert!(!fast.is_effectively_zero());
    }
}
