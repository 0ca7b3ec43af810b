//! Property tests for the forward process, sampler, and task generators.

use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use memdlm_core::diffusion::{
    denoise_step, forward_mask, further_mask, pre_anchor_ratio, NoisyState, SamplerConfig,
};
use memdlm_core::model::{BaseModel, ModelConfig};
use memdlm_core::rng::{stream_rng, stream};
use memdlm_core::taskgen::{generate as gen_task, TaskKind, TaskSpec};

fn micro_model() -> BaseModel {
    BaseModel::new(
        ModelConfig { vocab_size: 16, d_model: 16, n_heads: 2, n_layers: 1, max_len: 24, ffn_mult: 2 },
        123,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pre_anchor_ratio_matches_formula(t in 0.0f32..=1.0, s in 0.01f32..4.0) {
        let r = pre_anchor_ratio(t, s);
        prop_assert_eq!(r, (s * t).max(t).min(1.0));
        prop_assert!(r >= t && r <= 1.0);
    }

    #[test]
    fn further_mask_nests_and_hits_count(seed in 0u64..10_000, t in 0.05f32..0.9, extra in 0.0f32..1.0) {
        let x0: Vec<u32> = (0..24).map(|i| i % 16).collect();
        let mut rng = stream_rng(seed, &[stream::INNER, 42]);
        let state = forward_mask(&x0, t, 4, 99, &mut rng).unwrap();
        let target = (state.mask_ratio() + extra * (1.0 - state.mask_ratio())).min(1.0);
        let noisier = further_mask(&state, target, &mut rng).unwrap();
        for p in state.masked_positions() {
            prop_assert_eq!(noisier.tokens[p], 99);
        }
        let expect = ((target as f64) * 20.0).round() as usize;
        prop_assert_eq!(noisier.masked_count(), expect.clamp(state.masked_count(), 20));
    }

    #[test]
    fn forward_mask_never_touches_prompt(seed in 0u64..10_000, t in 0.0f32..=1.0) {
        let x0: Vec<u32> = (0..16).map(|i| i % 16).collect();
        let mut rng = stream_rng(seed, &[stream::ANCHOR, 7]);
        let state = forward_mask(&x0, t, 6, 99, &mut rng).unwrap();
        prop_assert_eq!(&state.tokens[..6], &x0[..6]);
        if t > 0.0 {
            prop_assert!(state.masked_count() >= 1);
        }
    }
}

#[test]
fn generate_trajectories_are_monotone_and_immutable() {
    let model = micro_model();
    let mask = model.cfg.vocab().mask_id();
    for case in 0..1000u64 {
        let mut rng = stream_rng(case, &[stream::PROBE, 5]);
        let plen = 2 + (case as usize % 4);
        let rlen = 4 + (case as usize % 8);
        let prompt: Vec<u32> = (0..plen).map(|_| rng.gen_range(0..16)).collect();
        let mut tokens = prompt.clone();
        tokens.extend(std::iter::repeat(mask).take(rlen));
        let mut state = NoisyState { tokens, t: 1.0, prompt_len: plen, mask_id: mask };

        let n_steps = 1 + (case as usize % 5);
        let cfg = SamplerConfig { n_steps };
        let base = rlen / cfg.n_steps;
        let rem = rlen % cfg.n_steps;
        let mut prev_masked = state.masked_count();
        for s in 0..cfg.n_steps {
            let k = base + usize::from(s < rem);
            if k == 0 {
                continue;
            }
            let filled: Vec<(usize, u32)> = state
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, &tok)| tok != mask)
                .map(|(i, &tok)| (i, tok))
                .collect();
            state = denoise_step(&model, None, &state, k).unwrap();
            // Strictly decreasing masked set.
            assert_eq!(state.masked_count(), prev_masked - k, "case {case}");
            prev_masked = state.masked_count();
            // Previously unmasked tokens are immutable.
            for (i, tok) in filled {
                assert_eq!(state.tokens[i], tok, "case {case} position {i}");
            }
        }
        assert_eq!(state.masked_count(), 0, "case {case}");
    }
}

#[test]
fn forward_mask_count_is_binomially_calibrated() {
    // Mean mask count over 10k trials must land in the binomial 99.9% band
    // for the sample mean.
    let n = 1000usize;
    let t = 0.5f32;
    let trials = 10_000u64;
    let x0: Vec<u32> = (0..n as u32).collect();
    let mut total = 0u64;
    for trial in 0..trials {
        let mut rng = stream_rng(trial, &[stream::ANCHOR, 99]);
        let state = forward_mask(&x0, t, 0, u32::MAX, &mut rng).unwrap();
        total += state.masked_count() as u64;
    }
    let mean = total as f64 / trials as f64;
    let expect = n as f64 * t as f64;
    let std_mean = (n as f64 * 0.5 * 0.5 / trials as f64).sqrt();
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - 0.001 / 2.0);
    assert!(
        (mean - expect).abs() <= z * std_mean,
        "mean {mean} outside 99.9% band around {expect} (±{})",
        z * std_mean
    );
}

#[test]
fn kv_needle_slots_are_uniform() {
    // Chi-square over the discrete slot grid across 10k instances.
    let spec = TaskSpec {
        context_len: 34,
        n_pairs: 1,
        value_width: 1,
        count: 10_000,
        seed: 5150,
        ..TaskSpec::new(TaskKind::KvNiah, 64)
    };
    let n_slots = (spec.context_len - 2) / 2;
    let a = spec.alphabets.clone();
    let mut counts = vec![0u64; n_slots];
    for pair in gen_task(&spec).unwrap() {
        let key = *pair.prompt.last().unwrap();
        let pos = pair.prompt[..spec.context_len - 2].iter().position(|&t| t == key).unwrap();
        assert_eq!(pos % 2, 0, "needles sit on the slot grid");
        assert!(a.keys.contains(&key));
        counts[pos / 2] += 1;
    }
    let expect = spec.count as f64 / n_slots as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let crit = ChiSquared::new((n_slots - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= critical {crit} (p <= 0.001)");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn toks_generation_round_trips(seed in 0u64..5000) {
        let spec = TaskSpec {
            count: 3,
            seed,
            context_len: 24,
            n_pairs: 2,
            value_width: 2,
            ..TaskSpec::new(TaskKind::KvNiah, 64)
        };
        let pairs = gen_task(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.toks");
        memdlm_core::taskgen::write_toks(&path, 64, &pairs).unwrap();
        let (v, back) = memdlm_core::taskgen::read_toks(&path).unwrap();
        prop_assert_eq!(v, 64);
        prop_assert_eq!(back, pairs);
    }
}
