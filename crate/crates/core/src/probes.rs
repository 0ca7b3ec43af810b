//! Exposure-bias and retrieval probes.
//!
//! The exposure-bias ratio compares the masked loss under the true forward
//! process (static) against the loss on states drawn from the model's own
//! denoising trajectory (sequential) at matched mask ratios. Retrieval
//! evaluation generates answers with the sampler and scores exact matches
//! per context-length bucket.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::{denoise_step, forward_mask, NoisyState, SamplerConfig};
use crate::inferadapt::{adapt_on_prompt, InferenceAdaptConfig};
use crate::model::{BaseModel, FastWeights};
use crate::rng::{content_tag, stream_rng, stream};
use crate::taskgen::Pair;
use crate::trainer::{masked_ce_per_token, InnerLoopConfig, TrainError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("degenerate probe: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

/// One grid point of the exposure-bias report. The ratio is recorded only
/// when both losses are defined and the static loss is positive.
#[derive(Debug, Clone)]
pub struct ExposurePoint {
    pub t: f32,
    pub l_static: f64,
    pub l_seq: Option<f64>,
    pub r_eb: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExposureBiasReport {
    pub points: Vec<ExposurePoint>,
    pub n_samples: usize,
    pub seed: u64,
}

impl ExposureBiasReport {
    pub fn mean_ratio(&self) -> Option<f64> {
        let ratios: Vec<f64> = self.points.iter().filter_map(|p| p.r_eb).collect();
        if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,l_static,l_seq,r_eb\n");
        for p in &self.points {
            let seq = p.l_seq.map_or(String::new(), |v| v.to_string());
            let r = p.r_eb.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{}", p.t, p.l_static, seq, r);
        }
        s
    }
}

fn full_sequence(pair: &Pair) -> Vec<u32> {
    let mut x0 = pair.prompt.clone();
    x0.extend_from_slice(&pair.response);
    x0
}

/// Mean per-masked-token loss when the response is masked by the true
/// forward process at timestep t. Per-pair rng streams are keyed by pair
/// content, so the result is invariant to pair ordering.
pub fn static_loss(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    pairs: &[Pair],
    t: f32,
    n_samples: usize,
    seed: u64,
) -> Result<f64, ProbeError> {
    if pairs.is_empty() {
        return Err(ProbeError::Degenerate("no evaluation pairs".into()));
    }
    if t <= 0.0 {
        return Err(ProbeError::Degenerate("static loss is undefined at t = 0 (no masks)".into()));
    }
    let mask_id = model.cfg.vocab().mask_id();
    let per_pair: Vec<Result<(u64, f64), ProbeError>> = pairs
        .par_iter()
        .map(|pair| {
            let x0 = full_sequence(pair);
            let tag = content_tag(&x0);
            let mut acc = 0.0f64;
            for s in 0..n_samples as u64 {
                let mut rng = stream_rng(seed, &[stream::PROBE, tag, s]);
                let state = forward_mask(&x0, t, pair.prompt.len(), mask_id, &mut rng)?;
                let (sum, count) = masked_ce_per_token(model, fast, &state, &x0)?;
                acc += sum / count.max(1) as f64;
            }
            Ok((tag, acc / n_samples as f64))
        })
        .collect();
    // Sum in content order so the mean is invariant to pair ordering.
    let mut vals = Vec::with_capacity(pairs.len());
    for r in per_pair {
        vals.push(r?);
    }
    vals.sort_by(|a, b| (a.0, a.1.to_bits()).cmp(&(b.0, b.1.to_bits())));
    let total: f64 = vals.iter().map(|(_, v)| v).sum();
    Ok(total / pairs.len() as f64)
}

/// Run the deterministic sampler from a fully masked response until the
/// mask fraction first reaches <= t; returns the state, or None when the
/// stop point leaves no masked positions to score.
fn trajectory_state_at(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    pair: &Pair,
    t: f32,
    cfg: &SamplerConfig,
) -> Result<Option<NoisyState>, ProbeError> {
    let mask_id = model.cfg.vocab().mask_id();
    let resp = pair.response.len();
    let mut tokens = pair.prompt.clone();
    tokens.extend(std::iter::repeat(mask_id).take(resp));
    let mut state = NoisyState { tokens, t: 1.0, prompt_len: pair.prompt.len(), mask_id };
    let base = resp / cfg.n_steps;
    let rem = resp % cfg.n_steps;
    for s in 0..cfg.n_steps {
        if state.mask_ratio() <= t {
            break;
        }
        let k = (base + usize::from(s < rem)).min(state.masked_count());
        if k == 0 {
            continue;
        }
        state = denoise_step(model, fast, &state, k)?;
    }
    if state.masked_count() == 0 {
        return Ok(None);
    }
    Ok(Some(state))
}

/// Mean per-masked-token loss on states drawn from the model's own
/// iterative trajectory, stopped at mask fraction <= t.
pub fn sequential_loss(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    pairs: &[Pair],
    t: f32,
    cfg: &SamplerConfig,
) -> Result<f64, ProbeError> {
    if pairs.is_empty() {
        return Err(ProbeError::Degenerate("no evaluation pairs".into()));
    }
    if t <= 0.0 {
        return Err(ProbeError::Degenerate("sequential loss is undefined at t = 0".into()));
    }
    let per_pair: Vec<Result<Option<(u64, f64)>, ProbeError>> = pairs
        .par_iter()
        .map(|pair| {
            let x0 = full_sequence(pair);
            match trajectory_state_at(model, fast, pair, t, cfg)? {
                Some(state) => {
                    let (sum, count) = masked_ce_per_token(model, fast, &state, &x0)?;
                    Ok(Some((content_tag(&x0), sum / count.max(1) as f64)))
                }
                None => Ok(None),
            }
        })
        .collect();
    let mut vals = Vec::new();
    for r in per_pair {
        if let Some(v) = r? {
            vals.push(v);
        }
    }
    vals.sort_by(|a, b| (a.0, a.1.to_bits()).cmp(&(b.0, b.1.to_bits())));
    let total: f64 = vals.iter().map(|(_, v)| v).sum();
    let n = vals.len();
    if n == 0 {
        return Err(ProbeError::Degenerate(format!(
            "no trajectory state keeps a masked position at t = {t}"
        )));
    }
    Ok(total / n as f64)
}

/// The default probe grid: t from 1.0 down to 0.1 in steps of 0.1.
pub fn default_grid() -> Vec<f32> {
    (1..=10).rev().map(|i| i as f32 / 10.0).collect()
}

/// Exposure-bias grid sweep. Grid points whose sequential state has no
/// masked positions left are recorded without a ratio.
pub fn exposure_report(
    model: &BaseModel,
    fast: Option<&FastWeights>,
    pairs: &[Pair],
    grid: &[f32],
    n_samples: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ExposureBiasReport, ProbeError> {
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let l_static = static_loss(model, fast, pairs, t, n_samples, seed)?;
        let l_seq = match sequential_loss(model, fast, pairs, t, sampler) {
            Ok(v) => Some(v),
            Err(ProbeError::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        let r_eb = match l_seq {
            Some(seq) if l_static > 0.0 => Some(seq / l_static),
            _ => None,
        };
        points.push(ExposurePoint { t, l_static, l_seq, r_eb });
    }
    Ok(ExposureBiasReport { points, n_samples, seed })
}

// ── retrieval ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BucketAccuracy {
    pub context_len: usize,
    pub total: usize,
    pub correct: usize,
}

impl BucketAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub buckets: Vec<BucketAccuracy>,
}

impl RetrievalReport {
    pub fn overall_accuracy(&self) -> f64 {
        let total: usize = self.buckets.iter().map(|b| b.total).sum();
        let correct: usize = self.buckets.iter().map(|b| b.correct).sum();
        correct as f64 / total.max(1) as f64
    }

    pub fn accuracy_for(&self, context_len: usize) -> Option<f64> {
        self.buckets.iter().find(|b| b.context_len == context_len).map(|b| b.accuracy())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("context_len,total,correct,accuracy\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{}", b.context_len, b.total, b.correct, b.accuracy());
        }
        s
    }
}

/// Generate an answer for every pair (optionally with prompt adaptation)
/// and score exact matches, bucketed by prompt length. Adaptation rng is
/// keyed by prompt content, so pair order does not matter.
pub fn retrieval_eval(
    model: &BaseModel,
    pairs: &[Pair],
    sampler: &SamplerConfig,
    inner_cfg: &InnerLoopConfig,
    infer_cfg: &InferenceAdaptConfig,
    seed: u64,
) -> Result<RetrievalReport, ProbeError> {
    let outcomes: Vec<Result<(usize, bool), ProbeError>> = pairs
        .par_iter()
        .map(|pair| {
            let fast_store;
            let fast: Option<&FastWeights> = if infer_cfg.enabled {
                let mut ws = inner_cfg.make_fast_weights(&model.cfg, seed);
                let mut rng = stream_rng(seed, &[stream::INFER, content_tag(&pair.prompt)]);
                adapt_on_prompt(model, &mut ws, &pair.prompt, infer_cfg, inner_cfg, &mut rng)?;
                fast_store = ws;
                Some(&fast_store)
            } else {
                None
            };
            let generated =
                crate::diffusion::generate(model, fast, &pair.prompt, pair.response.len(), sampler)?;
            let answer = &generated[pair.prompt.len()..];
            Ok((pair.prompt.len(), answer == &pair.response[..]))
        })
        .collect();

    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in outcomes {
        let (len, ok) = r?;
        let e = buckets.entry(len).or_insert((0, 0));
        e.0 += 1;
        if ok {
            e.1 += 1;
        }
    }
    Ok(RetrievalReport {
        buckets: buckets
            .into_iter()
            .map(|(context_len, (total, correct))| BucketAccuracy { context_len, total, correct })
            .collect(),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx.sqrt() * vy.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::{generate as gen_task, TaskKind, TaskSpec};

    fn tiny_model() -> BaseModel {
        BaseModel::new(
            ModelConfig { vocab_size: 64, d_model: 16, n_heads: 2, n_layers: 1, max_len: 48, ffn_mult: 2 },
            77,
        )
    }

    fn tiny_pairs() -> Vec<Pair> {
        let spec = TaskSpec {
            context_len: 24,
            n_pairs: 2,
            value_width: 10,
            count: 6,
            seed: 5,
            ..TaskSpec::new(TaskKind::KvNiah, 64)
        };
        gen_task(&spec).unwrap()
    }

    #[test]
    fn untrained_model_static_loss_near_log_vocab() {
        let model = tiny_model();
        let pairs = tiny_pairs();
        let loss = static_loss(&model, None, &pairs, 0.5, 4, 1).unwrap();
        // Untrained but not exactly uniform; ln 64 ≈ 4.159.
        assert!((loss - (64f64).ln()).abs() < 1.0, "{loss}");
    }

    #[test]
    fn static_loss_rejects_t_zero() {
        let model = tiny_model();
        let pairs = tiny_pairs();
        assert!(matches!(static_loss(&model, None, &pairs, 0.0, 2, 1), Err(ProbeError::Degenerate(_))));
    }

    #[test]
    fn static_loss_is_order_invariant() {
        let model = tiny_model();
        let pairs = tiny_pairs();
        let mut reversed = pairs.clone();
        reversed.reverse();
        let a = static_loss(&model, None, &pairs, 0.5, 3, 9).unwrap();
        let b = static_loss(&model, None, &reversed, 0.5, 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_is_exactly_one_at_full_mask() {
        let model = tiny_model();
        let pairs = tiny_pairs();
        let report =
            exposure_report(&model, None, &pairs, &[1.0], 3, &SamplerConfig { n_steps: 10 }, 2).unwrap();
        assert_eq!(report.points[0].r_eb, Some(1.0));
    }

    #[test]
    fn sequential_equals_static_at_t_one() {
        let model = tiny_model();
        let pairs = tiny_pairs();
        let seq = sequential_loss(&model, None, &pairs, 1.0, &SamplerConfig { n_steps: 10 }).unwrap();
        let stat = static_loss(&model, None, &pairs, 1.0, 1, 123).unwrap();
        assert!((seq - stat).abs() < 1e-9, "{seq} vs {stat}");
    }

    #[test]
    fn retrieval_gold_fed_model_hits_ceiling_and_chance_floor_holds() {
        let model = tiny_model();
        let pairs = tiny_pairs();
        // Feed gold answers: treat the pair's own response as the model
        // output by asking for zero adaptation and checking the bucket math
        // instead (a synthetic report).
        let report = RetrievalReport {
            buckets: vec![BucketAccuracy { context_len: 24, total: pairs.len(), correct: pairs.len() }],
        };
        assert_eq!(report.overall_accuracy(), 1.0);

        // Untrained model on 10-token values: essentially chance, far from 1.
        let inner = InnerLoopConfig::default();
        let infer = InferenceAdaptConfig::default();
        let real = retrieval_eval(&model, &pairs, &SamplerConfig { n_steps: 5 }, &inner, &infer, 3).unwrap();
        assert!(real.overall_accuracy() < 0.5);
        assert_eq!(real.buckets[0].context_len, 24);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-9);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-9);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }
}
