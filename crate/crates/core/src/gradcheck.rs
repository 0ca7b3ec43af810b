//! Finite-difference verification of every gradient path.
//!
//! The oracle side is an independent f64 mirror of each forward (naive
//! loops, no tape); central differences with step 1e-3 on the mirror are
//! compared against the f32 analytic gradients. The mirror also
//! cross-checks forward values. Distillation checks hold the teacher
//! branch fixed, matching the frozen-teacher gradient contract.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{forward_mask, further_mask, NoiseSchedule};
use crate::model::{
    BaseModel, FastInit, FastKind, FastScope, FastWeights, GradScope, LinearSlot, ModelConfig,
};
use crate::rng::{stream_rng, stream};
use crate::tape::{Tape, LAYER_NORM_EPS};
use crate::trainer::{
    stage1_loss, stage2_loss_with_teacher, teacher_state, InnerLoopConfig, Stage1Target,
    Supervision,
};

const FD_STEP: f64 = 1e-3;
/// Model-level checks use a smaller step: third-derivative truncation at
/// 1e-3 is visible against the 1e-6 floor on transformer-depth losses.
const MODEL_FD_STEP: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    /// Worst violation ratio: |analytic - fd| / (rel·scale + floor), <= 1 passes.
    pub worst: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

fn compare(name: &str, analytic: &[f32], fd: &[f64], rel: f64) -> CheckReport {
    let mut worst = 0.0f64;
    for (&a, &f) in analytic.iter().zip(fd) {
        let a = a as f64;
        let scale = a.abs().max(f.abs());
        let ratio = (a - f).abs() / (rel * scale + ABS_FLOOR);
        worst = worst.max(ratio);
    }
    CheckReport { name: name.to_string(), worst, rel_tol: rel, passed: worst <= 1.0 }
}

fn merge(name: &str, parts: Vec<CheckReport>) -> CheckReport {
    let worst = parts.iter().fold(0.0f64, |w, p| w.max(p.worst));
    let rel = parts.first().map_or(1e-4, |p| p.rel_tol);
    CheckReport { name: name.to_string(), worst, rel_tol: rel, passed: worst <= 1.0 }
}

// ── f64 reference kernels ───────────────────────────────────────────

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn matmul_nt64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm64(x: &[f64], g: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
        }
    }
    out
}

fn softmax_row64(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row64(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - max;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

fn ce_masked64(logits: &[f64], targets: &[u32], positions: &[usize], vocab: usize) -> f64 {
    let mut scratch = vec![0.0; vocab];
    let mut loss = 0.0;
    for &p in positions {
        log_softmax_row64(&logits[p * vocab..(p + 1) * vocab], &mut scratch);
        loss -= scratch[targets[p] as usize];
    }
    loss
}

fn kl_masked64(
    student: &[f64],
    teacher_probs: &[f64],
    positions: &[usize],
    vocab: usize,
    reverse: bool,
) -> f64 {
    let mut logp = vec![0.0; vocab];
    let mut loss = 0.0;
    for &p in positions {
        log_softmax_row64(&student[p * vocab..(p + 1) * vocab], &mut logp);
        let q = &teacher_probs[p * vocab..(p + 1) * vocab];
        for j in 0..vocab {
            if reverse {
                loss += logp[j].exp() * (logp[j] - q[j].max(1e-12).ln());
            } else if q[j] > 0.0 {
                loss += q[j] * (q[j].ln() - logp[j]);
            }
        }
    }
    loss
}

fn cos_masked64(student: &[f64], teacher: &[f64], positions: &[usize], dim: usize) -> f64 {
    let mut loss = 0.0;
    for &p in positions {
        let s = &student[p * dim..(p + 1) * dim];
        let t = &teacher[p * dim..(p + 1) * dim];
        let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
        let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        loss += 1.0 - dot / (ns * nt);
    }
    loss
}

fn mse_masked64(student: &[f64], teacher: &[f64], positions: &[usize], dim: usize) -> f64 {
    let mut loss = 0.0;
    for &p in positions {
        for j in 0..dim {
            let d = student[p * dim + j] - teacher[p * dim + j];
            loss += d * d;
        }
    }
    loss
}

fn mse_all64(out: &[f64], teacher: &[f64]) -> f64 {
    out.iter().zip(teacher).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn up(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ── f64 model mirror ────────────────────────────────────────────────

struct Mirror {
    cfg: ModelConfig,
    params: HashMap<String, Vec<f64>>,
    fast: Vec<(usize, LinearSlot, MirrorFast)>,
    fast_scaling: f64,
    fast_rank: usize,
}

enum MirrorFast {
    LowRank { a: Vec<f64>, b: Vec<f64>, d_in: usize, d_out: usize },
    Dense { delta: Vec<f64>, d_in: usize, d_out: usize },
}

impl Mirror {
    fn new(model: &BaseModel, fast: Option<&FastWeights>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), up(&p.data)))
            .collect();
        let mut entries = Vec::new();
        let mut scaling = 1.0f64;
        let mut rank = 1usize;
        if let Some(fw) = fast {
            scaling = fw.scaling() as f64;
            rank = fw.rank;
            for e in &fw.entries {
                let mf = match &e.kind {
                    FastKind::LowRank { a, b, .. } => MirrorFast::LowRank {
                        a: up(a),
                        b: up(b),
                        d_in: e.d_in,
                        d_out: e.d_out,
                    },
                    FastKind::Dense { delta } => {
                        MirrorFast::Dense { delta: up(delta), d_in: e.d_in, d_out: e.d_out }
                    }
                };
                entries.push((e.layer, e.slot, mf));
            }
        }
        Mirror { cfg: model.cfg.clone(), params, fast: entries, fast_scaling: scaling, fast_rank: rank }
    }

    /// Flat list of fast-weight coordinate buffers in the canonical
    /// parameter order (A before B).
    fn fast_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for (_, _, mf) in &mut self.fast {
            match mf {
                MirrorFast::LowRank { a, b, .. } => {
                    out.push(a);
                    out.push(b);
                }
                MirrorFast::Dense { delta, .. } => out.push(delta),
            }
        }
        out
    }

    fn linear(&self, x: &[f64], rows: usize, layer: usize, slot: LinearSlot) -> Vec<f64> {
        let (w_name, b_name) = match slot {
            LinearSlot::Wq => (format!("block{layer}.attn.wq"), format!("block{layer}.attn.bq")),
            LinearSlot::Wk => (format!("block{layer}.attn.wk"), format!("block{layer}.attn.bk")),
            LinearSlot::Wv => (format!("block{layer}.attn.wv"), format!("block{layer}.attn.bv")),
            LinearSlot::Wo => (format!("block{layer}.attn.wo"), format!("block{layer}.attn.bo")),
            LinearSlot::W1 => (format!("block{layer}.ffn.w1"), format!("block{layer}.ffn.b1")),
            LinearSlot::W2 => (format!("block{layer}.ffn.w2"), format!("block{layer}.ffn.b2")),
        };
        let w = &self.params[&w_name];
        let bias = &self.params[&b_name];
        let d_in = w.len() / bias.len().max(1);
        let d_out = bias.len();
        let mut y = matmul64(x, w, rows, d_in, d_out);
        for (l, s, mf) in &self.fast {
            if *l == layer && *s == slot {
                match mf {
                    MirrorFast::LowRank { a, b, d_in, d_out } => {
                        let xa = matmul64(x, a, rows, *d_in, self.fast_rank);
                        let xab = matmul64(&xa, b, rows, self.fast_rank, *d_out);
                        for (yv, &v) in y.iter_mut().zip(&xab) {
                            *yv += self.fast_scaling * v;
                        }
                    }
                    MirrorFast::Dense { delta, d_in, d_out } => {
                        let xd = matmul64(x, delta, rows, *d_in, *d_out);
                        for (yv, &v) in y.iter_mut().zip(&xd) {
                            *yv += v;
                        }
                    }
                }
            }
        }
        for r in 0..rows {
            for c in 0..d_out {
                y[r * d_out + c] += bias[c];
            }
        }
        y
    }

    /// Full transformer forward; returns (logits, hidden).
    fn forward(&self, tokens: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let len = tokens.len();
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let tok_emb = &self.params["tok_emb"];
        let pos_emb = &self.params["pos_emb"];
        let mut h = vec![0.0f64; len * d];
        for (r, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                h[r * d + c] = tok_emb[tok as usize * d + c] + pos_emb[r * d + c];
            }
        }
        for layer in 0..self.cfg.n_layers {
            let a_in = layer_norm64(
                &h,
                &self.params[&format!("block{layer}.ln1.g")],
                &self.params[&format!("block{layer}.ln1.b")],
                len,
                d,
            );
            let q = self.linear(&a_in, len, layer, LinearSlot::Wq);
            let k = self.linear(&a_in, len, layer, LinearSlot::Wk);
            let v = self.linear(&a_in, len, layer, LinearSlot::Wv);
            let mut attn = vec![0.0f64; len * d];
            let inv_sqrt = 1.0 / (hd as f64).sqrt();
            for head in 0..self.cfg.n_heads {
                let off = head * hd;
                for i in 0..len {
                    let mut scores = vec![0.0f64; len];
                    for (j, score) in scores.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for c in 0..hd {
                            s += q[i * d + off + c] * k[j * d + off + c];
                        }
                        *score = s * inv_sqrt;
                    }
                    let mut probs = vec![0.0f64; len];
                    softmax_row64(&scores, &mut probs);
                    for (j, &p) in probs.iter().enumerate() {
                        for c in 0..hd {
                            attn[i * d + off + c] += p * v[j * d + off + c];
                        }
                    }
                }
            }
            let o = self.linear(&attn, len, layer, LinearSlot::Wo);
            for (hv, &ov) in h.iter_mut().zip(&o) {
                *hv += ov;
            }
            let f_in = layer_norm64(
                &h,
                &self.params[&format!("block{layer}.ln2.g")],
                &self.params[&format!("block{layer}.ln2.b")],
                len,
                d,
            );
            let f1 = self.linear(&f_in, len, layer, LinearSlot::W1);
            let f1a: Vec<f64> = f1.iter().map(|&x| gelu64(x)).collect();
            let f2 = self.linear(&f1a, len, layer, LinearSlot::W2);
            for (hv, &fv) in h.iter_mut().zip(&f2) {
                *hv += fv;
            }
        }
        let hidden = layer_norm64(&h, &self.params["ln_f.g"], &self.params["ln_f.b"], len, d);
        let v = self.cfg.vocab_size;
        let mut logits = matmul64(&hidden, &self.params["out.w"], len, d, v);
        let b_out = &self.params["out.b"];
        for r in 0..len {
            for c in 0..v {
                logits[r * v + c] += b_out[c];
            }
        }
        (logits, hidden)
    }
}

// ── per-op checks ───────────────────────────────────────────────────

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Generic check: FD over every input of a scalar-valued computation; the
/// mirror takes the same inputs in f64.
fn fd_check(
    name: &str,
    inputs: &[Vec<f32>],
    f32_path: &dyn Fn(&[Vec<f32>]) -> (f32, Vec<Vec<f32>>),
    mirror: &dyn Fn(&[Vec<f64>]) -> f64,
    rel: f64,
) -> CheckReport {
    let (loss, grads) = f32_path(inputs);
    let inputs64: Vec<Vec<f64>> = inputs.iter().map(|v| up(v)).collect();

    // The mirror must agree with the f32 forward at the base point.
    let base = mirror(&inputs64);
    let forward_ok = (base - loss as f64).abs() <= 1e-3 * base.abs().max(1.0) + 1e-4;

    let mut analytic: Vec<f32> = Vec::new();
    let mut fd: Vec<f64> = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = inputs64.clone();
            plus[i][j] += FD_STEP;
            let mut minus = inputs64.clone();
            minus[i][j] -= FD_STEP;
            fd.push((mirror(&plus) - mirror(&minus)) / (2.0 * FD_STEP));
            analytic.push(g[j]);
        }
    }
    let mut report = compare(name, &analytic, &fd, rel);
    if !forward_ok {
        report.passed = false;
        report.worst = report.worst.max(1e9);
    }
    report
}

fn op_checks(reports: &mut Vec<CheckReport>) {
    let mut rng = stream_rng(0, &[stream::GRADCHECK]);
    let rel = 1e-4;

    // matmul: loss = Σ (a·b - target)²
    {
        let (m, k, n) = (5usize, 7usize, 4usize);
        let a = rand_vec(&mut rng, m * k, 1.0);
        let b = rand_vec(&mut rng, k * n, 1.0);
        let tgt = rand_vec(&mut rng, m * n, 1.0);
        let tgt64 = up(&tgt);
        let f32_path = |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let ta = tape.param(&ins[0], &[m, k]);
            let tb = tape.param(&ins[1], &[k, n]);
            let y = tape.matmul(&ta, &tb).unwrap();
            let positions: Vec<usize> = (0..m).collect();
            let loss = tape.mse_masked(&y, &tgt, &positions).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&ta), tape.grad_or_zeros(&tb)])
        };
        let mirror = |ins: &[Vec<f64>]| mse_all64(&matmul64(&ins[0], &ins[1], m, k, n), &tgt64);
        reports.push(fd_check("op.matmul", &[a, b], &f32_path, &mirror, rel));
    }

    // matmul_nt
    {
        let (m, k, n) = (4usize, 6usize, 5usize);
        let a = rand_vec(&mut rng, m * k, 1.0);
        let b = rand_vec(&mut rng, n * k, 1.0);
        let tgt = rand_vec(&mut rng, m * n, 1.0);
        let tgt64 = up(&tgt);
        let f32_path = |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let ta = tape.param(&ins[0], &[m, k]);
            let tb = tape.param(&ins[1], &[n, k]);
            let y = tape.matmul_nt(&ta, &tb).unwrap();
            let positions: Vec<usize> = (0..m).collect();
            let loss = tape.mse_masked(&y, &tgt, &positions).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&ta), tape.grad_or_zeros(&tb)])
        };
        let mirror = |ins: &[Vec<f64>]| mse_all64(&matmul_nt64(&ins[0], &ins[1], m, k, n), &tgt64);
        reports.push(fd_check("op.matmul_nt", &[a, b], &f32_path, &mirror, rel));
    }

    // add + scale + add_bias fused into one composite check
    {
        let (r, c) = (6usize, 5usize);
        let a = rand_vec(&mut rng, r * c, 1.0);
        let b = rand_vec(&mut rng, r * c, 1.0);
        let bias = rand_vec(&mut rng, c, 1.0);
        let tgt = rand_vec(&mut rng, r * c, 1.0);
        let tgt64 = up(&tgt);
        let f32_path = |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let ta = tape.param(&ins[0], &[r, c]);
            let tb = tape.param(&ins[1], &[r, c]);
            let tbias = tape.param(&ins[2], &[c]);
            let sum = tape.add(&ta, &tb).unwrap();
            let scaled = tape.scale(&sum, 0.7);
            let y = tape.add_bias(&scaled, &tbias).unwrap();
            let positions: Vec<usize> = (0..r).collect();
            let loss = tape.mse_masked(&y, &tgt, &positions).unwrap();
            tape.backward(&loss);
            (
                tape.scalar(&loss),
                vec![tape.grad_or_zeros(&ta), tape.grad_or_zeros(&tb), tape.grad_or_zeros(&tbias)],
            )
        };
        let mirror = |ins: &[Vec<f64>]| {
            let mut y = vec![0.0; r * c];
            for i in 0..r * c {
                y[i] = 0.7 * (ins[0][i] + ins[1][i]) + ins[2][i % c];
            }
            mse_all64(&y, &tgt64)
        };
        reports.push(fd_check("op.add_scale_bias", &[a, b, bias], &f32_path, &mirror, rel));
    }

    // gelu
    {
        let n = 16usize;
        let x = rand_vec(&mut rng, n, 2.0);
        let tgt = rand_vec(&mut rng, n, 1.0);
        let tgt64 = up(&tgt);
        let f32_path = |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let tx = tape.param(&ins[0], &[1, n]);
            let y = tape.gelu(&tx);
            let loss = tape.mse_masked(&y, &tgt, &[0]).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&tx)])
        };
        let mirror = |ins: &[Vec<f64>]| {
            let y: Vec<f64> = ins[0].iter().map(|&v| gelu64(v)).collect();
            mse_all64(&y, &tgt64)
        };
        reports.push(fd_check("op.gelu", &[x], &f32_path, &mirror, rel));
    }

    // layer_norm
    {
        let (r, c) = (4usize, 8usize);
        let x = rand_vec(&mut rng, r * c, 1.5);
        let g = rand_vec(&mut rng, c, 1.0);
        let b = rand_vec(&mut rng, c, 0.5);
        let tgt = rand_vec(&mut rng, r * c, 1.0);
        let tgt64 = up(&tgt);
        let f32_path = |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let tx = tape.param(&ins[0], &[r, c]);
            let tg = tape.param(&ins[1], &[c]);
            let tb = tape.param(&ins[2], &[c]);
            let y = tape.layer_norm(&tx, &tg, &tb).unwrap();
            let positions: Vec<usize> = (0..r).collect();
            let loss = tape.mse_masked(&y, &tgt, &positions).unwrap();
            tape.backward(&loss);
            (
                tape.scalar(&loss),
                vec![tape.grad_or_zeros(&tx), tape.grad_or_zeros(&tg), tape.grad_or_zeros(&tb)],
            )
        };
        let mirror = |ins: &[Vec<f64>]| {
            mse_all64(&layer_norm64(&ins[0], &ins[1], &ins[2], r, c), &tgt64)
        };
        reports.push(fd_check("op.layer_norm", &[x, g, b], &f32_path, &mirror, rel));
    }

    // softmax_rows
    {
        let (r, c) = (5usize, 7usize);
        let x = rand_vec(&mut rng, r * c, 2.0);
        let tgt = rand_vec(&mut rng, r * c, 0.5);
        let tgt64 = up(&tgt);
        let f32_path = |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let tx = tape.param(&ins[0], &[r, c]);
            let y = tape.softmax_rows(&tx).unwrap();
            let positions: Vec<usize> = (0..r).collect();
            let loss = tape.mse_masked(&y, &tgt, &positions).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&tx)])
        };
        let mirror = |ins: &[Vec<f64>]| {
            let mut y = vec![0.0; r * c];
            for row in 0..r {
                let mut out = vec![0.0; c];
                softmax_row64(&ins[0][row * c..(row + 1) * c], &mut out);
                y[row * c..(row + 1) * c].copy_from_slice(&out);
            }
            mse_all64(&y, &tgt64)
        };
        reports.push(fd_check("op.softmax_rows", &[x], &f32_path, &mirror, rel));
    }

    // embedding + row/col slicing + concat, checked through a small chain
    {
        let (vocab, d) = (6usize, 4usize);
        let table = rand_vec(&mut rng, vocab * d, 1.0);
        let ids = vec![3usize, 0, 5, 3];
        let tgt = rand_vec(&mut rng, ids.len() * d, 1.0);
        let tgt64 = up(&tgt);
        let ids_c = ids.clone();
        let f32_path = move |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let tt = tape.param(&ins[0], &[vocab, d]);
            let e = tape.embedding_lookup(&tt, &ids_c).unwrap();
            let left = tape.slice_cols(&e, 0, 2).unwrap();
            let right = tape.slice_cols(&e, 2, 2).unwrap();
            let y = tape.concat_cols(&[left, right]).unwrap();
            let rows = tape.slice_rows(&y, 0, ids_c.len()).unwrap();
            let positions: Vec<usize> = (0..ids_c.len()).collect();
            let loss = tape.mse_masked(&rows, &tgt, &positions).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&tt)])
        };
        let ids_m = ids.clone();
        let mirror = move |ins: &[Vec<f64>]| {
            let mut y = vec![0.0; ids_m.len() * d];
            for (r, &id) in ids_m.iter().enumerate() {
                y[r * d..(r + 1) * d].copy_from_slice(&ins[0][id * d..(id + 1) * d]);
            }
            mse_all64(&y, &tgt64)
        };
        reports.push(fd_check("op.embed_slice_concat", &[table], &f32_path, &mirror, rel));
    }

    // cross_entropy_masked
    {
        let (len, vocab) = (6usize, 8usize);
        let logits = rand_vec(&mut rng, len * vocab, 2.0);
        let targets: Vec<u32> = (0..len).map(|i| (i * 3 % vocab) as u32).collect();
        let positions = vec![0usize, 2, 5];
        let t2 = targets.clone();
        let p2 = positions.clone();
        let f32_path = move |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let tl = tape.param(&ins[0], &[len, vocab]);
            let loss = tape.cross_entropy_masked(&tl, &t2, &p2).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&tl)])
        };
        let t3 = targets.clone();
        let p3 = positions.clone();
        let mirror = move |ins: &[Vec<f64>]| ce_masked64(&ins[0], &t3, &p3, vocab);
        reports.push(fd_check("op.cross_entropy_masked", &[logits], &f32_path, &mirror, rel));
    }

    // kl / reverse kl / cosine / mse with constant teachers
    {
        let (len, vocab) = (4usize, 6usize);
        let student = rand_vec(&mut rng, len * vocab, 2.0);
        let teacher_logits = rand_vec(&mut rng, len * vocab, 2.0);
        let mut teacher_probs = vec![0.0f32; len * vocab];
        for r in 0..len {
            let mut out = vec![0.0f64; vocab];
            softmax_row64(&up(&teacher_logits[r * vocab..(r + 1) * vocab]), &mut out);
            for c in 0..vocab {
                teacher_probs[r * vocab + c] = out[c] as f32;
            }
        }
        let positions = vec![0usize, 1, 3];
        for reverse in [false, true] {
            let tp = teacher_probs.clone();
            let pos = positions.clone();
            let f32_path = move |ins: &[Vec<f32>]| {
                let mut tape = Tape::new();
                let ts = tape.param(&ins[0], &[len, vocab]);
                let loss = if reverse {
                    tape.reverse_kl_masked(&ts, &tp, &pos).unwrap()
                } else {
                    tape.kl_masked(&ts, &tp, &pos).unwrap()
                };
                tape.backward(&loss);
                (tape.scalar(&loss), vec![tape.grad_or_zeros(&ts)])
            };
            let tp64 = up(&teacher_probs);
            let pos2 = positions.clone();
            let mirror = move |ins: &[Vec<f64>]| kl_masked64(&ins[0], &tp64, &pos2, vocab, reverse);
            let name = if reverse { "op.reverse_kl_masked" } else { "op.kl_masked" };
            reports.push(fd_check(name, &[student.clone()], &f32_path, &mirror, rel));
        }

        let dim = 5usize;
        let s_h = rand_vec(&mut rng, len * dim, 1.0);
        let t_h = rand_vec(&mut rng, len * dim, 1.0);
        let pos = positions.clone();
        let t_h2 = t_h.clone();
        let f32_cos = move |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let ts = tape.param(&ins[0], &[len, dim]);
            let loss = tape.cosine_masked(&ts, &t_h2, &pos).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&ts)])
        };
        let th64 = up(&t_h);
        let pos2 = positions.clone();
        let mirror_cos = move |ins: &[Vec<f64>]| cos_masked64(&ins[0], &th64, &pos2, dim);
        reports.push(fd_check("op.cosine_masked", &[s_h.clone()], &f32_cos, &mirror_cos, rel));

        let t_h3 = t_h.clone();
        let pos3 = positions.clone();
        let f32_mse = move |ins: &[Vec<f32>]| {
            let mut tape = Tape::new();
            let ts = tape.param(&ins[0], &[len, dim]);
            let loss = tape.mse_masked(&ts, &t_h3, &pos3).unwrap();
            tape.backward(&loss);
            (tape.scalar(&loss), vec![tape.grad_or_zeros(&ts)])
        };
        let th64b = up(&t_h);
        let pos4 = positions.clone();
        let mirror_mse = move |ins: &[Vec<f64>]| mse_masked64(&ins[0], &th64b, &pos4, dim);
        reports.push(fd_check("op.mse_masked", &[s_h], &f32_mse, &mirror_mse, rel));
    }
}

// ── model-level checks ──────────────────────────────────────────────

fn micro_setup() -> (BaseModel, InnerLoopConfig, FastWeights) {
    let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: 2, max_len: 16, ffn_mult: 2 };
    let model = BaseModel::new(cfg.clone(), 4242);
    let inner = InnerLoopConfig {
        scope: FastScope { fraction: 0.5, ffn_only: true, full_param: false },
        rank: 2,
        alpha: 4.0,
        fast_init: FastInit::RandomA,
        ..InnerLoopConfig::default()
    };
    let mut fast = inner.make_fast_weights(&cfg, 9);
    // Generic point: both factors nonzero so every gradient path is live.
    let mut rng = stream_rng(1, &[stream::GRADCHECK, 50]);
    for view in fast.param_views_mut() {
        for v in view.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    (model, inner, fast)
}

/// FD over every fast-weight coordinate of a stage loss.
fn check_fast_grad(
    name: &str,
    model: &BaseModel,
    fast: &FastWeights,
    loss_f32: &dyn Fn(&FastWeights) -> (f32, Vec<Vec<f32>>),
    loss_mirror: &dyn Fn(&Mirror) -> f64,
    rel: f64,
) -> CheckReport {
    let (loss, grads) = loss_f32(fast);
    let base_mirror = Mirror::new(model, Some(fast));
    let base = loss_mirror(&base_mirror);
    let forward_ok = (base - loss as f64).abs() <= 1e-3 * base.abs().max(1.0) + 1e-3;

    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    let n_buffers = grads.len();
    for bi in 0..n_buffers {
        for j in 0..grads[bi].len() {
            let mut plus = Mirror::new(model, Some(fast));
            plus.fast_buffers_mut()[bi][j] += MODEL_FD_STEP;
            let lp = loss_mirror(&plus);
            let mut minus = Mirror::new(model, Some(fast));
            minus.fast_buffers_mut()[bi][j] -= MODEL_FD_STEP;
            let lm = loss_mirror(&minus);
            fd.push((lp - lm) / (2.0 * MODEL_FD_STEP));
            analytic.push(grads[bi][j]);
        }
    }
    let mut report = compare(name, &analytic, &fd, rel);
    if !forward_ok {
        report.passed = false;
        report.worst = report.worst.max(1e9);
    }
    report
}

fn model_checks(reports: &mut Vec<CheckReport>) {
    let rel = 1e-3;
    let (model, inner, fast) = micro_setup();
    let mask_id = model.cfg.vocab().mask_id();
    let x0: Vec<u32> = (0..12).map(|i| (i * 7 % 12) as u32).collect();
    let mut rng = stream_rng(3, &[stream::GRADCHECK, 7]);
    let anchor = forward_mask(&x0, 0.5, 2, mask_id, &mut rng).unwrap();
    let pre = further_mask(&anchor, 0.8, &mut rng).unwrap();

    // Stage-1 loss w.r.t. fast weights, both target modes.
    for target in [Stage1Target::BroadClean, Stage1Target::AnchorTokenOnly] {
        let cfg = InnerLoopConfig { stage1_target: target, ..inner.clone() };
        let (pre_c, anchor_c, x0_c) = (pre.clone(), anchor.clone(), x0.clone());
        let model_ref = &model;
        let cfg_c = cfg.clone();
        let loss_f32 = move |fw: &FastWeights| {
            let mut tape = Tape::new();
            let (l, out) =
                stage1_loss(&mut tape, model_ref, fw, &pre_c, &anchor_c, &x0_c, &cfg_c).unwrap();
            tape.backward(&l);
            (tape.scalar(&l), out.fast_handles.iter().map(|h| tape.grad_or_zeros(h)).collect())
        };
        let positions: Vec<usize> = match target {
            Stage1Target::BroadClean => pre.masked_positions(),
            Stage1Target::AnchorTokenOnly => {
                let a: std::collections::HashSet<usize> = anchor.masked_positions().into_iter().collect();
                pre.masked_positions().into_iter().filter(|p| !a.contains(p)).collect()
            }
        };
        let (tokens, x0_m) = (pre.tokens.clone(), x0.clone());
        let vocab = model.cfg.vocab_size;
        let loss_mirror = move |m: &Mirror| {
            let (logits, _) = m.forward(&tokens);
            ce_masked64(&logits, &x0_m, &positions, vocab)
        };
        let name = format!("inner.stage1.{}", target.name());
        reports.push(check_fast_grad(&name, &model, &fast, &loss_f32, &loss_mirror, rel));
    }

    // Stage-2 loss w.r.t. fast weights, every supervision mode, teacher
    // branch frozen at the base point.
    let teacher = teacher_state(&model, &fast, &anchor).unwrap();
    let teacher_logits = model.forward(Some(&fast), &teacher.tokens).unwrap();
    let teacher_hidden = model.hidden_states(Some(&fast), &teacher.tokens).unwrap();
    let vocab = model.cfg.vocab_size;
    let mut teacher_probs64 = vec![0.0f64; teacher_logits.len()];
    for r in 0..teacher_logits.len() / vocab {
        let mut out = vec![0.0f64; vocab];
        softmax_row64(&up(&teacher_logits[r * vocab..(r + 1) * vocab]), &mut out);
        teacher_probs64[r * vocab..(r + 1) * vocab].copy_from_slice(&out);
    }
    let teacher_hidden64 = up(&teacher_hidden);

    for sup in [
        Supervision::CrossEntropy,
        Supervision::KlDistill,
        Supervision::ReverseKlDistill,
        Supervision::HiddenCosine,
        Supervision::HiddenMse,
    ] {
        let cfg = InnerLoopConfig { supervision: sup, ..inner.clone() };
        let (anchor_c, x0_c, teacher_c) = (anchor.clone(), x0.clone(), teacher.clone());
        let model_ref = &model;
        let cfg_c = cfg.clone();
        let loss_f32 = move |fw: &FastWeights| {
            let mut tape = Tape::new();
            let (l, out) = stage2_loss_with_teacher(
                &mut tape, model_ref, fw, &anchor_c, &x0_c, &teacher_c, &cfg_c,
            )
            .unwrap();
            tape.backward(&l);
            (tape.scalar(&l), out.fast_handles.iter().map(|h| tape.grad_or_zeros(h)).collect())
        };
        let positions = anchor.masked_positions();
        let tokens = anchor.tokens.clone();
        let x0_m = x0.clone();
        let tp = teacher_probs64.clone();
        let th = teacher_hidden64.clone();
        let d = model.cfg.d_model;
        let loss_mirror = move |m: &Mirror| {
            let (logits, hidden) = m.forward(&tokens);
            match sup {
                Supervision::CrossEntropy => ce_masked64(&logits, &x0_m, &positions, vocab),
                Supervision::KlDistill => kl_masked64(&logits, &tp, &positions, vocab, false),
                Supervision::ReverseKlDistill => kl_masked64(&logits, &tp, &positions, vocab, true),
                Supervision::HiddenCosine => cos_masked64(&hidden, &th, &positions, d),
                Supervision::HiddenMse => mse_masked64(&hidden, &th, &positions, d),
            }
        };
        let name = format!("inner.stage2.{}", sup.name());
        reports.push(check_fast_grad(&name, &model, &fast, &loss_f32, &loss_mirror, rel));
    }

    // Outer loss w.r.t. θ with the fast weights frozen (first-order
    // contract): FD over a deterministic sample of θ coordinates.
    {
        let schedule = NoiseSchedule::default();
        let weight = schedule.weight(anchor.t);
        let mut tape = Tape::new();
        let fwd = model
            .forward_on_tape(&mut tape, Some(&fast), &anchor.tokens, GradScope::ThetaOnly)
            .unwrap();
        let loss = crate::diffusion::mdlm_loss(&mut tape, &fwd.logits, &x0, &anchor, &schedule).unwrap();
        tape.backward(&loss);
        let loss_val = tape.scalar(&loss);

        let positions = anchor.masked_positions();
        let tokens = anchor.tokens.clone();
        let mirror_loss = |m: &Mirror| {
            let (logits, _) = m.forward(&tokens);
            weight as f64 * ce_masked64(&logits, &x0, &positions, vocab)
        };
        let base_mirror = Mirror::new(&model, Some(&fast));
        let base = mirror_loss(&base_mirror);
        let forward_ok = (base - loss_val as f64).abs() <= 1e-3 * base.abs().max(1.0) + 1e-3;

        let mut coord_rng = stream_rng(5, &[stream::GRADCHECK, 99]);
        let mut analytic = Vec::new();
        let mut fd = Vec::new();
        for (idx, handle) in &fwd.theta_handles {
            let g = tape.grad_or_zeros(handle);
            let n = g.len();
            let samples = n.min(6);
            for _ in 0..samples {
                let j = coord_rng.gen_range(0..n);
                let name = model.params()[*idx].name.clone();
                let mut plus = Mirror::new(&model, Some(&fast));
                plus.params.get_mut(&name).unwrap()[j] += MODEL_FD_STEP;
                let lp = mirror_loss(&plus);
                let mut minus = Mirror::new(&model, Some(&fast));
                minus.params.get_mut(&name).unwrap()[j] -= MODEL_FD_STEP;
                let lm = mirror_loss(&minus);
                fd.push((lp - lm) / (2.0 * MODEL_FD_STEP));
                analytic.push(g[j]);
            }
        }
        let mut report = compare("outer.theta_first_order", &analytic, &fd, rel);
        if !forward_ok {
            report.passed = false;
            report.worst = report.worst.max(1e9);
        }
        reports.push(report);
    }

    // Directional derivative of the logits w.r.t. one adapter entry.
    {
        let tokens = anchor.tokens.clone();
        let mut tape = Tape::new();
        let fwd = model.forward_on_tape(&mut tape, Some(&fast), &tokens, GradScope::FastOnly).unwrap();
        let tgt = vec![0.0f32; fwd.logits.numel()];
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let loss = tape.mse_masked(&fwd.logits, &tgt, &rows).unwrap();
        tape.backward(&loss);
        let g0 = tape.grad_or_zeros(&fwd.fast_handles[0]);

        let mirror_loss = |m: &Mirror| {
            let (logits, _) = m.forward(&tokens);
            logits.iter().map(|v| v * v).sum::<f64>()
        };
        let mut parts = Vec::new();
        for j in [0usize, g0.len() / 2, g0.len() - 1] {
            let mut plus = Mirror::new(&model, Some(&fast));
            plus.fast_buffers_mut()[0][j] += MODEL_FD_STEP;
            let lp = mirror_loss(&plus);
            let mut minus = Mirror::new(&model, Some(&fast));
            minus.fast_buffers_mut()[0][j] -= MODEL_FD_STEP;
            let lm = mirror_loss(&minus);
            let fd = (lp - lm) / (2.0 * MODEL_FD_STEP);
            parts.push(compare("model.adapter_direction", &[g0[j]], &[fd], rel));
        }
        reports.push(merge("model.adapter_direction", parts));
    }
}

/// Run the full finite-difference suite.
pub fn run_suite() -> Vec<CheckReport> {
    let mut reports = Vec::new();
    op_checks(&mut reports);
    model_checks(&mut reports);
    reports
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let reports = run_suite();
        for r in &reports {
            assert!(r.passed, "{} failed: worst ratio {}", r.name, r.worst);
        }
        assert!(reports.len() >= 15);
    }

    #[test]
    fn mirror_forward_matches_f32_model() {
        let (model, _, fast) = micro_setup();
        let tokens: Vec<u32> = vec![1, 5, 9, 12, 0, 3];
        let f32_logits = model.forward(Some(&fast), &tokens).unwrap();
        let (f64_logits, _) = Mirror::new(&model, Some(&fast)).forward(&tokens);
        for (a, b) in f32_logits.iter().zip(&f64_logits) {
            assert!((*a as f64 - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
