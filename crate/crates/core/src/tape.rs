//! Dense f32 tensors on a reverse-mode gradient tape.
//!
//! The tape is rebuilt per forward pass (define-by-run): callers create a
//! fresh `Tape`, register parameters and inputs, chain ops, call `backward`
//! on a scalar loss, and read gradients back out. Nested differentiation
//! (inner loop w.r.t. fast weights, outer loop w.r.t. base weights) falls
//! out of using disjoint tapes with different `requires_grad` registration.
//!
//! Everything is float32 and row-major. The matmul kernel is
//! `matrixmultiply::sgemm`; all backward rules are local to this module.

use thiserror::Error;

/// Numeric-hygiene constant for layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of bounds for size {size}")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

/// Handle to a tensor stored on a tape. Cheap to clone; the data lives in
/// the tape arena.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub id: usize,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected rank <= 2, got {:?}", self.shape),
        }
    }
}

struct Entry {
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

enum Op {
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    /// out = a · bᵀ with a: [m,k], b: [n,k]
    MatmulNT { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, out: usize },
    /// Row-broadcast bias: x: [r,c], bias: [c]
    AddBias { x: usize, bias: usize, out: usize, rows: usize, cols: usize },
    Scale { x: usize, c: f32, out: usize },
    Gelu { x: usize, out: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, out: usize, rows: usize, cols: usize },
    SoftmaxRows { x: usize, out: usize, rows: usize, cols: usize },
    Embed { table: usize, ids: Vec<usize>, out: usize, dim: usize },
    SliceRows { x: usize, out: usize, start: usize, rows: usize, cols: usize },
    SliceCols { x: usize, out: usize, start: usize, cols_out: usize, cols_in: usize, rows: usize },
    ConcatCols { parts: Vec<(usize, usize)>, out: usize, rows: usize },
    CeMasked { logits: usize, out: usize, targets: Vec<u32>, positions: Vec<usize>, vocab: usize },
    /// KL between teacher (constant probs) and student softmax over listed rows.
    KlMasked { student: usize, out: usize, teacher_probs: Vec<f32>, positions: Vec<usize>, vocab: usize, reverse: bool },
    /// Sum of (1 - cosine) between student rows and constant teacher rows.
    CosMasked { student: usize, out: usize, teacher: Vec<f32>, positions: Vec<usize>, dim: usize },
    MseMasked { student: usize, out: usize, teacher: Vec<f32>, positions: Vec<usize>, dim: usize },
}

/// Reverse-mode gradient tape; also the arena owning all tensor data.
pub struct Tape {
    entries: Vec<Entry>,
    ops: Vec<Op>,
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Stable log-softmax of one row; writes into `out`.
fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - max;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), ops: Vec::new() }
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.entries.len();
        self.entries.push(Entry { data, requires_grad, grad: None });
        Tensor { id, shape }
    }

    /// Register a constant (no gradient will be accumulated for it).
    pub fn input(&mut self, data: Vec<f32>, shape: &[usize]) -> Tensor {
        self.push(data, shape.to_vec(), false)
    }

    /// Register a differentiable leaf. The data is snapshotted into the tape.
    pub fn param(&mut self, data: &[f32], shape: &[usize]) -> Tensor {
        self.push(data.to_vec(), shape.to_vec(), true)
    }

    pub fn value(&self, t: &Tensor) -> &[f32] {
        &self.entries[t.id].data
    }

    pub fn scalar(&self, t: &Tensor) -> f32 {
        debug_assert_eq!(t.numel(), 1);
        self.entries[t.id].data[0]
    }

    /// Gradient accumulated for `t`, if any flowed to it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f32]> {
        self.entries[t.id].grad.as_deref()
    }

    /// Gradient for a differentiable leaf, zeros if nothing flowed.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Vec<f32> {
        match &self.entries[t.id].grad {
            Some(g) => g.clone(),
            None => vec![0.0; t.numel()],
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.entries[id].requires_grad
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = a.rows_cols();
        let (k2, n) = b.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![0.0f32; m * n];
        sgemm(m, k, n, self.value(a), k as isize, 1, self.value(b), n as isize, 1, 0.0, &mut out);
        let rg = self.requires(a.id) || self.requires(b.id);
        let t = self.push(out, vec![m, n], rg);
        self.ops.push(Op::Matmul { a: a.id, b: b.id, out: t.id, m, k, n });
        Ok(t)
    }

    /// a · bᵀ with a: [m,k], b: [n,k] (avoids materializing the transpose).
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = a.rows_cols();
        let (n, k2) = b.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul_nt", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![0.0f32; m * n];
        sgemm(m, k, n, self.value(a), k as isize, 1, self.value(b), 1, k as isize, 0.0, &mut out);
        let rg = self.requires(a.id) || self.requires(b.id);
        let t = self.push(out, vec![m, n], rg);
        self.ops.push(Op::MatmulNT { a: a.id, b: b.id, out: t.id, m, k, n });
        Ok(t)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires(a.id) || self.requires(b.id);
        let t = self.push(out, a.shape.clone(), rg);
        self.ops.push(Op::Add { a: a.id, b: b.id, out: t.id });
        Ok(t)
    }

    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, cols) = x.rows_cols();
        if bias.shape != [cols] {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: x.shape.clone(), rhs: bias.shape.clone() });
        }
        let b = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += b[c];
            }
        }
        let rg = self.requires(x.id) || self.requires(bias.id);
        let t = self.push(out, x.shape.clone(), rg);
        self.ops.push(Op::AddBias { x: x.id, bias: bias.id, out: t.id, rows, cols });
        Ok(t)
    }

    pub fn scale(&mut self, x: &Tensor, c: f32) -> Tensor {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.requires(x.id);
        let t = self.push(out, x.shape.clone(), rg);
        self.ops.push(Op::Scale { x: x.id, c, out: t.id });
        t
    }

    pub fn gelu(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f32> = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.requires(x.id);
        let t = self.push(out, x.shape.clone(), rg);
        self.ops.push(Op::Gelu { x: x.id, out: t.id });
        t
    }

    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, cols) = x.rows_cols();
        if gamma.shape != [cols] || beta.shape != [cols] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: x.shape.clone(), rhs: gamma.shape.clone() });
        }
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let xv = self.value(x);
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let rg = self.requires(x.id) || self.requires(gamma.id) || self.requires(beta.id);
        let t = self.push(out, x.shape.clone(), rg);
        self.ops.push(Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, out: t.id, rows, cols });
        Ok(t)
    }

    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, cols) = x.rows_cols();
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let rg = self.requires(x.id);
        let t = self.push(out, x.shape.clone(), rg);
        self.ops.push(Op::SoftmaxRows { x: x.id, out: t.id, rows, cols });
        Ok(t)
    }

    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor, TensorError> {
        let (vocab, dim) = table.rows_cols();
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::OutOfBounds { op: "embedding_lookup", index: id, size: vocab });
            }
        }
        let tv = self.value(table);
        let mut out = vec![0.0f32; ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            out[r * dim..(r + 1) * dim].copy_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let rg = self.requires(table.id);
        let t = self.push(out, vec![ids.len(), dim], rg);
        self.ops.push(Op::Embed { table: table.id, ids: ids.to_vec(), out: t.id, dim });
        Ok(t)
    }

    pub fn slice_rows(&mut self, x: &Tensor, start: usize, rows: usize) -> Result<Tensor, TensorError> {
        let (total, cols) = x.rows_cols();
        if start + rows > total {
            return Err(TensorError::OutOfBounds { op: "slice_rows", index: start + rows, size: total });
        }
        let out = self.value(x)[start * cols..(start + rows) * cols].to_vec();
        let rg = self.requires(x.id);
        let t = self.push(out, vec![rows, cols], rg);
        self.ops.push(Op::SliceRows { x: x.id, out: t.id, start, rows, cols });
        Ok(t)
    }

    pub fn slice_cols(&mut self, x: &Tensor, start: usize, cols_out: usize) -> Result<Tensor, TensorError> {
        let (rows, cols_in) = x.rows_cols();
        if start + cols_out > cols_in {
            return Err(TensorError::OutOfBounds { op: "slice_cols", index: start + cols_out, size: cols_in });
        }
        let xv = self.value(x);
        let mut out = vec![0.0f32; rows * cols_out];
        for r in 0..rows {
            out[r * cols_out..(r + 1) * cols_out]
                .copy_from_slice(&xv[r * cols_in + start..r * cols_in + start + cols_out]);
        }
        let rg = self.requires(x.id);
        let t = self.push(out, vec![rows, cols_out], rg);
        self.ops.push(Op::SliceCols { x: x.id, out: t.id, start, cols_out, cols_in, rows });
        Ok(t)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (r, c) = p.rows_cols();
            if r != rows {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs: parts[0].shape.clone(), rhs: p.shape.clone() });
            }
            widths.push(c);
            total += c;
        }
        let mut out = vec![0.0f32; rows * total];
        let mut offset = 0usize;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = &self.entries[p.id].data;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|p| self.requires(p.id));
        let t = self.push(out, vec![rows, total], rg);
        let part_ids = parts.iter().zip(&widths).map(|(p, &w)| (p.id, w)).collect();
        self.ops.push(Op::ConcatCols { parts: part_ids, out: t.id, rows });
        Ok(t)
    }

    /// Sum of per-position negative log-softmax at the target ids over the
    /// listed positions. Empty positions give an exact zero with zero grad.
    pub fn cross_entropy_masked(
        &mut self,
        logits: &Tensor,
        targets: &[u32],
        positions: &[usize],
    ) -> Result<Tensor, TensorError> {
        let (len, vocab) = logits.rows_cols();
        for &p in positions {
            if p >= len {
                return Err(TensorError::OutOfBounds { op: "cross_entropy_masked", index: p, size: len });
            }
            if targets[p] as usize >= vocab {
                return Err(TensorError::OutOfBounds { op: "cross_entropy_masked", index: targets[p] as usize, size: vocab });
            }
        }
        let lv = self.value(logits);
        let mut scratch = vec![0.0f32; vocab];
        let mut loss = 0.0f32;
        for &p in positions {
            log_softmax_row(&lv[p * vocab..(p + 1) * vocab], &mut scratch);
            loss -= scratch[targets[p] as usize];
        }
        let rg = self.requires(logits.id);
        let t = self.push(vec![loss], vec![1], rg);
        self.ops.push(Op::CeMasked {
            logits: logits.id,
            out: t.id,
            targets: targets.to_vec(),
            positions: positions.to_vec(),
            vocab,
        });
        Ok(t)
    }

    /// KL(teacher ‖ student) summed over the listed rows; teacher given as
    /// constant probabilities laid out [len × vocab].
    pub fn kl_masked(
        &mut self,
        student_logits: &Tensor,
        teacher_probs: &[f32],
        positions: &[usize],
    ) -> Result<Tensor, TensorError> {
        self.kl_impl(student_logits, teacher_probs, positions, false)
    }

    /// KL(student ‖ teacher) summed over the listed rows.
    pub fn reverse_kl_masked(
        &mut self,
        student_logits: &Tensor,
        teacher_probs: &[f32],
        positions: &[usize],
    ) -> Result<Tensor, TensorError> {
        self.kl_impl(student_logits, teacher_probs, positions, true)
    }

    fn kl_impl(
        &mut self,
        student: &Tensor,
        teacher_probs: &[f32],
        positions: &[usize],
        reverse: bool,
    ) -> Result<Tensor, TensorError> {
        let (len, vocab) = student.rows_cols();
        if teacher_probs.len() != len * vocab {
            return Err(TensorError::ShapeMismatch { op: "kl_masked", lhs: student.shape.clone(), rhs: vec![teacher_probs.len()] });
        }
        for &p in positions {
            if p >= len {
                return Err(TensorError::OutOfBounds { op: "kl_masked", index: p, size: len });
            }
        }
        let sv = self.value(student);
        let mut logp = vec![0.0f32; vocab];
        let mut loss = 0.0f32;
        for &p in positions {
            log_softmax_row(&sv[p * vocab..(p + 1) * vocab], &mut logp);
            let q = &teacher_probs[p * vocab..(p + 1) * vocab];
            if reverse {
                // sum p_s (log p_s - log q)
                for j in 0..vocab {
                    let ps = logp[j].exp();
                    loss += ps * (logp[j] - q[j].max(1e-12).ln());
                }
            } else {
                // sum q (log q - log p_s)
                for j in 0..vocab {
                    if q[j] > 0.0 {
                        loss += q[j] * (q[j].ln() - logp[j]);
                    }
                }
            }
        }
        let rg = self.requires(student.id);
        let t = self.push(vec![loss], vec![1], rg);
        self.ops.push(Op::KlMasked {
            student: student.id,
            out: t.id,
            teacher_probs: teacher_probs.to_vec(),
            positions: positions.to_vec(),
            vocab,
            reverse,
        });
        Ok(t)
    }

    /// Sum over listed rows of (1 - cosine similarity) against constant
    /// teacher rows laid out [len × dim].
    pub fn cosine_masked(
        &mut self,
        student: &Tensor,
        teacher: &[f32],
        positions: &[usize],
    ) -> Result<Tensor, TensorError> {
        let (len, dim) = student.rows_cols();
        if teacher.len() != len * dim {
            return Err(TensorError::ShapeMismatch { op: "cosine_masked", lhs: student.shape.clone(), rhs: vec![teacher.len()] });
        }
        let sv = self.value(student);
        let mut loss = 0.0f32;
        for &p in positions {
            if p >= len {
                return Err(TensorError::OutOfBounds { op: "cosine_masked", index: p, size: len });
            }
            let s = &sv[p * dim..(p + 1) * dim];
            let t = &teacher[p * dim..(p + 1) * dim];
            let dot: f32 = s.iter().zip(t).map(|(a, b)| a * b).sum();
            let ns = s.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let nt = t.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            loss += 1.0 - dot / (ns * nt);
        }
        let rg = self.requires(student.id);
        let out = self.push(vec![loss], vec![1], rg);
        self.ops.push(Op::CosMasked {
            student: student.id,
            out: out.id,
            teacher: teacher.to_vec(),
            positions: positions.to_vec(),
            dim,
        });
        Ok(out)
    }

    /// Sum over listed rows of squared L2 distance to constant teacher rows.
    pub fn mse_masked(
        &mut self,
        student: &Tensor,
        teacher: &[f32],
        positions: &[usize],
    ) -> Result<Tensor, TensorError> {
        let (len, dim) = student.rows_cols();
        if teacher.len() != len * dim {
            return Err(TensorError::ShapeMismatch { op: "mse_masked", lhs: student.shape.clone(), rhs: vec![teacher.len()] });
        }
        let sv = self.value(student);
        let mut loss = 0.0f32;
        for &p in positions {
            if p >= len {
                return Err(TensorError::OutOfBounds { op: "mse_masked", index: p, size: len });
            }
            for j in 0..dim {
                let d = sv[p * dim + j] - teacher[p * dim + j];
                loss += d * d;
            }
        }
        let rg = self.requires(student.id);
        let out = self.push(vec![loss], vec![1], rg);
        self.ops.push(Op::MseMasked {
            student: student.id,
            out: out.id,
            teacher: teacher.to_vec(),
            positions: positions.to_vec(),
            dim,
        });
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────

    fn take_grad(&mut self, id: usize) -> Vec<f32> {
        let n = self.entries[id].data.len();
        self.entries[id].grad.take().unwrap_or_else(|| vec![0.0; n])
    }

    fn put_grad(&mut self, id: usize, g: Vec<f32>) {
        self.entries[id].grad = Some(g);
    }

    fn accum(&mut self, id: usize, contribution: &[f32]) {
        if !self.entries[id].requires_grad {
            return;
        }
        let mut g = self.take_grad(id);
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
        self.put_grad(id, g);
    }

    /// Run the backward pass from a scalar loss. Gradients accumulate into
    /// every entry with `requires_grad`; entries without it never receive a
    /// grad buffer.
    pub fn backward(&mut self, loss: &Tensor) {
        assert_eq!(loss.numel(), 1, "backward needs a scalar loss");
        if !self.entries[loss.id].requires_grad {
            return;
        }
        self.entries[loss.id].grad = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            let op = std::mem::replace(&mut self.ops[i], Op::Scale { x: 0, c: 0.0, out: 0 });
            self.backward_op(&op);
            self.ops[i] = op;
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match *op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    // dA = g · Bᵀ : [m,n]·[n,k]
                    sgemm(m, n, k, &g, n as isize, 1, &self.entries[b].data, 1, n as isize, 1.0, &mut ga);
                    self.put_grad(a, ga);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    // dB = Aᵀ · g : [k,m]·[m,n]
                    sgemm(k, m, n, &self.entries[a].data, 1, k as isize, &g, n as isize, 1, 1.0, &mut gb);
                    self.put_grad(b, gb);
                }
            }
            Op::MatmulNT { a, b, out, m, k, n } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    // dA = g · B : [m,n]·[n,k]
                    sgemm(m, n, k, &g, n as isize, 1, &self.entries[b].data, k as isize, 1, 1.0, &mut ga);
                    self.put_grad(a, ga);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    // dB = gᵀ · A : [n,m]·[m,k]
                    sgemm(n, m, k, &g, 1, n as isize, &self.entries[a].data, k as isize, 1, 1.0, &mut gb);
                    self.put_grad(b, gb);
                }
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                self.accum(a, &g);
                self.accum(b, &g);
            }
            Op::AddBias { x, bias, out, rows, cols } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                self.accum(x, &g);
                if self.requires(bias) {
                    let mut gb = vec![0.0f32; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                    self.accum(bias, &gb);
                }
            }
            Op::Scale { x, c, out } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                let gx: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.accum(x, &gx);
            }
            Op::Gelu { x, out } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                let gx: Vec<f32> = g
                    .iter()
                    .zip(&self.entries[x].data)
                    .map(|(gv, &xv)| gv * gelu_deriv(xv))
                    .collect();
                self.accum(x, &gx);
            }
            Op::LayerNorm { x, gamma, beta, out, rows, cols } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                let xv = self.entries[x].data.clone();
                let gv = self.entries[gamma].data.clone();
                let mut gx = vec![0.0f32; rows * cols];
                let mut ggamma = vec![0.0f32; cols];
                let mut gbeta = vec![0.0f32; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f32>() / cols as f32;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for c in 0..cols {
                        let dxhat = gr[c] * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[c];
                        ggamma[c] += gr[c] * xhat[c];
                        gbeta[c] += gr[c];
                    }
                    let inv = 1.0 / cols as f32;
                    for c in 0..cols {
                        let dxhat = gr[c] * gv[c];
                        gx[r * cols + c] = rstd * (dxhat - inv * sum_dxhat - xhat[c] * inv * sum_dxhat_xhat);
                    }
                }
                self.accum(x, &gx);
                self.accum(gamma, &ggamma);
                self.accum(beta, &gbeta);
            }
            Op::SoftmaxRows { x, out, rows, cols } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                let ov = self.entries[out].data.clone();
                let mut gx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0f32;
                    for c in 0..cols {
                        dot += g[base + c] * ov[base + c];
                    }
                    for c in 0..cols {
                        gx[base + c] = ov[base + c] * (g[base + c] - dot);
                    }
                }
                self.accum(x, &gx);
            }
            Op::Embed { table, ref ids, out, dim } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(table) {
                    return;
                }
                let mut gt = self.take_grad(table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] += g[r * dim + j];
                    }
                }
                self.put_grad(table, gt);
            }
            Op::SliceRows { x, out, start, rows, cols } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let mut gx = self.take_grad(x);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[(start + r) * cols + c] += g[r * cols + c];
                    }
                }
                self.put_grad(x, gx);
            }
            Op::SliceCols { x, out, start, cols_out, cols_in, rows } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(x) {
                    return;
                }
                let mut gx = self.take_grad(x);
                for r in 0..rows {
                    for c in 0..cols_out {
                        gx[r * cols_in + start + c] += g[r * cols_out + c];
                    }
                }
                self.put_grad(x, gx);
            }
            Op::ConcatCols { ref parts, out, rows } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let mut offset = 0usize;
                for &(pid, w) in parts {
                    if self.requires(pid) {
                        let mut gp = self.take_grad(pid);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                        self.put_grad(pid, gp);
                    }
                    offset += w;
                }
            }
            Op::CeMasked { logits, out, ref targets, ref positions, vocab } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(logits) {
                    return;
                }
                let gs = g[0];
                let lv = self.entries[logits].data.clone();
                let mut gl = self.take_grad(logits);
                let mut probs = vec![0.0f32; vocab];
                for &p in positions {
                    let row = &lv[p * vocab..(p + 1) * vocab];
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f32;
                    for j in 0..vocab {
                        probs[j] = (row[j] - max).exp();
                        sum += probs[j];
                    }
                    for j in 0..vocab {
                        gl[p * vocab + j] += gs * (probs[j] / sum - if targets[p] as usize == j { 1.0 } else { 0.0 });
                    }
                }
                self.put_grad(logits, gl);
            }
            Op::KlMasked { student, out, ref teacher_probs, ref positions, vocab, reverse } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(student) {
                    return;
                }
                let gs = g[0];
                let sv = self.entries[student].data.clone();
                let mut gl = self.take_grad(student);
                let mut logp = vec![0.0f32; vocab];
                for &p in positions {
                    log_softmax_row(&sv[p * vocab..(p + 1) * vocab], &mut logp);
                    let q = &teacher_probs[p * vocab..(p + 1) * vocab];
                    if reverse {
                        // d/dz_k = p_k (r_k - sum_j p_j r_j), r = log(p/q)
                        let mut klrow = 0.0f32;
                        let mut r = vec![0.0f32; vocab];
                        for j in 0..vocab {
                            r[j] = logp[j] - q[j].max(1e-12).ln();
                            klrow += logp[j].exp() * r[j];
                        }
                        for j in 0..vocab {
                            gl[p * vocab + j] += gs * logp[j].exp() * (r[j] - klrow);
                        }
                    } else {
                        // d/dz = p_s - q
                        for j in 0..vocab {
                            gl[p * vocab + j] += gs * (logp[j].exp() - q[j]);
                        }
                    }
                }
                self.put_grad(student, gl);
            }
            Op::CosMasked { student, out, ref teacher, ref positions, dim } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(student) {
                    return;
                }
                let gs = g[0];
                let sv = self.entries[student].data.clone();
                let mut gl = self.take_grad(student);
                for &p in positions {
                    let s = &sv[p * dim..(p + 1) * dim];
                    let t = &teacher[p * dim..(p + 1) * dim];
                    let dot: f32 = s.iter().zip(t).map(|(a, b)| a * b).sum();
                    let ns = s.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                    let nt = t.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                    for j in 0..dim {
                        // d(1 - cos)/ds_j
                        let d = t[j] / (ns * nt) - dot * s[j] / (ns * ns * ns * nt);
                        gl[p * dim + j] += gs * (-d);
                    }
                }
                self.put_grad(student, gl);
            }
            Op::MseMasked { student, out, ref teacher, ref positions, dim } => {
                let Some(g) = self.entries[out].grad.clone() else { return };
                if !self.requires(student) {
                    return;
                }
                let gs = g[0];
                let sv = self.entries[student].data.clone();
                let mut gl = self.take_grad(student);
                for &p in positions {
                    for j in 0..dim {
                        gl[p * dim + j] += gs * 2.0 * (sv[p * dim + j] - teacher[p * dim + j]);
                    }
                }
                self.put_grad(student, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new();
        let eye = tape.input(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = tape.input(vec![3.0, -1.0, 2.0, 5.0], &[2, 2]);
        let y = tape.matmul(&eye, &x).unwrap();
        assert_eq!(tape.value(&y), tape.value(&x));
    }

    #[test]
    fn matmul_scalar_grads() {
        let mut tape = Tape::new();
        let a = tape.param(&[2.0], &[1, 1]);
        let b = tape.param(&[3.0], &[1, 1]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(tape.value(&y), &[6.0]);
        tape.backward(&y);
        assert_eq!(tape.grad(&a).unwrap(), &[3.0]);
        assert_eq!(tape.grad(&b).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(vec![0.0; 6], &[2, 3]);
        let b = tape.input(vec![0.0; 8], &[4, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(vec![0.7; 5], &[1, 5]);
        let y = tape.softmax_rows(&x).unwrap();
        for &v in tape.value(&y) {
            assert!(close(v, 0.2, 1e-6));
        }
    }

    #[test]
    fn softmax_large_gap_saturates() {
        let mut tape = Tape::new();
        let x = tape.input(vec![0.0, 200.0], &[1, 2]);
        let y = tape.softmax_rows(&x).unwrap();
        let v = tape.value(&y);
        assert!(v[0] < 1e-6 && v[1] > 1.0 - 1e-6);
        let s: f32 = v.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_nan_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.input(vec![f32::NAN, 1.0], &[1, 2]);
        assert!(matches!(tape.softmax_rows(&x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn ce_uniform_logits_is_positions_times_log_vocab() {
        let vocab = 64usize;
        let len = 12usize;
        let mut tape = Tape::new();
        let logits = tape.param(&vec![0.25; len * vocab], &[len, vocab]);
        let targets: Vec<u32> = (0..len).map(|i| (i % vocab) as u32).collect();
        let positions: Vec<usize> = (0..10).collect();
        let loss = tape.cross_entropy_masked(&logits, &targets, &positions).unwrap();
        let expect = 10.0 * (vocab as f32).ln();
        assert!((tape.scalar(&loss) - expect).abs() < 1e-4, "{}", tape.scalar(&loss));
    }

    #[test]
    fn ce_empty_positions_is_exact_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let logits = tape.param(&[0.3, -0.4, 1.0, 2.0], &[2, 2]);
        let loss = tape.cross_entropy_masked(&logits, &[0, 1], &[]).unwrap();
        assert_eq!(tape.scalar(&loss), 0.0);
        tape.backward(&loss);
        assert_eq!(tape.grad(&logits).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_pre_affine() {
        let mut tape = Tape::new();
        let x = tape.input(vec![5.0; 8], &[1, 8]);
        let gamma = tape.input(vec![1.0; 8], &[8]);
        let beta = tape.input(vec![0.0; 8], &[8]);
        let y = tape.layer_norm(&x, &gamma, &beta).unwrap();
        for &v in tape.value(&y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(vec![0.0], &[1]);
        let y = tape.gelu(&x);
        assert_eq!(tape.value(&y), &[0.0]);
    }

    #[test]
    fn disjoint_tapes_do_not_interfere() {
        let data = vec![1.0, -2.0, 0.5, 3.0];
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a1 = t1.param(&data, &[2, 2]);
        let a2 = t2.param(&data, &[2, 2]);
        let b1 = t1.param(&data, &[2, 2]);
        let y1 = t1.matmul(&a1, &b1).unwrap();
        let s1 = t1.cross_entropy_masked(&y1, &[0, 1], &[0, 1]).unwrap();
        let g2 = t2.gelu(&a2);
        let s2 = t2.cross_entropy_masked(&g2, &[1, 0], &[0]).unwrap();
        t1.backward(&s1);
        t2.backward(&s2);
        // Re-running the first backward's read after the second changes nothing.
        let g_a1 = t1.grad(&a1).unwrap().to_vec();
        assert_eq!(t1.grad(&a1).unwrap(), &g_a1[..]);
        assert!(t2.grad(&a2).is_some());
    }

    #[test]
    fn no_grad_buffer_without_requires_grad() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0], &[1, 2]);
        let w = tape.param(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let y = tape.matmul(&x, &w).unwrap();
        let loss = tape.cross_entropy_masked(&y, &[0], &[0]).unwrap();
        tape.backward(&loss);
        assert!(tape.grad(&x).is_none());
        assert!(tape.grad(&w).is_some());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let a = tape.slice_cols(&x, 0, 1).unwrap();
        let b = tape.slice_cols(&x, 1, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(&y), tape.value(&x));
    }

    #[test]
    fn add_bias_broadcasts_rows() {
        let mut tape = Tape::new();
        let x = tape.param(&[0.0, 0.0, 1.0, 1.0], &[2, 2]);
        let b = tape.param(&[10.0, 20.0], &[2]);
        let y = tape.add_bias(&x, &b).unwrap();
        assert_eq!(tape.value(&y), &[10.0, 20.0, 11.0, 21.0]);
        let loss = tape.mse_masked(&y, &[0.0; 4], &[0, 1]).unwrap();
        tape.backward(&loss);
        let gb = tape.grad(&b).unwrap();
        // d/db = sum over rows of 2*y
        assert!(close(gb[0], 2.0 * (10.0 + 11.0), 1e-5));
        assert!(close(gb[1], 2.0 * (20.0 + 21.0), 1e-5));
    }

    #[test]
    fn kl_self_distillation_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.param(&[0.5, -1.0, 2.0, 0.0, 0.3, -0.3], &[2, 3]);
        let probs = {
            let sm = tape.softmax_rows(&logits).unwrap();
            tape.value(&sm).to_vec()
        };
        let kl = tape.kl_masked(&logits, &probs, &[0, 1]).unwrap();
        assert!(tape.scalar(&kl).abs() < 1e-6);
        let rkl = tape.reverse_kl_masked(&logits, &probs, &[0, 1]).unwrap();
        assert!(tape.scalar(&rkl).abs() < 1e-6);
    }
}
