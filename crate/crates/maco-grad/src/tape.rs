use crate::error::GradError;
use crate::tensor::Tensor;
use crate::NORM_EPS;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// C = A * B^T with A (m,k) and B (n,k).
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// a + scale * bias with a constant bias matrix and a learnable 1x1 scale.
    AddScaledConst { a: Var, bias: Vec<f64>, scale: Var },
    Tanh { a: Var },
    ScaledTanh { a: Var, beta: f64 },
    Relu { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    BroadcastRows { a: Var, copies: usize },
    MaskedSoftmax { a: Var, mask: Vec<bool> },
    RmsNorm { a: Var, gain: Var },
    InstanceNorm { a: Var, gain: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    /// Scalar sum of ln(a[r,c]) over the picked entries.
    GatherLogSum { a: Var, picks: Vec<(usize, usize)> },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

/// Gradients of one backward pass, aligned with tape nodes.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`. Empty slice if `v` never
    /// received a contribution (unused in the graph below the root).
    pub fn of(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

/// Record of forward operations; nodes only reference earlier nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── Raw matmul kernels ──────────────────────────────────────────────────────

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// C += A * B^T with A (m,k), B (n,k).
fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// C += A^T * B with A (m,k), B (m,n), C (k,n).
fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        [self.nodes[v.0].rows, self.nodes[v.0].cols]
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn value_at(&self, v: Var, row: usize, col: usize) -> f64 {
        let n = &self.nodes[v.0];
        n.values[row * n.cols + col]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.values.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op, name: &'static str) -> Result<Var, GradError> {
        debug_assert_eq!(values.len(), rows * cols);
        if !values.iter().all(|x| x.is_finite()) {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node { rows, cols, values, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Forward operations ──────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> Result<Var, GradError> {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, "leaf")
    }

    pub fn constant_scalar(&mut self, x: f64) -> Result<Var, GradError> {
        self.push(1, 1, vec![x], Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (k2, n) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", m, k, k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        self.push(m, n, out, Op::MatMul { a, b }, "matmul")
    }

    /// a (m,k) times b (n,k) transposed, giving (m,n).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (n, k2) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{}x{} * ({}x{})^T", m, k, n, k2),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        self.push(m, n, out, Op::MatMulNt { a, b }, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if (r, c) != (self.nodes[b.0].rows, self.nodes[b.0].cols) {
            return Err(GradError::ShapeMismatch {
                op: "add",
                detail: format!("{}x{} + {}x{}", r, c, self.nodes[b.0].rows, self.nodes[b.0].cols),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, out, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let (r, cc) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(r, cc, out, Op::Scale { a, c }, "scale")
    }

    /// a + scale * bias where bias is constant and scale is a learnable 1x1 node.
    pub fn add_scaled_const(&mut self, a: Var, bias: &Tensor, scale: Var) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if [r, c] != bias.shape() {
            return Err(GradError::ShapeMismatch {
                op: "add_scaled_const",
                detail: format!("{}x{} + bias {}x{}", r, c, bias.rows(), bias.cols()),
            });
        }
        let s = self.nodes[scale.0].values[0];
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(bias.data())
            .map(|(x, b)| x + s * b)
            .collect();
        self.push(r, c, out, Op::AddScaledConst { a, bias: bias.data().to_vec(), scale }, "add_scaled_const")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        self.push(r, c, out, Op::Tanh { a }, "tanh")
    }

    /// beta * tanh(x), a saturating clip to (-beta, beta).
    pub fn scaled_tanh_clip(&mut self, a: Var, beta: f64) -> Result<Var, GradError> {
        if !(beta > 0.0) {
            return Err(GradError::ShapeMismatch {
                op: "scaled_tanh_clip",
                detail: format!("beta must be positive, got {beta}"),
            });
        }
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| beta * x.tanh()).collect();
        self.push(r, c, out, Op::ScaledTanh { a, beta }, "scaled_tanh_clip")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu { a }, "relu")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        if parts.is_empty() {
            return Err(GradError::EmptyConcat);
        }
        let rows = self.nodes[parts[0].0].rows;
        let mut cols = 0;
        for p in parts {
            if self.nodes[p.0].rows != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, self.nodes[p.0].rows),
                });
            }
            cols += self.nodes[p.0].cols;
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for p in parts {
            let pc = self.nodes[p.0].cols;
            for r in 0..rows {
                out[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&self.nodes[p.0].values[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        self.push(rows, cols, out, Op::ConcatCols { parts: parts.to_vec() }, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        if parts.is_empty() {
            return Err(GradError::EmptyConcat);
        }
        let cols = self.nodes[parts[0].0].cols;
        let mut rows = 0;
        for p in parts {
            if self.nodes[p.0].cols != cols {
                return Err(GradError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("col counts {} vs {}", cols, self.nodes[p.0].cols),
                });
            }
            rows += self.nodes[p.0].rows;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        self.push(rows, cols, out, Op::ConcatRows { parts: parts.to_vec() }, "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if start + len > c {
            return Err(GradError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("range {}..{} of {} cols", start, start + len, c),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&self.nodes[a.0].values[row * c + start..row * c + start + len]);
        }
        self.push(r, len, out, Op::SliceCols { a, start }, "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if start + len > r {
            return Err(GradError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("range {}..{} of {} rows", start, start + len, r),
            });
        }
        let out = self.nodes[a.0].values[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { a, start }, "slice_rows")
    }

    /// Repeat a 1xN row `copies` times.
    pub fn broadcast_rows(&mut self, a: Var, copies: usize) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if r != 1 {
            return Err(GradError::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("expected a single row, got {r}x{c}"),
            });
        }
        let mut out = Vec::with_capacity(copies * c);
        for _ in 0..copies {
            out.extend_from_slice(&self.nodes[a.0].values);
        }
        self.push(copies, c, out, Op::BroadcastRows { a, copies }, "broadcast_rows")
    }

    /// Row-wise softmax over feasible entries; infeasible entries are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if mask.len() != r * c {
            return Err(GradError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask length {} for {}x{}", mask.len(), r, c),
            });
        }
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let xs = &self.nodes[a.0].values[row * c..(row + 1) * c];
            let ms = &mask[row * c..(row + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (x, &keep) in xs.iter().zip(ms) {
                if keep && *x > max {
                    max = *x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(GradError::FullyMaskedRow { row });
            }
            let mut sum = 0.0;
            for (j, (&x, &keep)) in xs.iter().zip(ms).enumerate() {
                if keep {
                    let e = (x - max).exp();
                    out[row * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if ms[j] {
                    out[row * c + j] /= sum;
                }
            }
        }
        self.push(r, c, out, Op::MaskedSoftmax { a, mask: mask.to_vec() }, "masked_softmax")
    }

    /// Row-wise RMS normalization with a learnable 1xD gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if (self.nodes[gain.0].rows, self.nodes[gain.0].cols) != (1, c) {
            return Err(GradError::ShapeMismatch {
                op: "rms_norm",
                detail: format!(
                    "gain {}x{} for input {}x{}",
                    self.nodes[gain.0].rows, self.nodes[gain.0].cols, r, c
                ),
            });
        }
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let xs = &self.nodes[a.0].values[row * c..(row + 1) * c];
            let mean_sq = xs.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let rms = (mean_sq + NORM_EPS).sqrt();
            for j in 0..c {
                out[row * c + j] = xs[j] / rms * self.nodes[gain.0].values[j];
            }
        }
        self.push(r, c, out, Op::RmsNorm { a, gain }, "rms_norm")
    }

    /// Per-column standardization over the row dimension with a 1xD gain.
    pub fn instance_norm(&mut self, a: Var, gain: Var) -> Result<Var, GradError> {
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        if (self.nodes[gain.0].rows, self.nodes[gain.0].cols) != (1, c) {
            return Err(GradError::ShapeMismatch {
                op: "instance_norm",
                detail: format!(
                    "gain {}x{} for input {}x{}",
                    self.nodes[gain.0].rows, self.nodes[gain.0].cols, r, c
                ),
            });
        }
        let vals = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for col in 0..c {
            let mut mean = 0.0;
            for row in 0..r {
                mean += vals[row * c + col];
            }
            mean /= r as f64;
            let mut var = 0.0;
            for row in 0..r {
                let d = vals[row * c + col] - mean;
                var += d * d;
            }
            var /= r as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            let g = self.nodes[gain.0].values[col];
            for row in 0..r {
                out[row * c + col] = (vals[row * c + col] - mean) * inv * g;
            }
        }
        self.push(r, c, out, Op::InstanceNorm { a, gain }, "instance_norm")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.nodes[a.0].values.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { a }, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.nodes[a.0].values.len();
        let s = self.nodes[a.0].values.iter().sum::<f64>() / n as f64;
        self.push(1, 1, vec![s], Op::MeanAll { a }, "mean_all")
    }

    /// Scalar sum of ln(a[r,c]) over picks; every picked value must be positive.
    pub fn gather_log_sum(&mut self, a: Var, picks: &[(usize, usize)]) -> Result<Var, GradError> {
        let (rows, cols) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let mut s = 0.0;
        for &(row, col) in picks {
            if row >= rows || col >= cols {
                return Err(GradError::IndexOutOfBounds { op: "gather_log_sum", row, col, rows, cols });
            }
            let v = self.nodes[a.0].values[row * cols + col];
            if v <= 0.0 {
                return Err(GradError::NonPositiveLog { row, col, value: v });
            }
            s += v.ln();
        }
        self.push(1, 1, vec![s], Op::GatherLogSum { a, picks: picks.to_vec() }, "gather_log_sum")
    }

    // ── Backward ────────────────────────────────────────────────────────────

    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        self.backward_seeded(root, 1.0)
    }

    /// Reverse pass from a scalar root with an initial output gradient.
    pub fn backward_seeded(&self, root: Var, seed: f64) -> Result<Gradients, GradError> {
        let rn = &self.nodes[root.0];
        if (rn.rows, rn.cols) != (1, 1) {
            return Err(GradError::ScalarRootRequired { rows: rn.rows, cols: rn.cols });
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![seed];
        for i in (0..=root.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            self.accumulate(node, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn ensure(&self, grads: &mut [Vec<f64>], v: Var) {
        if grads[v.0].is_empty() {
            let n = &self.nodes[v.0];
            grads[v.0] = vec![0.0; n.rows * n.cols];
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn accumulate(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].cols;
                self.ensure(grads, *a);
                matmul_nt_into(g, &self.nodes[b.0].values, m, n, k, &mut grads[a.0]);
                self.ensure(grads, *b);
                matmul_tn_into(&self.nodes[a.0].values, g, m, k, n, &mut grads[b.0]);
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].rows;
                self.ensure(grads, *a);
                matmul_into(g, &self.nodes[b.0].values, m, n, k, &mut grads[a.0]);
                self.ensure(grads, *b);
                matmul_tn_into(g, &self.nodes[a.0].values, m, n, k, &mut grads[b.0]);
            }
            Op::Add { a, b } => {
                self.ensure(grads, *a);
                for (d, s) in grads[a.0].iter_mut().zip(g) {
                    *d += s;
                }
                self.ensure(grads, *b);
                for (d, s) in grads[b.0].iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Scale { a, c } => {
                self.ensure(grads, *a);
                for (d, s) in grads[a.0].iter_mut().zip(g) {
                    *d += c * s;
                }
            }
            Op::AddScaledConst { a, bias, scale } => {
                self.ensure(grads, *a);
                for (d, s) in grads[a.0].iter_mut().zip(g) {
                    *d += s;
                }
                self.ensure(grads, *scale);
                grads[scale.0][0] += g.iter().zip(bias).map(|(s, b)| s * b).sum::<f64>();
            }
            Op::Tanh { a } => {
                self.ensure(grads, *a);
                for ((d, s), y) in grads[a.0].iter_mut().zip(g).zip(&node.values) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::ScaledTanh { a, beta } => {
                self.ensure(grads, *a);
                for ((d, s), y) in grads[a.0].iter_mut().zip(g).zip(&node.values) {
                    let t = y / beta;
                    *d += s * beta * (1.0 - t * t);
                }
            }
            Op::Relu { a } => {
                self.ensure(grads, *a);
                for ((d, s), x) in grads[a.0].iter_mut().zip(g).zip(&self.nodes[a.0].values) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let cols = node.cols;
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].cols;
                    self.ensure(grads, *p);
                    for r in 0..node.rows {
                        for j in 0..pc {
                            grads[p.0][r * pc + j] += g[r * cols + off + j];
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].rows * self.nodes[p.0].cols;
                    self.ensure(grads, *p);
                    for j in 0..len {
                        grads[p.0][j] += g[off + j];
                    }
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                let ac = self.nodes[a.0].cols;
                self.ensure(grads, *a);
                for r in 0..node.rows {
                    for j in 0..node.cols {
                        grads[a.0][r * ac + start + j] += g[r * node.cols + j];
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let c = node.cols;
                self.ensure(grads, *a);
                for j in 0..node.rows * c {
                    grads[a.0][start * c + j] += g[j];
                }
            }
            Op::BroadcastRows { a, copies } => {
                let c = node.cols;
                self.ensure(grads, *a);
                for r in 0..*copies {
                    for j in 0..c {
                        grads[a.0][j] += g[r * c + j];
                    }
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                let c = node.cols;
                self.ensure(grads, *a);
                for row in 0..node.rows {
                    let p = &node.values[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(pi, gi)| pi * gi).sum();
                    for j in 0..c {
                        if mask[row * c + j] {
                            grads[a.0][row * c + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { a, gain } => {
                let c = node.cols;
                self.ensure(grads, *a);
                self.ensure(grads, *gain);
                let gains = &self.nodes[gain.0].values;
                for row in 0..node.rows {
                    let xs = &self.nodes[a.0].values[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean_sq = xs.iter().map(|x| x * x).sum::<f64>() / c as f64;
                    let rms = (mean_sq + NORM_EPS).sqrt();
                    let s: f64 = (0..c).map(|j| gr[j] * gains[j] * xs[j]).sum();
                    for j in 0..c {
                        grads[a.0][row * c + j] +=
                            gr[j] * gains[j] / rms - xs[j] * s / (c as f64 * rms * rms * rms);
                        grads[gain.0][j] += gr[j] * xs[j] / rms;
                    }
                }
            }
            Op::InstanceNorm { a, gain } => {
                let (r, c) = (node.rows, node.cols);
                self.ensure(grads, *a);
                self.ensure(grads, *gain);
                let vals = &self.nodes[a.0].values;
                let gains = &self.nodes[gain.0].values;
                for col in 0..c {
                    let mut mean = 0.0;
                    for row in 0..r {
                        mean += vals[row * c + col];
                    }
                    mean /= r as f64;
                    let mut var = 0.0;
                    for row in 0..r {
                        let d = vals[row * c + col] - mean;
                        var += d * d;
                    }
                    var /= r as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let gcol = gains[col];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for row in 0..r {
                        let xhat = (vals[row * c + col] - mean) * inv;
                        let dxhat = g[row * c + col] * gcol;
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        grads[gain.0][col] += g[row * c + col] * xhat;
                    }
                    mean_dxhat /= r as f64;
                    mean_dxhat_xhat /= r as f64;
                    for row in 0..r {
                        let xhat = (vals[row * c + col] - mean) * inv;
                        let dxhat = g[row * c + col] * gcol;
                        grads[a.0][row * c + col] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
            Op::SumAll { a } => {
                self.ensure(grads, *a);
                for d in grads[a.0].iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll { a } => {
                self.ensure(grads, *a);
                let n = grads[a.0].len() as f64;
                for d in grads[a.0].iter_mut() {
                    *d += g[0] / n;
                }
            }
            Op::GatherLogSum { a, picks } => {
                let c = self.nodes[a.0].cols;
                self.ensure(grads, *a);
                for &(row, col) in picks {
                    grads[a.0][row * c + col] += g[0] / self.nodes[a.0].values[row * c + col];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        let t = Tensor::matrix(rows, cols, data).unwrap();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn matmul_small_product() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 3, vec![0.0; 6]);
        let b = leaf(&mut tape, 2, 3, vec![0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(GradError::ShapeMismatch { .. })));
    }

    #[test]
    fn masked_softmax_matches_closed_form() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 3, vec![2.0, 1.0, 123.0]);
        let p = tape.masked_softmax(a, &[true, true, false]).unwrap();
        let e2 = 2.0f64.exp();
        let e1 = 1.0f64.exp();
        let vals = tape.values(p);
        assert!((vals[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((vals[1] - e1 / (e2 + e1)).abs() < 1e-12);
        assert_eq!(vals[2], 0.0);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let err = tape.masked_softmax(a, &[true, true, false, false]).unwrap_err();
        assert!(matches!(err, GradError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn scaled_tanh_clip_saturates() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 3, vec![3.0, 50.0, -50.0]);
        let y = tape.scaled_tanh_clip(a, 10.0).unwrap();
        let vals = tape.values(y);
        assert!((vals[0] - 10.0 * 3.0f64.tanh()).abs() < 1e-12);
        assert!((vals[1] - 10.0).abs() < 1e-9);
        assert!((vals[2] + 10.0).abs() < 1e-9);
    }

    #[test]
    fn rms_norm_scale_invariant() {
        let mut tape = Tape::new();
        let gain = leaf(&mut tape, 1, 2, vec![1.0, 1.0]);
        let a = leaf(&mut tape, 1, 2, vec![3.0, 4.0]);
        let b = leaf(&mut tape, 1, 2, vec![300.0, 400.0]);
        let na = tape.rms_norm(a, gain).unwrap();
        let nb = tape.rms_norm(b, gain).unwrap();
        for (x, y) in tape.values(na).iter().zip(tape.values(nb)) {
            assert!((x - y).abs() < 1e-6);
        }
        let rms = (12.5f64 + NORM_EPS).sqrt();
        assert!((tape.value_at(na, 0, 0) - 3.0 / rms).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_standardizes_columns() {
        let mut tape = Tape::new();
        let gain = leaf(&mut tape, 1, 2, vec![1.0, 1.0]);
        let a = leaf(&mut tape, 3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        let y = tape.instance_norm(a, gain).unwrap();
        for col in 0..2 {
            let col_vals: Vec<f64> = (0..3).map(|r| tape.value_at(y, r, col)).collect();
            let mean: f64 = col_vals.iter().sum::<f64>() / 3.0;
            let var: f64 = col_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_of_dot_product_is_other_operand() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 3, vec![1.0, 2.0, 3.0]);
        let b = leaf(&mut tape, 1, 3, vec![4.0, 5.0, 6.0]);
        let c = tape.matmul_nt(a, b).unwrap();
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.of(a), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.of(b), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0; 4]);
        assert!(matches!(
            tape.backward(a),
            Err(GradError::ScalarRootRequired { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn unused_leaf_has_empty_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 2, vec![1.0, 2.0]);
        let unused = leaf(&mut tape, 1, 2, vec![7.0, 8.0]);
        let s = tape.sum_all(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.of(unused).is_empty());
        assert_eq!(grads.of(a), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let t = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(tape.leaf(&t), Err(GradError::NonFinite { .. })));

        let a = leaf(&mut tape, 1, 1, vec![1e200]);
        let b = leaf(&mut tape, 1, 1, vec![1e200]);
        assert!(matches!(tape.matmul(a, b), Err(GradError::NonFinite { op: "matmul" })));
    }

    #[test]
    fn gather_log_sum_picks_entries() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![0.5, 0.5, 0.25, 0.75]);
        let s = tape.gather_log_sum(a, &[(0, 1), (1, 0)]).unwrap();
        assert!((tape.values(s)[0] - (0.5f64.ln() + 0.25f64.ln())).abs() < 1e-12);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.of(a), &[0.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn gather_log_sum_rejects_zero_probability() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 2, vec![0.0, 1.0]);
        assert!(matches!(
            tape.gather_log_sum(a, &[(0, 0)]),
            Err(GradError::NonPositiveLog { .. })
        ));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, 2, 1, vec![5.0, 6.0]);
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.values(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(tape.values(back), tape.values(a));
        let rows = tape.concat_rows(&[a, a]).unwrap();
        assert_eq!(tape.shape(rows), [4, 2]);
        let tail = tape.slice_rows(rows, 2, 2).unwrap();
        assert_eq!(tape.values(tail), tape.values(a));
    }
}
