//! Reverse-mode differentiation over 2-D values.
//!
//! A [`Tape`] records every primitive executed in a forward pass. Leaves borrow
//! their storage from [`Tensor`]s, so registering frozen backbone weights is
//! free. Each node carries a `needs_grad` flag: true iff some trainable leaf
//! reaches it. Backward only visits such nodes and only computes adjoints
//! for inputs that themselves need them, so frozen weights never receive (or
//! cost) a gradient.

use std::borrow::Cow;

use super::kernels::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass for later differentiation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints of the trainable leaves, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if that leaf was trainable and
    /// reachable from the output.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s grad buffer. A leaf with no
    /// gradient (unreachable) contributes zeros.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.wrt(v) {
            Some(g) => tensor.accumulate_grad(g),
            None if tensor.requires_grad() => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
            None => Ok(()),
        }
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.leaves.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node indices whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    /// Registers a tensor as a leaf, borrowing its storage. The leaf is
    /// differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &'a Tensor) -> Result<Var> {
        let (rows, cols) = t.matrix_dims()?;
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an owned constant matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::dim("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("consistent node shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            Layout::RowMajor,
            self.value(b),
            Layout::RowMajor,
            0.0,
            &mut out,
        );
        let g = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), g))
    }

    /// a · bᵀ for a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            Layout::RowMajor,
            self.value(b),
            Layout::Transposed,
            0.0,
            &mut out,
        );
        let g = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(Error::dim("add", &[da.0, da.1], &[db.0, db.1]));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        let g = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(r, c, out, Op::Add(a, b), g))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            let d = self.dims(row);
            return Err(Error::dim("add_row", &[m, n], &[d.0, d.1]));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            add_into(chunk, r);
        }
        let g = self.needs_grad(a) || self.needs_grad(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let (r, cc) = self.dims(a);
        let g = self.needs_grad(a);
        Ok(self.push(r, cc, out, Op::Scale(a, c), g))
    }

    /// Multiplies every entry of `a` by the 1×1 value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            let d = self.dims(s);
            return Err(Error::dim("scale_by", &[1, 1], &[d.0, d.1]));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let (r, c) = self.dims(a);
        let g = self.needs_grad(a) || self.needs_grad(s);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), g))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let (r, c) = self.dims(a);
        let g = self.needs_grad(a);
        Ok(self.push(r, c, out, Op::Exp(a), g))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        let g = self.needs_grad(a);
        Ok(self.push(r, c, out, Op::Gelu(a), g))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "NaN in input".into(),
            });
        }
        let mut out = vec![0.0; m * n];
        for (src, dst) in x.chunks(n.max(1)).zip(out.chunks_mut(n.max(1))) {
            softmax_into(src, dst);
        }
        let g = self.needs_grad(a);
        Ok(self.push(m, n, out, Op::SoftmaxRows(a), g))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n < 2 {
            return Err(Error::Usage("layer_norm needs at least two columns".into()));
        }
        for p in [gain, bias] {
            if self.dims(p) != (1, n) {
                let d = self.dims(p);
                return Err(Error::dim("layer_norm", &[1, n], &[d.0, d.1]));
            }
        }
        let xs = self.value(x);
        let gs = self.value(gain);
        let bs = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gs[j] + bs[j];
            }
        }
        let g = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Stacks matrices vertically, in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        };
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut g = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::dim("concat_rows", &[cols], &[c]));
            }
            rows += r;
            g |= self.needs_grad(p);
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Places matrices side by side, in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        };
        let rows = self.dims(first).0;
        let mut cols = 0;
        let mut g = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::dim("concat_cols", &[rows], &[r]));
            }
            cols += c;
            g |= self.needs_grad(p);
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let v = self.value(p);
            for r in 0..rows {
                out[r * cols + off..r * cols + off + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(Error::dim("slice_rows", &[m, n], &[start, len]));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let g = self.needs_grad(a);
        Ok(self.push(len, n, out, Op::SliceRows(a, start), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        let g = self.needs_grad(a);
        Ok(self.push(m, len, out, Op::SliceCols(a, start), g))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Data(format!(
                    "row index {i} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(&self.value(a)[i * n..(i + 1) * n]);
        }
        let g = self.needs_grad(a);
        Ok(self.push(
            indices.len(),
            n,
            out,
            Op::GatherRows(a, indices.to_vec()),
            g,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let v = self.value(a);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has norm {norm}"),
                });
            }
            for j in 0..n {
                out[r * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let g = self.needs_grad(a);
        Ok(self.push(m, n, out, Op::L2NormalizeRows(a, norms), g))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let g = self.needs_grad(a);
        Ok(self.push(1, 1, vec![s], Op::Sum(a), g))
    }

    /// Mean over rows of `-Σ_c t_c · log softmax(z)_c`, with `targets` a
    /// row-major matrix of the same shape as `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m * n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                &[m, n],
                &[targets.len()],
            ));
        }
        let z = self.value(logits);
        if z.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_cross_entropy",
                detail: "NaN in logits".into(),
            });
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &z[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                let t = targets[r * n + c];
                if t != 0.0 {
                    loss -= t * (row[c] - lse);
                }
                probs[r * n + c] = (row[c] - lse).exp();
            }
        }
        let g = self.needs_grad(logits);
        Ok(self.push(
            1,
            1,
            vec![loss / m.max(1) as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Sum over all entries of the binary cross-entropy between
    /// `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m * n {
            return Err(Error::dim("bce_with_logits", &[m, n], &[targets.len()]));
        }
        let z = self.value(logits);
        let mut loss = 0.0;
        for (&zi, &t) in z.iter().zip(targets) {
            // log σ(z) = -softplus(-z), log(1-σ(z)) = -softplus(z)
            loss += t * softplus(-zi) + (1.0 - t) * softplus(zi);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: "bce_with_logits",
                detail: format!("loss {loss}"),
            });
        }
        let g = self.needs_grad(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            g,
        ))
    }

    /// Gradients of a scalar output with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            let d = self.dims(loss);
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {}x{}",
                d.0, d.1
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `output`)
    /// back to the trainable leaves.
    pub fn backward_with(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        let (r, c) = self.dims(output);
        if seed.len() != r * c {
            return Err(Error::dim("backward_with", &[r, c], &[seed.len()]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let mut visited = Vec::new();
        if self.needs_grad(output) {
            adj[output.0] = Some(seed.to_vec());
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visited.push(i);
            self.propagate(node, &g, &mut adj);
        }
        let mut leaves = vec![None; self.nodes.len()];
        for (i, a) in adj.into_iter().enumerate() {
            let n = &self.nodes[i];
            if matches!(n.op, Op::Leaf) && n.needs_grad {
                leaves[i] = a;
            }
        }
        Ok(Gradients { leaves, visited })
    }

    fn acc<'s>(&self, adj: &'s mut [Option<Vec<f64>>], v: Var) -> Option<&'s mut Vec<f64>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.acc(adj, *a) {
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Layout::RowMajor,
                        bv,
                        Layout::Transposed,
                        1.0,
                        da,
                    );
                }
                if let Some(db) = self.acc(adj, *b) {
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        av,
                        Layout::Transposed,
                        g,
                        Layout::RowMajor,
                        1.0,
                        db,
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.acc(adj, *a) {
                    // dA = dC · B
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Layout::RowMajor,
                        bv,
                        Layout::RowMajor,
                        1.0,
                        da,
                    );
                }
                if let Some(db) = self.acc(adj, *b) {
                    // dB = dCᵀ · A
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        g,
                        Layout::Transposed,
                        av,
                        Layout::RowMajor,
                        1.0,
                        db,
                    );
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(adj, *b) {
                    add_into(db, g);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.acc(adj, *a) {
                    add_into(da, g);
                }
                if let Some(dr) = self.acc(adj, *row) {
                    for chunk in g.chunks(cols.max(1)) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.acc(adj, *a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += c * x;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s)[0];
                if let Some(da) = self.acc(adj, *a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += sv * x;
                    }
                }
                let av = self.value(*a);
                if let Some(ds) = self.acc(adj, *s) {
                    ds[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.acc(adj, *a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(node.value.iter()) {
                        *d += x * y;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(da) = self.acc(adj, *a) {
                    for ((d, x), &v) in da.iter_mut().zip(g).zip(av) {
                        *d += x * gelu_grad(v);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(da) = self.acc(adj, *a) {
                    let y = &node.value;
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gs = self.value(*gain);
                if let Some(dg) = self.acc(adj, *gain) {
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if let Some(db) = self.acc(adj, *bias) {
                    for chunk in g.chunks(cols) {
                        add_into(db, chunk);
                    }
                }
                if let Some(dx) = self.acc(adj, *x) {
                    let n = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_x = 0.0;
                        for j in 0..cols {
                            dh[j] = g[r * cols + j] * gs[j];
                            mean_dh += dh[j];
                            mean_dh_x += dh[j] * xr[j];
                        }
                        mean_dh /= n;
                        mean_dh_x /= n;
                        for j in 0..cols {
                            dx[r * cols + j] += rstd[r] * (dh[j] - mean_dh - xr[j] * mean_dh_x);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.dims(p).0 * cols;
                    if let Some(dp) = self.acc(adj, p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if let Some(dp) = self.acc(adj, p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * c..(r + 1) * c],
                                &g[r * cols + off..r * cols + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(da) = self.acc(adj, *a) {
                    add_into(&mut da[start * cols..(start + rows) * cols], g);
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.dims(*a).1;
                if let Some(da) = self.acc(adj, *a) {
                    for r in 0..rows {
                        add_into(
                            &mut da[r * n + start..r * n + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(da) = self.acc(adj, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(
                            &mut da[i * cols..(i + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                if let Some(da) = self.acc(adj, *a) {
                    let y = &node.value;
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            da[r * cols + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.acc(adj, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                if let Some(dz) = self.acc(adj, *logits) {
                    let scale = g[0] / m.max(1) as f64;
                    for r in 0..m {
                        let tsum: f64 = targets[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            dz[i] += scale * (probs[i] * tsum - targets[i]);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = self.value(*logits);
                if let Some(dz) = self.acc(adj, *logits) {
                    for ((d, &z), &t) in dz.iter_mut().zip(zv).zip(targets) {
                        *d += g[0] * (sigmoid(z) - t);
                    }
                }
            }
        }
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        Tensor::randn(vec![rows, cols], 1.0, &mut rng)
    }

    /// Central finite differences of `f` at `x`, independent of the tape.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut tape = Tape::new();
        let (vi, vb) = (tape.leaf(&id).unwrap(), tape.leaf(&b).unwrap());
        let c = tape.matmul(vi, vb).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let (vx, vy) = (tape.leaf(&x).unwrap(), tape.leaf(&y).unwrap());
        let z = tape.matmul(vx, vy).unwrap();
        assert_eq!(tape.value(z), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
        let err = tape.matmul(va, vb).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = mat(4, 3, 1).trainable();
        let b = mat(3, 2, 2).trainable();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        let fa = |x: &Tensor| {
            let mut t = Tape::new();
            let (x, y) = (t.leaf(x).unwrap(), t.leaf(&b).unwrap());
            let c = t.matmul(x, y).unwrap();
            t.value(c).iter().sum()
        };
        let fb = |y: &Tensor| {
            let mut t = Tape::new();
            let (x, y) = (t.leaf(&a).unwrap(), t.leaf(y).unwrap());
            let c = t.matmul(x, y).unwrap();
            t.value(c).iter().sum()
        };
        assert!(max_rel_err(grads.wrt(va).unwrap(), &numeric_grad(&a, &fa)) < 1e-6);
        assert!(max_rel_err(grads.wrt(vb).unwrap(), &numeric_grad(&b, &fb)) < 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.constant(1, 3, vec![1000.0; 3]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let x = mat(3, 5, 3).trainable();
        let w = mat(3, 5, 4);
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let vx = t.leaf(x).unwrap();
            let y = t.softmax_rows(vx).unwrap();
            t.value(y)
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let vx = tape.leaf(&x).unwrap();
        let y = tape.softmax_rows(vx).unwrap();
        let grads = tape.backward_with(y, w.data()).unwrap();
        assert!(max_rel_err(grads.wrt(vx).unwrap(), &numeric_grad(&x, &f)) < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let gain = Tensor::full(vec![1, 4], 1.0);
        let bias = Tensor::zeros(vec![1, 4]);
        let mut tape = Tape::new();
        let (g, b) = (tape.leaf(&gain).unwrap(), tape.leaf(&bias).unwrap());
        let x = tape.constant(1, 4, vec![3.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));

        let gain = Tensor::full(vec![1, 2], 1.0);
        let bias = Tensor::zeros(vec![1, 2]);
        let (g, b) = (tape.leaf(&gain).unwrap(), tape.leaf(&bias).unwrap());
        let x = tape.constant(1, 2, vec![1.0, 3.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = mat(2, 8, 5).trainable();
        let gain = mat(1, 8, 6).trainable();
        let bias = mat(1, 8, 7).trainable();
        let w = mat(2, 8, 8);
        let run = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (vx, vg, vb) = (t.leaf(x).unwrap(), t.leaf(g).unwrap(), t.leaf(b).unwrap());
            let y = t.layer_norm(vx, vg, vb, 1e-5).unwrap();
            t.value(y)
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let (vx, vg, vb) = (
            tape.leaf(&x).unwrap(),
            tape.leaf(&gain).unwrap(),
            tape.leaf(&bias).unwrap(),
        );
        let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
        let grads = tape.backward_with(y, w.data()).unwrap();
        let nx = numeric_grad(&x, &|p| run(p, &gain, &bias));
        let ng = numeric_grad(&gain, &|p| run(&x, p, &bias));
        let nb = numeric_grad(&bias, &|p| run(&x, &gain, p));
        assert!(max_rel_err(grads.wrt(vx).unwrap(), &nx) < 1e-5);
        assert!(max_rel_err(grads.wrt(vg).unwrap(), &ng) < 1e-5);
        assert!(max_rel_err(grads.wrt(vb).unwrap(), &nb) < 1e-5);
    }

    #[test]
    fn concat_rows_routes_gradient_by_partition() {
        let parts: Vec<Tensor> = [1, 2, 3]
            .iter()
            .map(|&r| Tensor::full(vec![r, 4], r as f64).trainable())
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = parts.iter().map(|p| tape.leaf(p).unwrap()).collect();
        let c = tape.concat_rows(&vars).unwrap();
        assert_eq!(tape.dims(c), (6, 4));
        assert_eq!(&tape.value(c)[..4], &[1.0; 4]);
        assert_eq!(&tape.value(c)[4..12], &[2.0; 8]);
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        for (v, p) in vars.iter().zip(&parts) {
            assert_eq!(grads.wrt(*v).unwrap(), vec![1.0; p.numel()].as_slice());
        }
        let bad = Tensor::zeros(vec![1, 3]);
        let vb = tape.leaf(&bad).unwrap();
        assert!(tape.concat_rows(&[vars[0], vb]).is_err());
    }

    #[test]
    fn backward_linear_and_frozen_cases() {
        let p = Tensor::full(vec![2, 3], 0.5).trainable();
        let frozen = Tensor::full(vec![2, 3], 0.5);
        let mut tape = Tape::new();
        let vp = tape.leaf(&p).unwrap();
        let vf = tape.leaf(&frozen).unwrap();
        let s = tape.sum(vp).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(vp).unwrap(), &[1.0; 6]);

        let s2 = tape.sum(vf).unwrap();
        let grads = tape.backward(s2).unwrap();
        assert!(grads.is_empty());
        assert!(grads.visit_order().is_empty());

        let m = tape.add(vp, vf).unwrap();
        assert!(matches!(tape.backward(m), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let p = mat(3, 3, 9).trainable();
        let mut tape = Tape::new();
        let vp = tape.leaf(&p).unwrap();
        let a = tape.matmul(vp, vp).unwrap();
        let b = tape.gelu(a).unwrap();
        let c = tape.softmax_rows(b).unwrap();
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        let order = grads.visit_order();
        assert_eq!(order, &[s.index(), c.index(), b.index(), a.index()]);
    }

    #[test]
    fn remaining_ops_match_finite_differences() {
        let x = mat(3, 4, 11).trainable();
        let w = mat(3, 4, 12);
        let k = mat(2, 4, 13);
        let program = |t: &mut Tape<'_>, vx: Var, vk: Var| -> Var {
            let e = t.exp(vx).unwrap();
            let g = t.gelu(vx).unwrap();
            let a = t.add(e, g).unwrap();
            let n = t.l2_normalize_rows(a).unwrap();
            let left = t.slice_cols(n, 0, 2).unwrap();
            let right = t.slice_cols(n, 2, 2).unwrap();
            let sw = t.concat_cols(&[right, left]).unwrap();
            let top = t.slice_rows(sw, 1, 2).unwrap();
            let gath = t.gather_rows(sw, &[2, 0, 2]).unwrap();
            let st = t.concat_rows(&[top, gath]).unwrap();
            let row = t.slice_rows(vx, 0, 1).unwrap();
            let st = t.slice_rows(st, 0, 3).unwrap();
            let ar = t.add_row(st, row).unwrap();
            let nt = t.matmul_nt(ar, vk).unwrap();
            let s = t.slice_rows(vx, 2, 1).unwrap();
            let s = t.slice_cols(s, 1, 1).unwrap();
            t.scale_by(nt, s).unwrap()
        };
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let vx = t.leaf(x).unwrap();
            let vk = t.leaf(&k).unwrap();
            let y = program(&mut t, vx, vk);
            t.value(y)
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let vx = tape.leaf(&x).unwrap();
        let vk = tape.leaf(&k).unwrap();
        let y = program(&mut tape, vx, vk);
        let seed: Vec<f64> = w.data()[..tape.value(y).len()].to_vec();
        let grads = tape.backward_with(y, &seed).unwrap();
        let f2 = |x: &Tensor| {
            let mut t = Tape::new();
            let vx = t.leaf(x).unwrap();
            let vk = t.leaf(&k).unwrap();
            let y = program(&mut t, vx, vk);
            t.value(y)
                .iter()
                .zip(&seed)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let _ = f;
        assert!(max_rel_err(grads.wrt(vx).unwrap(), &numeric_grad(&x, &f2)) < 1e-5);
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let z = mat(2, 5, 14).trainable();
        let targets = vec![
            0.0, 1.0, 0.0, 0.0, 0.0, //
            0.2, 0.2, 0.2, 0.2, 0.2,
        ];
        let ce = |z: &Tensor| {
            let mut t = Tape::new();
            let vz = t.leaf(z).unwrap();
            let l = t.softmax_cross_entropy(vz, &targets).unwrap();
            t.value(l)[0]
        };
        let bce = |z: &Tensor| {
            let mut t = Tape::new();
            let vz = t.leaf(z).unwrap();
            let l = t.bce_with_logits(vz, &targets).unwrap();
            t.value(l)[0]
        };
        let mut tape = Tape::new();
        let vz = tape.leaf(&z).unwrap();
        let l1 = tape.softmax_cross_entropy(vz, &targets).unwrap();
        let l2 = tape.bce_with_logits(vz, &targets).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        assert!(max_rel_err(g1.wrt(vz).unwrap(), &numeric_grad(&z, &ce)) < 1e-6);
        assert!(max_rel_err(g2.wrt(vz).unwrap(), &numeric_grad(&z, &bce)) < 1e-6);
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let a = mat(5, 7, 20);
        let b = mat(7, 3, 21);
        let run = || {
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(&a).unwrap(), t.leaf(&b).unwrap());
            let c = t.matmul(va, vb).unwrap();
            let s = t.softmax_rows(c).unwrap();
            t.value(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
