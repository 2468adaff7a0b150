//! Tape-based reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! A [`Graph`] is a flat list of nodes in topological order; each op records its
//! parents so a single reverse sweep accumulates gradients. Values are always
//! two-dimensional: row vectors are `[1, d]`, scalars are `[1, 1]`. Batches
//! are handled by building one subgraph per sample on a shared graph, so
//! parameter leaves collect their gradient sum across the batch for free.
//!
//! Leaves are either constants (no gradient is ever allocated for them or for
//! subgraphs that depend only on them) or parameters (`requires_grad`). The
//! frozen-backbone contract rests on this: frozen weights enter as constants,
//! so their gradient is structurally absent rather than merely zero.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    /// `[n, d] + [1, d]` with the row vector broadcast over rows.
    AddRowBroadcast(VarId, VarId),
    ConcatRows(VarId, VarId),
    ConcatCols(VarId, VarId),
    SliceRows(VarId, usize, usize),
    SliceCols(VarId, usize, usize),
    Reshape(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    Relu(VarId),
    Gelu(VarId),
    Abs(VarId),
    /// (x, gamma, beta); epsilon stored inline.
    LayerNorm(VarId, VarId, VarId, f64),
    MeanRows(VarId),
    SumAll(VarId),
    AddN(Vec<VarId>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Wengert-list computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant leaf. No gradient will ever be tracked through it.
    pub fn constant(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> VarId {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar node");
        v[[0, 0]]
    }

    /// Gradient of the last `backward` root w.r.t. `id`, if one was tracked.
    pub fn grad(&self, id: VarId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul inner dims {ac} vs {br}");
        let v = self.value(a).dot(self.value(b));
        debug_assert_eq!(v.dim(), (ar, bc));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a) * s;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a) + s;
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// `a [n, d] + b [1, d]`, broadcasting `b` over every row of `a`.
    pub fn add_row_broadcast(&mut self, a: VarId, b: VarId) -> VarId {
        let (_, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!((br, bc), (1, ac), "row broadcast expects [1, {ac}]");
        let v = self.value(a) + &self.value(b).row(0);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRowBroadcast(a, b), ng)
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "concat_rows cols");
        let v = concatenate![Axis(0), self.value(a).view(), self.value(b).view()];
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatRows(a, b), ng)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).nrows(), self.value(b).nrows(), "concat_cols rows");
        let v = concatenate![Axis(1), self.value(a).view(), self.value(b).view()];
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        assert!(start <= end && end <= self.value(a).nrows(), "slice_rows bounds");
        let v = self
            .value(a)
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceRows(a, start, end), ng)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        assert!(start <= end && end <= self.value(a).ncols(), "slice_cols bounds");
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    /// Row-major reshape preserving the element count.
    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> VarId {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape element count");
        let flat: Vec<f64> = v.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let v = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let v = log_softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(gelu);
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// Per-row layer normalization with learnable gain/shift (`[1, d]` each).
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let d = self.value(x).ncols();
        assert_eq!(self.value(gamma).dim(), (1, d), "layer_norm gamma");
        assert_eq!(self.value(beta).dim(), (1, d), "layer_norm beta");
        let v = layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNorm(x, gamma, beta, eps), ng)
    }

    /// Column-wise mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let n = v.nrows() as f64;
        let m = (v.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(m, Op::MeanRows(a), ng)
    }

    /// Sum of all entries: `-> [1, 1]`.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    /// Elementwise sum of same-shaped nodes (batch loss aggregation).
    pub fn add_n(&mut self, terms: &[VarId]) -> VarId {
        assert!(!terms.is_empty(), "add_n needs at least one term");
        let dim = self.value(terms[0]).dim();
        let mut acc = Array2::zeros(dim);
        let mut ng = false;
        for &t in terms {
            assert_eq!(self.value(t).dim(), dim, "add_n shape");
            acc += self.value(t);
            ng |= self.needs(t);
        }
        self.push(acc, Op::AddN(terms.to_vec()), ng)
    }

    /// Squared Euclidean distance between same-shaped tensors: `-> [1, 1]`.
    pub fn squared_distance(&mut self, a: VarId, b: VarId) -> VarId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    /// Reverse sweep from a `[1, 1]` root; gradients are then available via
    /// [`Graph::grad`] for every node on a `requires_grad` path.
    pub fn backward(&mut self, root: VarId) {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs(root) {
            return;
        }
        self.grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else {
                continue;
            };
            // Immutable snapshots needed below; accumulation happens through
            // `accum` which re-borrows self.grads mutably.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let da = g.dot(&self.nodes[b.0].value.t());
                        self.accum(a, da);
                    }
                    if self.needs(b) {
                        let db = self.nodes[a.0].value.t().dot(&g);
                        self.accum(b, db);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(a) {
                        self.accum(a, g.t().to_owned());
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accum(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accum(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        self.accum(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accum(b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da = &g * &self.nodes[b.0].value;
                        self.accum(a, da);
                    }
                    if self.needs(b) {
                        let db = &g * &self.nodes[a.0].value;
                        self.accum(b, db);
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs(a) {
                        self.accum(a, g * s);
                    }
                }
                Op::AddScalar(a) => {
                    if self.needs(a) {
                        self.accum(a, g);
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    if self.needs(a) {
                        self.accum(a, g.clone());
                    }
                    if self.needs(b) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accum(b, db);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[a.0].value.nrows();
                    if self.needs(a) {
                        self.accum(a, g.slice(ndarray::s![..na, ..]).to_owned());
                    }
                    if self.needs(b) {
                        self.accum(b, g.slice(ndarray::s![na.., ..]).to_owned());
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.ncols();
                    if self.needs(a) {
                        self.accum(a, g.slice(ndarray::s![.., ..ca]).to_owned());
                    }
                    if self.needs(b) {
                        self.accum(b, g.slice(ndarray::s![.., ca..]).to_owned());
                    }
                }
                Op::SliceRows(a, start, end) => {
                    if self.needs(a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        da.slice_mut(ndarray::s![start..end, ..]).assign(&g);
                        self.accum(a, da);
                    }
                }
                Op::SliceCols(a, start, end) => {
                    if self.needs(a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        da.slice_mut(ndarray::s![.., start..end]).assign(&g);
                        self.accum(a, da);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        let dim = self.nodes[a.0].value.dim();
                        let flat: Vec<f64> = g.iter().copied().collect();
                        let da = Array2::from_shape_vec(dim, flat).expect("reshape grad");
                        self.accum(a, da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[i].value;
                        let mut da = Array2::zeros(y.dim());
                        for r in 0..y.nrows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..y.ncols() {
                                da[[r, c]] = yr[c] * (gr[c] - dot);
                            }
                        }
                        self.accum(a, da);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[i].value; // log-probs
                        let mut da = Array2::zeros(y.dim());
                        for r in 0..y.nrows() {
                            let gsum: f64 = g.row(r).sum();
                            for c in 0..y.ncols() {
                                da[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                            }
                        }
                        self.accum(a, da);
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let x = &self.nodes[a.0].value;
                        let da = Array2::from_shape_fn(x.dim(), |(r, c)| {
                            if x[[r, c]] > 0.0 {
                                g[[r, c]]
                            } else {
                                0.0
                            }
                        });
                        self.accum(a, da);
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(a) {
                        let x = &self.nodes[a.0].value;
                        let da = Array2::from_shape_fn(x.dim(), |(r, c)| {
                            g[[r, c]] * gelu_derivative(x[[r, c]])
                        });
                        self.accum(a, da);
                    }
                }
                Op::Abs(a) => {
                    if self.needs(a) {
                        // Subgradient 0 at exact zeros.
                        let x = &self.nodes[a.0].value;
                        let da = Array2::from_shape_fn(x.dim(), |(r, c)| {
                            let v = x[[r, c]];
                            if v > 0.0 {
                                g[[r, c]]
                            } else if v < 0.0 {
                                -g[[r, c]]
                            } else {
                                0.0
                            }
                        });
                        self.accum(a, da);
                    }
                }
                Op::LayerNorm(x, gamma, beta, eps) => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        eps,
                        &g,
                    );
                    if self.needs(x) {
                        self.accum(x, dx);
                    }
                    if self.needs(gamma) {
                        self.accum(gamma, dgamma);
                    }
                    if self.needs(beta) {
                        self.accum(beta, dbeta);
                    }
                }
                Op::MeanRows(a) => {
                    if self.needs(a) {
                        let (n, d) = self.nodes[a.0].value.dim();
                        let mut da = Array2::zeros((n, d));
                        let scale = 1.0 / n as f64;
                        for r in 0..n {
                            for c in 0..d {
                                da[[r, c]] = g[[0, c]] * scale;
                            }
                        }
                        self.accum(a, da);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs(a) {
                        let dim = self.nodes[a.0].value.dim();
                        self.accum(a, Array2::from_elem(dim, g[[0, 0]]));
                    }
                }
                Op::AddN(terms) => {
                    for t in terms {
                        if self.needs(t) {
                            self.accum(t, g.clone());
                        }
                    }
                }
            }
        }
    }

    fn accum(&mut self, id: VarId, delta: Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn layer_norm_rows(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            let xhat = (row[c] - mean) * inv_std;
            out[[r, c]] = xhat * gamma[[0, c]] + beta[[0, c]];
        }
    }
    out
}

fn layer_norm_backward(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    eps: f64,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut dx = Array2::zeros((n, d));
    let mut dgamma = Array2::zeros((1, d));
    let mut dbeta = Array2::zeros((1, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();

        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for c in 0..d {
            xhat[c] = (row[c] - mean) * inv_std;
            dxhat[c] = g[[r, c]] * gamma[[0, c]];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
            dgamma[[0, c]] += g[[r, c]] * xhat[c];
            dbeta[[0, c]] += g[[r, c]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            dx[[r, c]] = inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Central finite-difference helpers for validating analytic gradients.
pub mod check {
    use ndarray::Array2;

    pub const DEFAULT_EPS: f64 = 1e-5;

    /// Central-difference gradient of `f` w.r.t. the entries of `params[target]`.
    ///
    /// `f` must rebuild the full computation from the given parameter values,
    /// so the numerical path is independent of any recorded tape.
    pub fn numerical_grad<F>(
        params: &[Array2<f64>],
        target: usize,
        eps: f64,
        mut f: F,
    ) -> Array2<f64>
    where
        F: FnMut(&[Array2<f64>]) -> f64,
    {
        let mut work: Vec<Array2<f64>> = params.to_vec();
        let dim = params[target].dim();
        let mut grad = Array2::zeros(dim);
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = work[target][[r, c]];
                work[target][[r, c]] = orig + eps;
                let plus = f(&work);
                work[target][[r, c]] = orig - eps;
                let minus = f(&work);
                work[target][[r, c]] = orig;
                grad[[r, c]] = (plus - minus) / (2.0 * eps);
            }
        }
        grad
    }

    /// Max relative error between analytic and numerical gradients, with an
    /// absolute floor so near-zero entries do not blow up the ratio.
    pub fn max_relative_error(analytic: &Array2<f64>, numerical: &Array2<f64>) -> f64 {
        assert_eq!(analytic.dim(), numerical.dim());
        let mut worst = 0.0_f64;
        for (a, n) in analytic.iter().zip(numerical.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            worst = worst.max((a - n).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::{max_relative_error, numerical_grad, DEFAULT_EPS};
    use super::*;
    use ndarray::array;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        // Small deterministic LCG so these tests avoid extra dependencies.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Array2::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rand_mat(5, 7, 3);
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_subgraph_tracks_no_grad() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.constant(array![[3.0], [4.0]]);
        let c = g.matmul(a, b);
        let s = g.sum_all(c);
        g.backward(s);
        assert!(g.grad(a).is_none());
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn matmul_chain_gradient_matches_fd() {
        let params = vec![rand_mat(3, 4, 1), rand_mat(4, 2, 2)];
        let f = |p: &[Array2<f64>]| {
            let mut g = Graph::new();
            let a = g.constant(p[0].clone());
            let b = g.constant(p[1].clone());
            let c = g.matmul(a, b);
            let sq = g.mul(c, c);
            let s = g.sum_all(sq);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let a = g.param(params[0].clone());
        let b = g.param(params[1].clone());
        let c = g.matmul(a, b);
        let sq = g.mul(c, c);
        let s = g.sum_all(sq);
        g.backward(s);
        for (i, id) in [a, b].into_iter().enumerate() {
            let num = numerical_grad(&params, i, DEFAULT_EPS, f);
            let err = max_relative_error(g.grad(id).unwrap(), &num);
            assert!(err < 1e-6, "param {i}: rel err {err}");
        }
    }

    #[test]
    fn composite_ops_gradient_matches_fd() {
        // One graph touching most op kinds: slicing, concat, softmax,
        // layernorm, gelu, mean, broadcast.
        let params = vec![
            rand_mat(4, 6, 10),
            rand_mat(1, 6, 11),
            rand_mat(1, 6, 12),
            rand_mat(6, 3, 13),
        ];
        let build = |g: &mut Graph, ids: &[VarId]| {
            let ln = g.layer_norm(ids[0], ids[1], ids[2], 1e-6);
            let h = g.matmul(ln, ids[3]);
            let ha = g.gelu(h);
            let top = g.slice_rows(ha, 0, 2);
            let bottom = g.slice_rows(ha, 2, 4);
            let joined = g.concat_rows(top, bottom);
            let sm = g.softmax_rows(joined);
            // Slice one column so the softmax contribution is not constant.
            let col = g.slice_cols(sm, 0, 1);
            let s1 = g.sum_all(col);
            let m = g.mean_rows(ha);
            let wide = g.concat_cols(m, m);
            let r = g.reshape(wide, 2, 3);
            let a = g.abs(r);
            let s2 = g.sum_all(a);
            g.add(s1, s2)
        };
        let f = |p: &[Array2<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<VarId> = p.iter().map(|a| g.constant(a.clone())).collect();
            let s = build(&mut g, &ids);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let ids: Vec<VarId> = params.iter().map(|a| g.param(a.clone())).collect();
        let s = build(&mut g, &ids);
        g.backward(s);
        for i in 0..params.len() {
            let num = numerical_grad(&params, i, DEFAULT_EPS, f);
            let err = max_relative_error(g.grad(ids[i]).unwrap(), &num);
            assert!(err < 1e-5, "param {i}: rel err {err}");
        }
    }

    #[test]
    fn log_softmax_gradient_matches_fd() {
        let params = vec![rand_mat(3, 5, 21)];
        let f = |p: &[Array2<f64>]| {
            let mut g = Graph::new();
            let x = g.constant(p[0].clone());
            let ls = g.log_softmax_rows(x);
            let picked = g.slice_cols(ls, 1, 2);
            let s = g.sum_all(picked);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let x = g.param(params[0].clone());
        let ls = g.log_softmax_rows(x);
        let picked = g.slice_cols(ls, 1, 2);
        let s = g.sum_all(picked);
        g.backward(s);
        let num = numerical_grad(&params, 0, DEFAULT_EPS, f);
        let err = max_relative_error(g.grad(x).unwrap(), &num);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn batch_subgraphs_accumulate_into_shared_leaf() {
        let w = array![[2.0], [1.0]];
        let mut g = Graph::new();
        let wid = g.param(w);
        let mut losses = Vec::new();
        for x in [array![[1.0, 0.0]], array![[0.0, 3.0]]] {
            let xid = g.constant(x);
            let y = g.matmul(xid, wid);
            let sq = g.mul(y, y);
            losses.push(g.sum_all(sq));
        }
        let total = g.add_n(&losses);
        g.backward(total);
        // d/dw of (w0)^2 + (3 w1)^2 = [2 w0, 18 w1] = [4, 18]
        let grad = g.grad(wid).unwrap();
        assert!((grad[[0, 0]] - 4.0).abs() < 1e-12);
        assert!((grad[[1, 0]] - 18.0).abs() < 1e-12);
    }
}
