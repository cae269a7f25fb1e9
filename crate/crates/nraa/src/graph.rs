//! A small reverse-mode autodiff tape over `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; row vectors are `1 x d` and
//! scalars are `1 x 1`. Nodes only reference earlier nodes, so walking the
//! tape backwards in index order is a valid reverse topological order.
//!
//! Frozen tensors (teacher projections, queue negatives, class embeddings)
//! enter through the `*_const` ops and never receive gradients, which makes
//! "no gradient reaches the teacher" a structural property rather than a
//! runtime convention.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// A . B
    MatMul(NodeId, NodeId),
    /// A . B^T
    MatMulNT(NodeId, NodeId),
    /// A . C for constant C
    MatMulConst(NodeId, Array2<f64>),
    /// A . C^T for constant C
    MatMulConstNT(NodeId, Array2<f64>),
    /// Row-wise dot product with a constant matrix of the same shape -> n x 1
    RowDotConst(NodeId, Array2<f64>),
    Add(NodeId, NodeId),
    /// matrix + broadcast row vector
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    SelectCols(NodeId, Vec<usize>),
    /// Mean over a subset of rows -> 1 x d
    MeanRowsSubset(NodeId, Vec<usize>),
    /// Per-row layer norm without affine parameters.
    LayerNorm(NodeId),
    Gelu(NodeId),
    /// Per-row softmax over unmasked entries; masked entries are exactly 0.
    SoftmaxMaskedRows(NodeId, Array2<bool>),
    /// Rows scaled to unit L2 norm.
    L2NormRows(NodeId),
    /// Sum over rows of -log softmax(row)[target] -> 1 x 1
    CrossEntropyRows(NodeId, Vec<usize>),
    Transpose(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Gradients of one scalar root with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, or `None` if the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn matmul_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = self.value(a).dot(c);
        self.push(Op::MatMulConst(a, c.clone()), v)
    }

    pub fn matmul_const_nt(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = self.value(a).dot(&c.t());
        self.push(Op::MatMulConstNT(a, c.clone()), v)
    }

    pub fn row_dot_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.dim(), c.dim(), "row_dot_const shape mismatch");
        let v = (av * c)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .into_dimensionality()
            .unwrap();
        self.push(Op::RowDotConst(a, c.clone()), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bv = self.value(bias);
        assert_eq!(bv.nrows(), 1, "bias must be a row vector");
        assert_eq!(bv.ncols(), self.value(a).ncols(), "bias width mismatch");
        let v = self.value(a) + bv;
        self.push(Op::AddBias(a, bias), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(Op::Scale(a, k), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows width mismatch");
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols height mismatch");
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut v = Array2::zeros((rows.len(), av.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&av.row(r));
        }
        self.push(Op::SelectRows(a, rows.to_vec()), v)
    }

    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut v = Array2::zeros((av.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            v.column_mut(j).assign(&av.column(c));
        }
        self.push(Op::SelectCols(a, cols.to_vec()), v)
    }

    pub fn mean_rows_subset(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        assert!(!rows.is_empty(), "mean over empty row subset");
        let av = self.value(a);
        let mut v = Array2::zeros((1, av.ncols()));
        for &r in rows {
            v.row_mut(0).scaled_add(1.0, &av.row(r));
        }
        v /= rows.len() as f64;
        self.push(Op::MeanRowsSubset(a, rows.to_vec()), v)
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let d = av.ncols() as f64;
        let mut v = av.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|x| x * x).sum::<f64>() / d;
            let s = (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|x| x / s);
        }
        self.push(Op::LayerNorm(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), v)
    }

    /// Per-row softmax over positions where `mask` is true. Masked positions
    /// come out exactly 0.0. Every row must have at least one valid key;
    /// all-masked rows panic because the caller built an impossible mask.
    pub fn softmax_masked_rows(&mut self, a: NodeId, mask: &Array2<bool>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.dim(), mask.dim(), "softmax mask shape mismatch");
        let mut v = Array2::zeros(av.dim());
        for r in 0..av.nrows() {
            let mut max = f64::NEG_INFINITY;
            for c in 0..av.ncols() {
                if mask[(r, c)] {
                    max = max.max(av[(r, c)]);
                }
            }
            assert!(
                max.is_finite(),
                "attention row {r} has no valid keys (all masked)"
            );
            let mut denom = 0.0;
            for c in 0..av.ncols() {
                if mask[(r, c)] {
                    let e = (av[(r, c)] - max).exp();
                    v[(r, c)] = e;
                    denom += e;
                }
            }
            for c in 0..av.ncols() {
                if mask[(r, c)] {
                    v[(r, c)] /= denom;
                }
            }
        }
        self.push(Op::SoftmaxMaskedRows(a, mask.clone()), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mask = Array2::from_elem(self.value(a).dim(), true);
        self.softmax_masked_rows(a, &mask)
    }

    pub fn l2_norm_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let r = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / r);
        }
        self.push(Op::L2NormRows(a), v)
    }

    /// Sum over rows of the cross-entropy between `softmax(row)` and the
    /// one-hot target for that row. Returns a 1 x 1 scalar node.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            assert!(t < row.len(), "target {t} out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(Op::CrossEntropyRows(logits, targets.to_vec()), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    /// Reverse pass from a `1 x 1` root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulConst(a, c) => {
                    accumulate(&mut grads, *a, g.dot(&c.t()));
                }
                Op::MatMulConstNT(a, c) => {
                    accumulate(&mut grads, *a, g.dot(c));
                }
                Op::RowDotConst(a, c) => {
                    let mut da = c.clone();
                    for (mut row, gr) in da.rows_mut().into_iter().zip(g.column(0)) {
                        row.mapv_inplace(|x| x * gr);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(a, bias) => {
                    let db = g
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0))
                        .into_dimensionality()
                        .unwrap();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, &g * *k);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        let gp = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        let gp = g.slice(ndarray::s![.., at..at + n]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += n;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        da.row_mut(r).scaled_add(1.0, &g.row(i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectCols(a, cols) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (j, &c) in cols.iter().enumerate() {
                        da.column_mut(c).scaled_add(1.0, &g.column(j));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRowsSubset(a, rows) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    let scale = 1.0 / rows.len() as f64;
                    for &r in rows {
                        da.row_mut(r).scaled_add(scale, &g.row(0));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let d = x.ncols() as f64;
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let row = x.row(r);
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let s = (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / s).collect();
                        let gr = g.row(r);
                        let g_mean = gr.sum() / d;
                        let gx_mean =
                            gr.iter().zip(&xhat).map(|(gi, xi)| gi * xi).sum::<f64>() / d;
                        for c in 0..x.ncols() {
                            da[(r, c)] = (gr[c] - g_mean - xhat[c] * gx_mean) / s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = self.value(*a).mapv(gelu_grad) * &g;
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxMaskedRows(a, mask) => {
                    let p = &self.nodes[i].value;
                    let mut da = Array2::zeros(p.dim());
                    for r in 0..p.nrows() {
                        let dot: f64 = (0..p.ncols())
                            .filter(|&c| mask[(r, c)])
                            .map(|c| g[(r, c)] * p[(r, c)])
                            .sum();
                        for c in 0..p.ncols() {
                            if mask[(r, c)] {
                                da[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::L2NormRows(a) => {
                    let x = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                        let ydotg: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..x.ncols() {
                            da[(r, c)] = (g[(r, c)] - y[(r, c)] * ydotg) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let lv = self.value(*logits);
                    let mut da = Array2::zeros(lv.dim());
                    let gs = g[(0, 0)];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for c in 0..lv.ncols() {
                            let p = (lv[(r, c)] - max).exp() / denom;
                            da[(r, c)] = gs * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, da);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi = (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}
