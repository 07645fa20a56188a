//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of every node that depends on a parameter or on a variable leaf.

use serde::{Deserialize, Serialize};

use crate::geometry::{nearest_neighbors, Point3};
use crate::nn::{ParamId, ParamStore};

/// Discriminator probabilities are clamped this far from 0 and 1 before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_points(pts: &[Point3]) -> Self {
        Self::from_vec(pts.len(), 3, pts.iter().flatten().copied().collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Rows of an `n × 3` tensor as points.
    pub fn to_points(&self) -> Vec<Point3> {
        assert_eq!(self.cols, 3, "expected an n x 3 tensor");
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let av = a.data[k * a.cols + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GradReverse(Var, f64),
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    Chamfer {
        a: Var,
        b: Var,
        ab: Vec<usize>,
        ba: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf holding parameter `id`; created on first use, shared afterwards.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        self.push_op(out, Op::MatMulNT(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tr) = (self.value(a), self.value(row));
        assert!(
            tr.rows == 1 && tr.cols == ta.cols,
            "row broadcast expects 1 x {} but got {:?}",
            ta.cols,
            tr.shape()
        );
        let mut out = ta.clone();
        for r in out.data.chunks_exact_mut(ta.cols) {
            for (x, &y) in r.iter_mut().zip(&tr.data) {
                *x = f(*x, y);
            }
        }
        out
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_broadcast(a, row, |x, y| x + y);
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_broadcast(a, row, |x, y| x * y);
        self.push_op(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.push_op(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for r in out.data.chunks_exact_mut(cols) {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in r.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in r.iter_mut() {
                *x /= s;
            }
        }
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        let mut rstds = Vec::with_capacity(out.rows);
        for r in out.data.chunks_exact_mut(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for x in r.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.push_op(out, Op::LayerNormRows { x: a, rstd: rstds }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push_op(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows, "slice_rows out of range");
        let out = Tensor::from_vec(
            len,
            t.cols,
            t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        );
        self.push_op(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(t.rows, len, data);
        self.push_op(out, Op::SliceCols(a, start), &[a])
    }

    /// Row gather; repeated indices replicate rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(idx.len(), t.cols, data);
        self.push_op(out, Op::Gather(a, idx.to_vec()), &[a])
    }

    /// Column-wise max over consecutive groups of `group` rows. Ties pick the
    /// first row of the group.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Var {
        let t = self.value(a);
        assert!(
            group > 0 && t.rows.is_multiple_of(group),
            "segment_max group mismatch"
        );
        let groups = t.rows / group;
        let mut out = Tensor::zeros(groups, t.cols);
        let mut argmax = vec![0usize; groups * t.cols];
        for g in 0..groups {
            for c in 0..t.cols {
                let mut best = g * group;
                let mut bv = t.get(best, c);
                for r in g * group + 1..(g + 1) * group {
                    let v = t.get(r, c);
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out.data[g * t.cols + c] = bv;
                argmax[g * t.cols + c] = best;
            }
        }
        self.push_op(out, Op::SegmentMax { x: a, argmax }, &[a])
    }

    /// Column-wise max over all rows, `1 × c`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let rows = self.value(a).rows;
        self.segment_max(a, rows)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, v) in out.data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let n = t.rows as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        self.push_op(out, Op::MeanRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.data.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        self.push_op(out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Identity forward; the backward pass multiplies the gradient by `-eta`.
    pub fn grad_reverse(&mut self, a: Var, eta: f64) -> Var {
        let out = self.value(a).clone();
        self.push_op(out, Op::GradReverse(a, eta), &[a])
    }

    /// Mean binary cross-entropy of the `n × 1` probabilities `p` against
    /// per-row labels in {0, 1}. Probabilities are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Var {
        let t = self.value(p);
        assert!(t.cols == 1 && t.rows == targets.len(), "bce shape mismatch");
        let mut s = 0.0;
        for (&pv, &y) in t.data.iter().zip(targets) {
            let q = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            s -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let out = Tensor::scalar(s / targets.len() as f64);
        self.push_op(
            out,
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        )
    }

    /// Symmetric squared Chamfer distance between two `n × 3` point sets.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Var {
        let pa = self.value(a).to_points();
        let pb = self.value(b).to_points();
        let nab = nearest_neighbors(&pa, &pb);
        let nba = nearest_neighbors(&pb, &pa);
        let v = nab.iter().map(|x| x.1).sum::<f64>() / pa.len() as f64
            + nba.iter().map(|x| x.1).sum::<f64>() / pb.len() as f64;
        let op = Op::Chamfer {
            a,
            b,
            ab: nab.into_iter().map(|x| x.0).collect(),
            ba: nba.into_iter().map(|x| x.0).collect(),
        };
        self.push_op(Tensor::scalar(v), op, &[a, b])
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).data.len(),
            1,
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| {
            Tensor::from_vec(
                x.rows,
                x.cols,
                x.data
                    .iter()
                    .zip(&y.data)
                    .zip(&g.data)
                    .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                    .collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, self.value(*b)));
                acc(*b, matmul_tn(self.value(*a), g));
            }
            Op::MatMulNT(a, b) => {
                acc(*a, matmul(g, self.value(*b)));
                acc(*b, matmul_tn(g, self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let mut n = g.clone();
                n.data.iter_mut().for_each(|x| *x = -*x);
                acc(*b, n);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                );
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(a, r) => {
                let mut gr = Tensor::zeros(1, g.cols);
                for row in g.data.chunks_exact(g.cols) {
                    for (o, v) in gr.data.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*a, g.clone());
                acc(*r, gr);
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(1, g.cols);
                for (grow, arow) in ga
                    .data
                    .chunks_exact_mut(g.cols)
                    .zip(ta.data.chunks_exact(g.cols))
                {
                    for c in 0..g.cols {
                        gr.data[c] += grow[c] * arow[c];
                        grow[c] *= tr.data[c];
                    }
                }
                acc(*a, ga);
                acc(*r, gr);
            }
            Op::Scale(a, c) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|x| *x *= c);
                acc(*a, ga);
            }
            Op::Gelu(a) => {
                let t = elementwise(self.value(*a), &|x, _, gv| gv * gelu_grad(x));
                acc(*a, t);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let t = elementwise(self.value(*a), &|x, _, gv| {
                    if x > 0.0 {
                        gv
                    } else {
                        s * gv
                    }
                });
                acc(*a, t);
            }
            Op::Sigmoid(a) => {
                let t = elementwise(self.value(*a), &|_, yv, gv| gv * yv * (1.0 - yv));
                acc(*a, t);
            }
            Op::Tanh(a) => {
                let t = elementwise(self.value(*a), &|_, yv, gv| gv * (1.0 - yv * yv));
                acc(*a, t);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        ga.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNormRows { x, rstd } => {
                let n = y.cols as f64;
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for (r, &rs) in rstd.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        ga.data[r * y.cols + c] = rs / n * (n * gr[c] - sg - yr[c] * sgy);
                    }
                }
                acc(*x, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let slice = g.data[offset * cols..(offset + rows) * cols].to_vec();
                    acc(p, Tensor::from_vec(rows, cols, slice));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    acc(p, Tensor::from_vec(rows, cols, data));
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                ga.data[start * cols..start * cols + g.data.len()].copy_from_slice(&g.data);
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.data[r * cols + start..r * cols + start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::Gather(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga.data[i * cols + c] += g.data[o * cols + c];
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentMax { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut ga = Tensor::zeros(rows, cols);
                for (k, &r) in argmax.iter().enumerate() {
                    let c = k % cols;
                    ga.data[r * cols + c] += g.data[k];
                }
                acc(*x, ga);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        ga.data[r * cols + c] = g.data[c] / rows as f64;
                    }
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Tensor::from_vec(rows, cols, g.data.clone()));
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                acc(
                    *a,
                    Tensor::from_vec(rows, cols, vec![g.item(); rows * cols]),
                );
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                let v = g.item() / (rows * cols) as f64;
                acc(*a, Tensor::from_vec(rows, cols, vec![v; rows * cols]));
            }
            Op::GradReverse(a, eta) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|x| *x *= -eta);
                acc(*a, ga);
            }
            Op::Bce { p, targets } => {
                let tp = self.value(*p);
                let n = targets.len() as f64;
                let gv = g.item();
                let data = tp
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &t)| {
                        if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            gv * (-t / pv + (1.0 - t) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                acc(*p, Tensor::from_vec(tp.rows, 1, data));
            }
            Op::Chamfer { a, b, ab, ba } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.rows as f64, tb.rows as f64);
                let gv = g.item();
                let mut ga = Tensor::zeros(ta.rows, 3);
                let mut gb = Tensor::zeros(tb.rows, 3);
                for (i, &j) in ab.iter().enumerate() {
                    for c in 0..3 {
                        let d = 2.0 * gv * (ta.get(i, c) - tb.get(j, c)) / na;
                        ga.data[i * 3 + c] += d;
                        gb.data[j * 3 + c] -= d;
                    }
                }
                for (j, &i) in ba.iter().enumerate() {
                    for c in 0..3 {
                        let d = 2.0 * gv * (tb.get(j, c) - ta.get(i, c)) / nb;
                        gb.data[j * 3 + c] += d;
                        ga.data[i * 3 + c] -= d;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of parameter `id`, or `None` when it did not take part in the
    /// loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.of(v))
    }
}
