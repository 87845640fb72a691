//! Tape-based reverse-mode autodiff over `Array2<f64>`.
//!
//! A [`Graph`] owns a flat tape of nodes. Every operation evaluates its
//! value eagerly when recorded, so forward results are available
//! immediately; [`Graph::backward`] then runs one reverse sweep from a
//! scalar (1x1) node and returns per-node gradients. Scalars are 1x1
//! matrices, row vectors 1xC.
//!
//! The gradient-reversal op [`Graph::grl`] is the reason this engine
//! exists as a tape rather than per-module backprop: its forward pass is
//! a bitwise clone of the input and its backward pass negates the
//! incoming gradient exactly, with no arithmetic that could perturb
//! either direction.

use ndarray::{concatenate, Array2, Axis};

pub type NodeId = usize;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    // Multiply a matrix by a 1x1 node, keeping the scalar differentiable.
    ScaleBy(NodeId, NodeId),
    // Broadcast-add a 1xC row to every row of an LxC matrix.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    MinPair(NodeId, NodeId),
    MaxPair(NodeId, NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    MeanRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows { a: NodeId, idx: Vec<usize> },
    // im2col for a stride-2, kernel-3, zero-padded temporal conv:
    // out[t, j*C + c] = in[2t + j - 1, c], rows outside [0, L) read zero.
    UnfoldTime { a: NodeId, kernel: usize, stride: usize },
    Grl(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar convenience accessor; panics if `id` is not 1x1.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-1x1 node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Leaf that participates in gradients (a trainable parameter).
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradients (input data, targets).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Elementwise quotient; the denominator must be nonzero everywhere.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value / &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value + c;
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        let ng = self.needs(a);
        self.push(v, Op::MulScalar(a, c), ng)
    }

    /// `a * s` where `s` is a 1x1 node that stays differentiable.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.dim(), (1, 1), "scale_by needs a 1x1 scalar node");
        let sv = self.nodes[s].value[[0, 0]];
        let v = &self.nodes[a].value * sv;
        let ng = self.needs(a) || self.needs(s);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    /// Adds row vector `r` (1xC) to every row of `a` (LxC).
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let (_, ca) = self.nodes[a].value.dim();
        let (rr, rc) = self.nodes[r].value.dim();
        assert_eq!((rr, rc), (1, ca), "add_row row shape mismatch");
        let v = &self.nodes[a].value + &self.nodes[r].value;
        let ng = self.needs(a) || self.needs(r);
        self.push(v, Op::AddRow(a, r), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu_fwd);
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid_fwd);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Natural log; inputs must be strictly positive (shift first if not).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// Elementwise min; the smaller input gets the gradient (ties go to `a`).
    pub fn min_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let mut v = va.clone();
        v.zip_mut_with(vb, |x, &y| {
            if y < *x {
                *x = y;
            }
        });
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MinPair(a, b), ng)
    }

    /// Elementwise max; the larger input gets the gradient (ties go to `a`).
    pub fn max_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let mut v = va.clone();
        v.zip_mut_with(vb, |x, &y| {
            if y > *x {
                *x = y;
            }
        });
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MaxPair(a, b), ng)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_softmax_fwd(&self.nodes[a].value);
        let ng = self.needs(a);
        self.push(v, Op::RowSoftmax(a), ng)
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.needs(a);
        self.push(v, Op::RowLogSoftmax(a), ng)
    }

    /// Per-row layer norm with affine scale/shift (`gamma`, `beta` are 1xC).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let (l, c) = xv.dim();
        assert_eq!(gv.dim(), (1, c));
        assert_eq!(bv.dim(), (1, c));
        let mut v = Array2::zeros((l, c));
        for i in 0..l {
            let row = xv.row(i);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                v[[i, j]] = (row[j] - mean) * inv * gv[[0, j]] + bv[[0, j]];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    /// Column means: LxC -> 1xC.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let l = x.nrows() as f64;
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / l;
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let n = (x.nrows() * x.ncols()) as f64;
        let v = Array2::from_elem((1, 1), x.sum() / n);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a].value.slice(ndarray::s![start..start + len, ..]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceRows { a, start, len }, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a].value.slice(ndarray::s![.., start..start + len]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols { a, start, len }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row lookup, repeats allowed: out[i] = a[idx[i]].
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = Array2::zeros((idx.len(), x.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&x.row(r));
        }
        let ng = self.needs(a);
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() }, ng)
    }

    /// Zero-padded temporal unfold for stride-`stride`, width-`kernel`
    /// convolutions: LxC -> L'x(kernel*C) with L' = (L - 1)/stride + 1.
    pub fn unfold_time(&mut self, a: NodeId, kernel: usize, stride: usize) -> NodeId {
        let x = &self.nodes[a].value;
        let (l, c) = x.dim();
        let pad = (kernel - 1) / 2;
        let l_out = (l - 1) / stride + 1;
        let mut v = Array2::zeros((l_out, kernel * c));
        for t in 0..l_out {
            for j in 0..kernel {
                let src = (stride * t + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    for ch in 0..c {
                        v[[t, j * c + ch]] = x[[src as usize, ch]];
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::UnfoldTime { a, kernel, stride }, ng)
    }

    /// Gradient reversal: identity forward (bitwise clone), negation
    /// backward (exact sign flip).
    pub fn grl(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        let ng = self.needs(a);
        self.push(v, Op::Grl(a), ng)
    }

    /// Reverse sweep from a 1x1 loss node. Returns one gradient slot per
    /// node; slots stay `None` for nodes the loss does not reach or that
    /// were recorded with `needs_grad = false`.
    pub fn backward(&mut self, loss: NodeId) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "backward() needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_to_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn push_to_parents(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |grads: &mut [Option<Array2<f64>>], pid: NodeId, contrib: Array2<f64>, this: &Graph| {
            if !this.nodes[pid].needs_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *b, g.clone(), self);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *b, -g, self);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[*b].value, self);
                acc(grads, *b, g * &self.nodes[*a].value, self);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                acc(grads, *a, g / bv, self);
                let av = &self.nodes[*a].value;
                acc(grads, *b, -(g * av) / (bv * bv), self);
            }
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.nodes[*b].value.t()), self);
                acc(grads, *b, self.nodes[*a].value.t().dot(g), self);
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned(), self),
            Op::AddScalar(a) => acc(grads, *a, g.clone(), self),
            Op::MulScalar(a, c) => acc(grads, *a, g * *c, self),
            Op::ScaleBy(a, s) => {
                let sv = self.nodes[*s].value[[0, 0]];
                acc(grads, *a, g * sv, self);
                let ds = (g * &self.nodes[*a].value).sum();
                acc(grads, *s, Array2::from_elem((1, 1), ds), self);
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)), self);
            }
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask, self);
            }
            Op::Gelu(a) => {
                let d = self.nodes[*a].value.mapv(gelu_grad);
                acc(grads, *a, g * &d, self);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                acc(grads, *a, g * &(y * &(1.0 - y)), self);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                acc(grads, *a, g * &(1.0 - y * y), self);
            }
            Op::Ln(a) => {
                let d = self.nodes[*a].value.mapv(|x| 1.0 / x);
                acc(grads, *a, g * &d, self);
            }
            Op::Abs(a) => {
                let d = self.nodes[*a].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, g * &d, self);
            }
            Op::MinPair(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(va).and(vb).for_each(|gx, &x, &y| {
                    if y < x {
                        *gx = 0.0;
                    }
                });
                ndarray::Zip::from(&mut gb).and(va).and(vb).for_each(|gx, &x, &y| {
                    if !(y < x) {
                        *gx = 0.0;
                    }
                });
                acc(grads, *a, ga, self);
                acc(grads, *b, gb, self);
            }
            Op::MaxPair(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(va).and(vb).for_each(|gx, &x, &y| {
                    if y > x {
                        *gx = 0.0;
                    }
                });
                ndarray::Zip::from(&mut gb).and(va).and(vb).for_each(|gx, &x, &y| {
                    if !(y > x) {
                        *gx = 0.0;
                    }
                });
                acc(grads, *a, ga, self);
                acc(grads, *b, gb, self);
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[id].value;
                let mut dx = g * y;
                for i in 0..dx.nrows() {
                    let dot: f64 = dx.row(i).sum();
                    let yr = y.row(i).to_owned();
                    let mut row = dx.row_mut(i);
                    row.zip_mut_with(&yr, |d, &yv| *d -= dot * yv);
                }
                acc(grads, *a, dx, self);
            }
            Op::RowLogSoftmax(a) => {
                let y = &self.nodes[id].value;
                let mut dx = g.clone();
                for i in 0..dx.nrows() {
                    let gsum: f64 = g.row(i).sum();
                    let yr = y.row(i).to_owned();
                    let mut row = dx.row_mut(i);
                    row.zip_mut_with(&yr, |d, &lv| *d -= gsum * lv.exp());
                }
                acc(grads, *a, dx, self);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let (l, c) = xv.dim();
                let cf = c as f64;
                let mut dx = Array2::zeros((l, c));
                let mut dgamma = Array2::zeros((1, c));
                let mut dbeta = Array2::zeros((1, c));
                for i in 0..l {
                    let row = xv.row(i);
                    let mean = row.sum() / cf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let grow = g.row(i);
                    let mut gxhat = vec![0.0; c];
                    for j in 0..c {
                        dbeta[[0, j]] += grow[j];
                        dgamma[[0, j]] += grow[j] * xhat[j];
                        gxhat[j] = grow[j] * gv[[0, j]];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / cf;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        dx[[i, j]] = inv * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(grads, *x, dx, self);
                acc(grads, *gamma, dgamma, self);
                acc(grads, *beta, dbeta, self);
            }
            Op::MeanRows(a) => {
                let (l, c) = self.nodes[*a].value.dim();
                let mut d = Array2::zeros((l, c));
                for i in 0..l {
                    for j in 0..c {
                        d[[i, j]] = g[[0, j]] / l as f64;
                    }
                }
                acc(grads, *a, d, self);
            }
            Op::MeanAll(a) => {
                let (l, c) = self.nodes[*a].value.dim();
                let d = Array2::from_elem((l, c), g[[0, 0]] / (l * c) as f64);
                acc(grads, *a, d, self);
            }
            Op::SumAll(a) => {
                let (l, c) = self.nodes[*a].value.dim();
                acc(grads, *a, Array2::from_elem((l, c), g[[0, 0]]), self);
            }
            Op::SliceRows { a, start, len } => {
                let (l, c) = self.nodes[*a].value.dim();
                let mut d = Array2::zeros((l, c));
                d.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(g);
                acc(grads, *a, d, self);
            }
            Op::SliceCols { a, start, len } => {
                let (l, c) = self.nodes[*a].value.dim();
                let mut d = Array2::zeros((l, c));
                d.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                acc(grads, *a, d, self);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    let piece = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                    acc(grads, p, piece, self);
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    let piece = g.slice(ndarray::s![.., at..at + cols]).to_owned();
                    acc(grads, p, piece, self);
                    at += cols;
                }
            }
            Op::GatherRows { a, idx } => {
                let (l, c) = self.nodes[*a].value.dim();
                let mut d = Array2::zeros((l, c));
                for (i, &r) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(grads, *a, d, self);
            }
            Op::UnfoldTime { a, kernel, stride } => {
                let (l, c) = self.nodes[*a].value.dim();
                let pad = (kernel - 1) / 2;
                let l_out = (l - 1) / stride + 1;
                let mut d = Array2::zeros((l, c));
                for t in 0..l_out {
                    for j in 0..*kernel {
                        let src = (stride * t + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            for ch in 0..c {
                                d[[src as usize, ch]] += g[[t, j * c + ch]];
                            }
                        }
                    }
                }
                acc(grads, *a, d, self);
            }
            Op::Grl(a) => acc(grads, *a, -g, self),
        }
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn row_softmax_fwd(x: &Array2<f64>) -> Array2<f64> {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}

/// Central-difference gradient of `f` at `x0`, one entry at a time.
pub fn finite_difference<F>(mut f: F, x0: &Array2<f64>, step: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x0.dim());
    for i in 0..x0.nrows() {
        for j in 0..x0.ncols() {
            let mut xp = x0.clone();
            xp[[i, j]] += step;
            let mut xm = x0.clone();
            xm[[i, j]] -= step;
            grad[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * step);
        }
    }
    grad
}

/// Worst relative error between two same-shaped gradients, with an
/// absolute floor so near-zero entries compare sanely.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            u
        })
    }

    #[test]
    fn grl_forward_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 5, 9);
        let mut g = Graph::new();
        let a = g.param(x.clone());
        let y = g.grl(a);
        for (xa, ya) in x.iter().zip(g.value(y).iter()) {
            assert_eq!(xa.to_bits(), ya.to_bits());
        }
    }

    #[test]
    fn grl_backward_is_exact_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 4, 6);
        let w = randn(&mut rng, 6, 3);

        // Same loss with and without the reversal between x and the matmul.
        let grad_plain = {
            let mut g = Graph::new();
            let a = g.param(x.clone());
            let wn = g.constant(w.clone());
            let y = g.matmul(a, wn);
            let l = g.mean_all(y);
            let l2 = g.mul(l, l);
            let grads = g.backward(l2);
            grads[a].clone().unwrap()
        };
        let grad_rev = {
            let mut g = Graph::new();
            let a = g.param(x.clone());
            let r = g.grl(a);
            let wn = g.constant(w.clone());
            let y = g.matmul(r, wn);
            let l = g.mean_all(y);
            let l2 = g.mul(l, l);
            let grads = g.backward(l2);
            grads[a].clone().unwrap()
        };
        for (p, n) in grad_plain.iter().zip(grad_rev.iter()) {
            assert_eq!((-p).to_bits(), n.to_bits(), "reversal must be an exact sign flip");
        }
    }

    #[test]
    fn div_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = randn(&mut rng, 4, 5);
        let b0 = randn(&mut rng, 4, 5).mapv(|v| v + 3.0);
        let eval = |a: &Array2<f64>, b: &Array2<f64>| -> (f64, Array2<f64>, Array2<f64>) {
            let mut g = Graph::new();
            let an = g.param(a.clone());
            let bn = g.param(b.clone());
            let q = g.div(an, bn);
            let sq = g.mul(q, q);
            let l = g.mean_all(sq);
            let grads = g.backward(l);
            (g.scalar(l), grads[an].clone().unwrap(), grads[bn].clone().unwrap())
        };
        let (_, ga, gb) = eval(&a0, &b0);
        let fd_a = finite_difference(|a| eval(a, &b0).0, &a0, 1e-4);
        let fd_b = finite_difference(|b| eval(&a0, b).0, &b0, 1e-4);
        assert!(max_rel_err(&ga, &fd_a, 1e-8) < 1e-4);
        assert!(max_rel_err(&gb, &fd_b, 1e-8) < 1e-4);
    }

    // One composite graph exercising most ops, checked against central
    // differences entry by entry.
    #[test]
    fn finite_difference_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = randn(&mut rng, 6, 8);
        let w0 = randn(&mut rng, 8, 8);
        let r0 = randn(&mut rng, 1, 8);
        let gamma0 = randn(&mut rng, 1, 8).mapv(|v| v + 1.5);
        let beta0 = randn(&mut rng, 1, 8);

        let eval = |x: &Array2<f64>, w: &Array2<f64>, r: &Array2<f64>, gm: &Array2<f64>, bt: &Array2<f64>| -> (f64, Vec<Array2<f64>>) {
            let mut g = Graph::new();
            let xn = g.param(x.clone());
            let wn = g.param(w.clone());
            let rn = g.param(r.clone());
            let gmn = g.param(gm.clone());
            let btn = g.param(bt.clone());

            let ln = g.layer_norm(xn, gmn, btn, 1e-5);
            let h = g.matmul(ln, wn);
            let h = g.add_row(h, rn);
            let h = g.gelu(h);
            let s = g.row_softmax(h);
            let t = g.tanh(h);
            let prod = g.mul(s, t);
            let sg = g.sigmoid(prod);
            let shifted = g.add_scalar(sg, 1e-3);
            let lg = g.ln(shifted);
            let m = g.mean_rows(lg);
            let ab = g.abs(m);
            let sc = g.mean_all(ab);
            let sc2 = g.mul_scalar(sc, 3.0);
            let loss = g.mul(sc2, sc2);
            let grads = g.backward(loss);
            (
                g.scalar(loss),
                vec![
                    grads[xn].clone().unwrap(),
                    grads[wn].clone().unwrap(),
                    grads[rn].clone().unwrap(),
                    grads[gmn].clone().unwrap(),
                    grads[btn].clone().unwrap(),
                ],
            )
        };

        let (_, analytic) = eval(&x0, &w0, &r0, &gamma0, &beta0);

        let fd_x = finite_difference(|x| eval(x, &w0, &r0, &gamma0, &beta0).0, &x0, 1e-5);
        let fd_w = finite_difference(|w| eval(&x0, w, &r0, &gamma0, &beta0).0, &w0, 1e-5);
        let fd_r = finite_difference(|r| eval(&x0, &w0, r, &gamma0, &beta0).0, &r0, 1e-5);
        let fd_gm = finite_difference(|gm| eval(&x0, &w0, &r0, gm, &beta0).0, &gamma0, 1e-5);
        let fd_bt = finite_difference(|bt| eval(&x0, &w0, &r0, &gamma0, bt).0, &beta0, 1e-5);

        for (a, f) in analytic.iter().zip([fd_x, fd_w, fd_r, fd_gm, fd_bt].iter()) {
            assert!(max_rel_err(a, f, 1e-6) < 1e-5, "rel err {}", max_rel_err(a, f, 1e-6));
        }
    }

    #[test]
    fn finite_difference_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, 7, 6);

        let eval = |x: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut g = Graph::new();
            let xn = g.param(x.clone());
            let unf = g.unfold_time(xn, 3, 2);
            let left = g.slice_cols(unf, 0, 6);
            let mid = g.slice_cols(unf, 6, 6);
            let cat = g.concat_rows(&[left, mid]);
            let gth = g.gather_rows(cat, &[0, 2, 2, 5]);
            let tr = g.transpose(gth);
            let sq = g.mul(tr, tr);
            let sr = g.slice_rows(sq, 1, 4);
            let back = g.concat_cols(&[sr, sr]);
            let loss = g.mean_all(back);
            let grads = g.backward(loss);
            (g.scalar(loss), grads[xn].clone().unwrap())
        };

        let (_, analytic) = eval(&x0);
        let fd = finite_difference(|x| eval(x).0, &x0, 1e-5);
        assert!(max_rel_err(&analytic, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn finite_difference_reduction_and_pair_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a0 = randn(&mut rng, 5, 5);
        let b0 = randn(&mut rng, 5, 5);

        let eval = |a: &Array2<f64>, b: &Array2<f64>| -> (f64, Array2<f64>, Array2<f64>) {
            let mut g = Graph::new();
            let an = g.param(a.clone());
            let bn = g.param(b.clone());
            let mn = g.min_pair(an, bn);
            let mx = g.max_pair(an, bn);
            let d = g.sub(mx, mn);
            let rl = g.relu(d);
            let s = g.sum_all(rl);
            let lsm = g.row_log_softmax(mn);
            let s2 = g.mean_all(lsm);
            let tot = g.add(s, s2);
            let sc = g.scalar_constant(0.5);
            let tot = g.scale_by(tot, sc);
            let grads = g.backward(tot);
            (g.scalar(tot), grads[an].clone().unwrap(), grads[bn].clone().unwrap())
        };

        let (_, ga, gb) = eval(&a0, &b0);
        let fd_a = finite_difference(|a| eval(a, &b0).0, &a0, 1e-5);
        let fd_b = finite_difference(|b| eval(&a0, b).0, &b0, 1e-5);
        assert!(max_rel_err(&ga, &fd_a, 1e-6) < 1e-5);
        assert!(max_rel_err(&gb, &fd_b, 1e-6) < 1e-5);
    }

    #[test]
    fn scale_by_scalar_gradient_flows_to_scalar() {
        let a0 = array![[1.0, 2.0], [3.0, 4.0]];
        let mut g = Graph::new();
        let an = g.constant(a0);
        let s = g.param(Array2::from_elem((1, 1), 2.0));
        let y = g.scale_by(an, s);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        // d(sum(s*a))/ds = sum(a) = 10.
        assert_eq!(grads[s].as_ref().unwrap()[[0, 0]], 10.0);
    }

    #[test]
    fn unfold_time_matches_declared_padding() {
        // L = 5, k = 3, stride = 2: rows read positions {-1,0,1}, {1,2,3}, {3,4,5}.
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let mut g = Graph::new();
        let xn = g.constant(x);
        let u = g.unfold_time(xn, 3, 2);
        let v = g.value(u);
        assert_eq!(v.dim(), (3, 3));
        assert_eq!(v.row(0).to_vec(), vec![0.0, 1.0, 2.0]);
        assert_eq!(v.row(1).to_vec(), vec![2.0, 3.0, 4.0]);
        assert_eq!(v.row(2).to_vec(), vec![4.0, 5.0, 0.0]);
    }

    #[test]
    fn halved_lengths_follow_ceil_rule() {
        for (l, want) in [(16usize, 8usize), (17, 9), (64, 32), (200, 100), (13, 7), (1, 1)] {
            let mut g = Graph::new();
            let xn = g.constant(Array2::zeros((l, 2)));
            let u = g.unfold_time(xn, 3, 2);
            assert_eq!(g.value(u).nrows(), want, "L = {l}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 9, 14).mapv(|v| v * 30.0);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let s = g.row_softmax(xn);
        for row in g.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_over_reused_nodes() {
        // y = x*x + x used twice: dy/dx = 2x + 1.
        let mut g = Graph::new();
        let x = g.param(Array2::from_elem((1, 1), 3.0));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let grads = g.backward(y);
        assert_eq!(grads[x].as_ref().unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Array2::from_elem((2, 2), 1.0));
        let y = g.mean_all(x);
        let grads = g.backward(y);
        assert!(grads[x].is_none());
    }
}
