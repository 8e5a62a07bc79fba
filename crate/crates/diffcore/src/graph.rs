//! The tape. Nodes are appended in evaluation order, so a reverse sweep over
//! the node list is a valid topological order for backpropagation.

use crate::error::{DiffError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, log_sum_exp, sigmoid, softmax_row};
use crate::layers;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Affine(NodeId, T),
    ScaleRows(NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    Mean(NodeId, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    GumbelSoftmax(NodeId, T),
    GatherRows(NodeId, Vec<usize>),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Gru {
        x: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
        h0: Option<NodeId>,
        gates: Vec<T>,
    },
    CrossEntropy(NodeId, Tensor<T>),
    WeightedSum(Vec<(NodeId, T)>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Hadamard(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Mean(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::GumbelSoftmax(a, _)
            | Op::GatherRows(a, _)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Conv1d { x, w, b } => vec![*x, *w, *b],
            Op::Gru { x, w, u, b, h0, .. } => {
                let mut v = vec![*x, *w, *u, *b];
                v.extend(h0);
                v
            }
            Op::WeightedSum(terms) => terms.iter().map(|(n, _)| *n).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(DiffError::shape(op, a, b));
    }
    Ok(())
}

fn require_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if !t.is_matrix() {
        return Err(DiffError::invalid(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to `id`, if any
    /// flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            grad: None,
            op: Op::Param(id),
            requires_grad: !store.is_frozen(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        require_matrix("matmul", av)?;
        require_matrix("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(DiffError::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        require_matrix("matmul_nt", av)?;
        require_matrix("matmul_nt", bv)?;
        if av.cols() != bv.cols() {
            return Err(DiffError::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av.shape(), bv.shape())?;
        let mut out = av.clone();
        out.add_assign(bv);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a `1×n` bias row to every row of an `m×n` matrix. This is the
    /// only broadcast the graph supports.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        require_matrix("add_bias", av)?;
        if bv.shape() != [1, av.cols()] {
            return Err(DiffError::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_bias", out, Op::AddBias(a, bias))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("hadamard", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        self.push(
            "hadamard",
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Hadamard(a, b),
        )
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: NodeId, scale: T, shift: T) -> Result<NodeId> {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push("affine", out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, scale: T) -> Result<NodeId> {
        self.affine(a, scale, T::zero())
    }

    /// Multiplies row `t` of `a` (n×d) by the scalar `m[t]` (m is n×1).
    pub fn scale_rows(&mut self, a: NodeId, m: NodeId) -> Result<NodeId> {
        let (av, mv) = (self.value(a), self.value(m));
        require_matrix("scale_rows", av)?;
        if mv.shape() != [av.rows(), 1] {
            return Err(DiffError::shape("scale_rows", av.shape(), mv.shape()));
        }
        let mut out = av.clone();
        for (i, &s) in mv.data().iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        self.push("scale_rows", out, Op::ScaleRows(a, m))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::invalid(
                "concat",
                "need at least one part and axis 0 or 1",
            ));
        }
        for &p in parts {
            require_matrix("concat", self.value(p))?;
        }
        let first = self.value(parts[0]).shape().to_vec();
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let v = self.value(p);
                if v.cols() != first[1] {
                    return Err(DiffError::shape("concat", &first, v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, first[1], data)?
        } else {
            let n = first[0];
            let mut cols = 0;
            for &p in parts {
                let v = self.value(p);
                if v.rows() != n {
                    return Err(DiffError::shape("concat", &first, v.shape()));
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(n * cols);
            for i in 0..n {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(n, cols, data)?
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    /// Mean over rows (`axis = 0`, gives 1×c) or columns (`axis = 1`, gives r×1).
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        require_matrix("mean_axis", av)?;
        let (r, c) = (av.rows(), av.cols());
        if r == 0 || c == 0 {
            return Err(DiffError::invalid("mean_axis", "empty matrix"));
        }
        let out = match axis {
            0 => {
                let mut s = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &v) in s.iter_mut().zip(av.row(i)) {
                        *o += v;
                    }
                }
                let inv = T::one() / T::of(r as f64);
                Tensor::matrix(1, c, s.into_iter().map(|v| v * inv).collect())?
            }
            1 => {
                let inv = T::one() / T::of(c as f64);
                let s = (0..r)
                    .map(|i| av.row(i).iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::matrix(r, 1, s)?
            }
            _ => return Err(DiffError::invalid("mean_axis", "axis must be 0 or 1")),
        };
        self.push("mean_axis", out, Op::Mean(a, axis))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(T::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        require_matrix("softmax", &out)?;
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        self.push("softmax", out, Op::Softmax(a))
    }

    /// Row-wise `softmax((logits + noise) / tau)`. `noise` holds Gumbel(0,1)
    /// draws; `None` means zero noise.
    pub fn gumbel_softmax(&mut self, logits: NodeId, tau: T, noise: Option<&Tensor<T>>) -> Result<NodeId> {
        if tau <= T::zero() || !tau.is_finite() {
            return Err(DiffError::invalid(
                "gumbel_softmax",
                format!("temperature must be > 0, got {tau}"),
            ));
        }
        let mut out = self.value(logits).clone();
        require_matrix("gumbel_softmax", &out)?;
        if let Some(g) = noise {
            same_shape("gumbel_softmax", out.shape(), g.shape())?;
            out.add_assign(g);
        }
        let inv = T::one() / tau;
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for v in row.iter_mut() {
                *v *= inv;
            }
            softmax_row(row);
        }
        self.push("gumbel_softmax", out, Op::GumbelSoftmax(logits, tau))
    }

    /// `out[i] = a[index[i]]`
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        require_matrix("gather_rows", av)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= av.rows()) {
            return Err(DiffError::invalid(
                "gather_rows",
                format!("row {bad} out of range {}", av.rows()),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * av.cols());
        for &i in index {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::matrix(index.len(), av.cols(), data)?;
        self.push("gather_rows", out, Op::GatherRows(a, index.to_vec()))
    }

    /// Same-length 1-D convolution: `x: n×c_in`, `w: ks×c_in×c_out`, `b: 1×c_out`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = layers::conv1d_forward(self.value(x), self.value(w), self.value(b))?;
        self.push("conv1d", out, Op::Conv1d { x, w, b })
    }

    /// Full GRU state sequence (n×d) for input `x: n×f`.
    pub fn gru(&mut self, x: NodeId, w: NodeId, u: NodeId, b: NodeId, h0: Option<NodeId>) -> Result<NodeId> {
        let (hs, gates) = layers::gru_forward(
            self.value(x),
            self.value(w),
            self.value(u),
            self.value(b),
            h0.map(|h| self.value(h)),
        )?;
        self.push(
            "gru",
            hs,
            Op::Gru {
                x,
                w,
                u,
                b,
                h0,
                gates,
            },
        )
    }

    /// Batch-mean of `−Σ_c target·log softmax(logits)`; `target` rows must be
    /// distributions.
    pub fn cross_entropy(&mut self, logits: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        require_matrix("cross_entropy", lv)?;
        same_shape("cross_entropy", lv.shape(), target.shape())?;
        let tol = T::of(1e-6);
        for i in 0..target.rows() {
            let row = target.row(i);
            if row.iter().any(|&v| v < T::zero() || !v.is_finite()) {
                return Err(DiffError::invalid(
                    "cross_entropy",
                    format!("target row {i} has a negative entry"),
                ));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(DiffError::invalid(
                    "cross_entropy",
                    format!("target row {i} sums to {s}"),
                ));
            }
        }
        let b = lv.rows();
        let mut total = T::zero();
        for i in 0..b {
            let l = lv.row(i);
            let lse = log_sum_exp(l);
            for (&t, &x) in target.row(i).iter().zip(l) {
                if t != T::zero() {
                    total += t * (lse - x);
                }
            }
        }
        let out = Tensor::scalar(total / T::of(b as f64));
        self.push("cross_entropy", out, Op::CrossEntropy(logits, target.clone()))
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut s = T::zero();
        for &(n, w) in terms {
            let v = self.value(n);
            if v.len() != 1 {
                return Err(DiffError::shape("weighted_sum", v.shape(), &[1, 1]));
            }
            s += w * v.item();
        }
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from a scalar root. Earlier gradients are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(DiffError::invalid("backward", "root must be a scalar"));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&shape, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (id, t) in contribs {
                let node = &mut self.nodes[id.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => node.grad = Some(t),
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients that reached parameter nodes into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for n in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&n.op, &n.grad) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    /// Sign pattern of every ReLU input, in node order. Two evaluations of
    /// one loss with different patterns lie on different linear pieces.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.value(a).data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm_nt(g.data(), bv.data(), da.data_mut(), m, n, k);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm_tn(av.data(), g.data(), db.data_mut(), m, k, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm_nn(g.data(), bv.data(), da.data_mut(), m, n, k);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm_tn(g.data(), av.data(), db.data_mut(), m, n, k);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, layers::col_sums(g)));
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    out.push((*a, zip_map(g, bv, |x, y| x * y)));
                }
                if self.needs(*b) {
                    out.push((*b, zip_map(g, av, |x, y| x * y)));
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                out.push((*a, g.map(|v| v * s)));
            }
            Op::ScaleRows(a, m) => {
                let (av, mv) = (self.value(*a), self.value(*m));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (r, &s) in mv.data().iter().enumerate() {
                        for v in da.row_mut(r) {
                            *v *= s;
                        }
                    }
                    out.push((*a, da));
                }
                if self.needs(*m) {
                    let dm = (0..av.rows())
                        .map(|r| crate::kernels::dot(g.row(r), av.row(r)))
                        .collect();
                    out.push((*m, Tensor::matrix(av.rows(), 1, dm).expect("mask shape")));
                }
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (r, c) = (pv.rows(), pv.cols());
                    if self.needs(p) {
                        let part = if *axis == 0 {
                            let cols = g.cols();
                            Tensor::matrix(r, c, g.data()[offset * cols..(offset + r) * cols].to_vec())
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for row in 0..r {
                                d.extend_from_slice(&g.row(row)[offset..offset + c]);
                            }
                            Tensor::matrix(r, c, d)
                        };
                        out.push((p, part.expect("concat part shape")));
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Mean(a, axis) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut da = Tensor::zeros(av.shape());
                if *axis == 0 {
                    let inv = T::one() / T::of(r as f64);
                    for row in 0..r {
                        for (o, &v) in da.row_mut(row).iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                } else {
                    let inv = T::one() / T::of(c as f64);
                    for row in 0..r {
                        let v = g.data()[row] * inv;
                        da.row_mut(row).iter_mut().for_each(|o| *o = v);
                    }
                }
                out.push((*a, da));
            }
            Op::Sigmoid(a) => out.push((*a, zip_map(g, y, |gv, s| gv * s * (T::one() - s)))),
            Op::Tanh(a) => out.push((*a, zip_map(g, y, |gv, t| gv * (T::one() - t * t)))),
            Op::Relu(a) => out.push((
                *a,
                zip_map(g, y, |gv, v| if v > T::zero() { gv } else { T::zero() }),
            )),
            Op::Softmax(a) => out.push((*a, softmax_backward(y, g, T::one()))),
            Op::GumbelSoftmax(a, tau) => {
                out.push((*a, softmax_backward(y, g, T::one() / *tau)));
            }
            Op::GatherRows(a, index) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.shape());
                for (r, &src) in index.iter().enumerate() {
                    for (o, &v) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                out.push((*a, da));
            }
            Op::Conv1d { x, w, b } => {
                let grads = layers::conv1d_backward(self.value(*x), self.value(*w), g, self.needs(*x));
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    out.push((*w, grads.dw));
                }
                if self.needs(*b) {
                    out.push((*b, grads.db));
                }
            }
            Op::Gru {
                x,
                w,
                u,
                b,
                h0,
                gates,
            } => {
                let grads = layers::gru_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*u),
                    h0.map(|h| self.value(h)),
                    y,
                    gates,
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    out.push((*w, grads.dw));
                }
                if self.needs(*u) {
                    out.push((*u, grads.du));
                }
                if self.needs(*b) {
                    out.push((*b, grads.db));
                }
                if let Some(h) = h0 {
                    if self.needs(*h) {
                        out.push((*h, grads.dh0));
                    }
                }
            }
            Op::CrossEntropy(logits, target) => {
                let lv = self.value(*logits);
                let scale = g.item() / T::of(lv.rows() as f64);
                let mut dl = lv.clone();
                let c = dl.cols();
                for (r, row) in dl.data_mut().chunks_mut(c).enumerate() {
                    softmax_row(row);
                    for (v, &t) in row.iter_mut().zip(target.row(r)) {
                        *v = (*v - t) * scale;
                    }
                }
                out.push((*logits, dl));
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(n, w) in terms {
                    if self.needs(n) {
                        let shape = self.value(n).shape().to_vec();
                        out.push((n, Tensor::full(&shape, gv * w)));
                    }
                }
            }
        }
        out.retain(|(id, _)| self.needs(*id));
        out
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

/// `dx = scale · y ⊙ (g − Σ g⊙y)` row-wise.
fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, scale: T) -> Tensor<T> {
    let c = y.cols();
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let s = crate::kernels::dot(yr, gr);
        for ((o, &yv), &gv) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(yr).zip(gr) {
            *o = scale * yv * (gv - s);
        }
    }
    dx
}
