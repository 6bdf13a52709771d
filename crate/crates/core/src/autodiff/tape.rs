//! Recording of primitive operations and the reverse sweep.
//!
//! Nodes are appended in execution order, so a node's inputs always have
//! smaller ids. `backward` walks the node list from the loss down to the
//! first node and accumulates adjoints.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use thiserror::Error;

use super::batchnorm::BatchNormState;
use super::tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {shapes:?} ({detail})")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called before any forward operation was recorded")]
    EmptyTape,
}

fn shape_err<T>(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> Result<T, AutogradError> {
    Err(AutogradError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    })
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Gelu { a: Var },
    MeanAxis { a: Var, axis: usize },
    Concat { a: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { a: Var },
    MaskedFill { a: Var, mask: Vec<bool> },
    Transpose { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    PrefixMean { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::MeanAxis { .. } => "mean_over_axis",
            Op::Concat { .. } => "concat",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::PrefixMean { .. } => "prefix_mean",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Invocation counts per primitive plus the number of rows pushed through
/// matrix products.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpStats {
    pub invocations: BTreeMap<&'static str, usize>,
    pub matmul_rows: usize,
}

impl OpStats {
    pub fn count(&self, op: &str) -> usize {
        self.invocations.get(op).copied().unwrap_or(0)
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    stats: OpStats,
    relu_signs: Option<std::collections::hash_map::DefaultHasher>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stats: OpStats::default(),
            relu_signs: None,
        }
    }

    /// A tape that also fingerprints ReLU activation patterns (see
    /// [`Tape::kink_signature`]). Costs one hash per activation.
    pub fn with_kink_tracking() -> Self {
        Self {
            relu_signs: Some(Default::default()),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> &OpStats {
        &self.stats
    }

    /// Hash of the activation pattern of every ReLU recorded so far. Two
    /// forward passes with equal signatures lie on the same smooth piece.
    /// Zero when tracking is off.
    pub fn kink_signature(&self) -> u64 {
        self.relu_signs.as_ref().map_or(0, |h| h.finish())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        *self.stats.invocations.entry(op.name()).or_insert(0) += 1;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => {
                vec![a, b]
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::MeanAxis { a, .. }
            | Op::Softmax { a }
            | Op::MaskedFill { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::IndexSelect { a, .. }
            | Op::PrefixMean { a }
            | Op::SumAll { a }
            | Op::MeanAll { a } => vec![a],
        }
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check(&self, v: Var) -> Result<(), AutogradError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutogradError::UnknownVar(v.0))
        }
    }

    // ---- primitives -------------------------------------------------------

    /// `[..., k] x [k, n] -> [..., n]` (rows of `a` against one matrix), or
    /// `[b, m, k] x [b, m', k.. ]` batched products with equal leading dim.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() {
            return shape_err("matmul", &[&sa, &sb], "lhs must have at least one axis");
        }
        match sb.len() {
            2 => {
                let (kk, n) = (sb[0], sb[1]);
                if *sa.last().unwrap() != kk {
                    return shape_err("matmul", &[&sa, &sb], "inner dimensions differ");
                }
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let mut out = vec![T::zero(); rows * n];
                gemm(rows, kk, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
                let mut shape = sa.clone();
                *shape.last_mut().unwrap() = n;
                self.stats.matmul_rows += rows;
                Ok(self.push(Tensor::from_vec(&shape, out), Op::MatMul { a, b, batched: false }))
            }
            3 => {
                if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                    return shape_err("matmul", &[&sa, &sb], "batched product needs [b,m,k] x [b,k,n]");
                }
                let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = vec![T::zero(); bt * m * n];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                for i in 0..bt {
                    gemm(
                        m,
                        kk,
                        n,
                        &ad[i * m * kk..(i + 1) * m * kk],
                        false,
                        &bd[i * kk * n..(i + 1) * kk * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                self.stats.matmul_rows += bt * m;
                Ok(self.push(Tensor::from_vec(&[bt, m, n], out), Op::MatMul { a, b, batched: true }))
            }
            _ => shape_err("matmul", &[&sa, &sb], "rhs must be 2-D or 3-D"),
        }
    }

    /// Elementwise sum. `b` may match the trailing axes of `a`, in which
    /// case it is repeated over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add", &[sa, sb], "rhs must equal the trailing axes of lhs");
        }
        let inner = self.value(b).numel();
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        if inner > 0 {
            for chunk in out.data_mut().chunks_mut(inner) {
                for (o, &v) in chunk.iter_mut().zip(bd) {
                    *o = *o + v;
                }
            }
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutogradError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return shape_err(op, &[self.shape(a), self.shape(b)], "shapes must match");
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.shape(a), data);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.shape(a), data);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutogradError> {
        self.check(a)?;
        let c = T::from_f64(c);
        let out = self.value(a).map(|v| v * c);
        Ok(self.push(out, Op::Scale { a, c }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        if let Some(signs) = self.relu_signs.as_mut() {
            for &v in self.nodes[a.0].value.data() {
                (v > T::zero()).hash(signs);
            }
        }
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu { a }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        let out = self.value(a).map(|x| {
            let (c, k) = (T::from_f64(GELU_C), T::from_f64(0.044715));
            let half = T::from_f64(0.5);
            half * x * (T::one() + tanh_via_exp(c * (x + k * x * x * x)))
        });
        Ok(self.push(out, Op::Gelu { a }))
    }

    /// Mean over one axis, which is removed from the shape. Sums are
    /// accumulated in double precision, so for `f32` data the result does
    /// not depend on the order of the reduced elements in practice.
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err("mean_over_axis", &[&s], format!("axis {axis} missing or empty"));
        }
        let (pre, n, post) = split3(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); pre * post];
        let mut acc = vec![0.0f64; post];
        for p in 0..pre {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let row = &x[(p * n + i) * post..(p * n + i + 1) * post];
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            for (o, s) in out[p * post..(p + 1) * post].iter_mut().zip(&acc) {
                *o = T::from_f64(s / n as f64);
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::MeanAxis { a, axis }))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err("concat", &[&sa, &sb], "leading axes must match");
        }
        let (p, q) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * p..(r + 1) * p]);
            out.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Concat { a, b }))
    }

    /// Batch normalization of `x: [n, f]` over its rows. In training mode the
    /// batch statistics are used and the running estimates in `state` are
    /// updated; in eval mode only the running estimates are read.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState) -> Result<Var, AutogradError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let s = self.shape(x).to_vec();
        let f = state.features();
        if s.len() != 2 || s[1] != f || self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return shape_err(
                "batchnorm",
                &[&s, self.shape(gamma), self.shape(beta)],
                format!("expected [n, {f}] input with [{f}] affine parameters"),
            );
        }
        let n = s[0];
        let train = state.is_training();
        if train && n == 0 {
            return shape_err("batchnorm", &[&s], "training mode needs at least one row");
        }
        let xd = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0f64; f];
            for r in 0..n {
                for c in 0..f {
                    mean[c] += xd[r * f + c].as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0f64; f];
            for r in 0..n {
                for c in 0..f {
                    let dlt = xd[r * f + c].as_f64() - mean[c];
                    var[c] += dlt * dlt;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        } else {
            (state.running_mean().to_vec(), state.running_var().to_vec())
        };
        let eps = state.eps();
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * f];
        let mut out = vec![T::zero(); n * f];
        for r in 0..n {
            for c in 0..f {
                let h = (xd[r * f + c] - mean_t[c]) * inv_std[c];
                xhat[r * f + c] = h;
                out[r * f + c] = gd[c] * h + bd[c];
            }
        }
        if train {
            state.update(&mean, &var, n);
        }
        Ok(self.push(
            Tensor::from_vec(&s, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutogradError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let f = *s.last().unwrap_or(&0);
        if f == 0 || self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return shape_err("layer_norm", &[&s, self.shape(gamma), self.shape(beta)], "affine parameters must match last axis");
        }
        let rows = self.value(x).numel() / f;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * f];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * f];
        for r in 0..rows {
            let row = &xd[r * f..(r + 1) * f];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / f as f64;
            let is = T::from_f64(1.0 / (var + LN_EPS).sqrt());
            let m = T::from_f64(mean);
            inv_std[r] = is;
            for c in 0..f {
                let h = (row[c] - m) * is;
                xhat[r * f + c] = h;
                out[r * f + c] = gd[c] * h + bd[c];
            }
        }
        Ok(self.push(Tensor::from_vec(&s, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        let f = *s.last().unwrap_or(&0);
        if f == 0 {
            return shape_err("softmax", &[&s], "last axis must be non-empty");
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(f) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Ok(self.push(out, Op::Softmax { a }))
    }

    /// Replaces entries where `mask` is true with `value`. `mask` covers the
    /// trailing axes of `a` and repeats over the leading ones.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var, AutogradError> {
        self.check(a)?;
        let n = self.value(a).numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return shape_err("masked_fill", &[self.shape(a), &[mask.len()]], "mask must tile the trailing axes");
        }
        let v = T::from_f64(value);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(mask.len()) {
            for (o, &m) in chunk.iter_mut().zip(mask) {
                if m {
                    *o = v;
                }
            }
        }
        Ok(self.push(out, Op::MaskedFill { a, mask: mask.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err("transpose", &[&s], "needs at least two axes");
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(self.value(a).data(), m, n);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        self.check(a)?;
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return shape_err("reshape", &[self.shape(a), shape], "element counts differ");
        }
        let out = self.value(a).clone().reshaped(shape.to_vec());
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", &[&s], format!("{perm:?} is not a permutation of the axes"));
        }
        let (shape, out) = permute_data(self.value(a).data(), &s, perm);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Permute { a, perm: perm.to_vec() }))
    }

    /// Picks `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || indices.iter().any(|&i| i >= s[axis]) {
            return shape_err("index_select", &[&s], format!("indices out of range on axis {axis}"));
        }
        let (pre, n, post) = split3(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(pre * indices.len() * post);
        for p in 0..pre {
            for &i in indices {
                out.extend_from_slice(&x[(p * n + i) * post..(p * n + i + 1) * post]);
            }
        }
        let mut shape = s.clone();
        shape[axis] = indices.len();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::IndexSelect { a, axis, indices: indices.to_vec() }))
    }

    /// For `a: [b, k, f]`, row `j` of the output is the mean of input rows
    /// `0..j` (exclusive prefix), and row 0 is zero.
    pub fn prefix_mean(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return shape_err("prefix_mean", &[&s], "expected [batch, set, features]");
        }
        let (b, k, f) = (s[0], s[1], s[2]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); b * k * f];
        let mut acc = vec![0.0f64; f];
        for bi in 0..b {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for j in 1..k {
                let prev = &x[(bi * k + j - 1) * f..(bi * k + j) * f];
                for (s, &v) in acc.iter_mut().zip(prev) {
                    *s += v.as_f64();
                }
                for (o, s) in out[(bi * k + j) * f..(bi * k + j + 1) * f].iter_mut().zip(&acc) {
                    *o = T::from_f64(s / j as f64);
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&s, out), Op::PrefixMean { a }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::SumAll { a }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.check(a)?;
        let n = self.value(a).numel();
        if n == 0 {
            return shape_err("mean", &[self.shape(a)], "empty tensor");
        }
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s / n as f64)), Op::MeanAll { a }))
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, AutogradError> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    // ---- reverse sweep ----------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutogradError> {
        if self.nodes.is_empty() {
            return Err(AutogradError::EmptyTape);
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(AutogradError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batched } => {
                let (av, bv) = (self.value(a), self.value(b));
                if !batched {
                    let (kk, n) = (bv.shape()[0], bv.shape()[1]);
                    let rows = if n == 0 { 0 } else { gd.len() / n };
                    if self.wants(a) {
                        let mut ga = vec![T::zero(); rows * kk];
                        gemm(rows, n, kk, gd, false, bv.data(), true, &mut ga, false);
                        Self::accumulate(grads, a, Tensor::from_vec(av.shape(), ga));
                    }
                    if self.wants(b) {
                        let mut gb = vec![T::zero(); kk * n];
                        gemm(kk, rows, n, av.data(), true, gd, false, &mut gb, false);
                        Self::accumulate(grads, b, Tensor::from_vec(bv.shape(), gb));
                    }
                } else {
                    let (bt, m, kk) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = bv.shape()[2];
                    if self.wants(a) {
                        let mut ga = vec![T::zero(); bt * m * kk];
                        for i in 0..bt {
                            gemm(
                                m,
                                n,
                                kk,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &bv.data()[i * kk * n..(i + 1) * kk * n],
                                true,
                                &mut ga[i * m * kk..(i + 1) * m * kk],
                                false,
                            );
                        }
                        Self::accumulate(grads, a, Tensor::from_vec(av.shape(), ga));
                    }
                    if self.wants(b) {
                        let mut gb = vec![T::zero(); bt * kk * n];
                        for i in 0..bt {
                            gemm(
                                kk,
                                m,
                                n,
                                &av.data()[i * m * kk..(i + 1) * m * kk],
                                true,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[i * kk * n..(i + 1) * kk * n],
                                false,
                            );
                        }
                        Self::accumulate(grads, b, Tensor::from_vec(bv.shape(), gb));
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let bs = self.shape(b);
                    let inner = bs.iter().product::<usize>();
                    let mut gb = vec![T::zero(); inner];
                    if inner > 0 {
                        for chunk in gd.chunks(inner) {
                            for (o, &v) in gb.iter_mut().zip(chunk) {
                                *o = *o + v;
                            }
                        }
                    }
                    Self::accumulate(grads, b, Tensor::from_vec(bs, gb));
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, a, Tensor::from_vec(av.shape(), d));
                }
                if self.wants(b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, b, Tensor::from_vec(bv.shape(), d));
                }
            }
            &Op::Scale { a, c } => {
                Self::accumulate(grads, a, g.map(|v| v * c));
            }
            &Op::Relu { a } => {
                let x = self.value(a).data();
                let d = gd.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                Self::accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            &Op::Gelu { a } => {
                let x = self.value(a).data();
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(0.044715));
                let (half, three) = (T::from_f64(0.5), T::from_f64(3.0));
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let t = tanh_via_exp(c * (xv + k * xv * xv * xv));
                        let du = c * (T::one() + three * k * xv * xv);
                        gv * (half * (T::one() + t) + half * xv * (T::one() - t * t) * du)
                    })
                    .collect();
                Self::accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            &Op::MeanAxis { a, axis } => {
                let s = self.shape(a);
                let (pre, n, post) = split3(s, axis);
                let inv = T::from_f64(1.0 / n as f64);
                let mut d = vec![T::zero(); pre * n * post];
                for p in 0..pre {
                    let src = &gd[p * post..(p + 1) * post];
                    for i in 0..n {
                        for (o, &v) in d[(p * n + i) * post..(p * n + i + 1) * post].iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                }
                Self::accumulate(grads, a, Tensor::from_vec(s, d));
            }
            &Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (p, q) = (*sa.last().unwrap(), *sb.last().unwrap());
                let rows = if p + q == 0 { 0 } else { gd.len() / (p + q) };
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    ga.extend_from_slice(&gd[r * (p + q)..r * (p + q) + p]);
                    gb.extend_from_slice(&gd[r * (p + q) + p..(r + 1) * (p + q)]);
                }
                if self.wants(a) {
                    Self::accumulate(grads, a, Tensor::from_vec(sa, ga));
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, Tensor::from_vec(sb, gb));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*x);
                let (n, f) = (s[0], s[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                for r in 0..n {
                    for c in 0..f {
                        dgamma[c] = dgamma[c] + gd[r * f + c] * xhat[r * f + c];
                        dbeta[c] = dbeta[c] + gd[r * f + c];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    if *train {
                        let nn = T::from_f64(n as f64);
                        for c in 0..f {
                            // dxhat = g·gamma; dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            let k1 = gam[c] * dbeta[c];
                            let k2 = gam[c] * dgamma[c];
                            for r in 0..n {
                                let dxh = gd[r * f + c] * gam[c];
                                dx[r * f + c] = inv_std[c] / nn * (nn * dxh - k1 - xhat[r * f + c] * k2);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..f {
                                dx[r * f + c] = gd[r * f + c] * gam[c] * inv_std[c];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(s, dx));
                }
                if self.wants(*gamma) {
                    Self::accumulate(grads, *gamma, Tensor::from_vec(&[f], dgamma));
                }
                if self.wants(*beta) {
                    Self::accumulate(grads, *beta, Tensor::from_vec(&[f], dbeta));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x);
                let f = *s.last().unwrap();
                let rows = gd.len() / f;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                let mut dx = vec![T::zero(); rows * f];
                let ff = T::from_f64(f as f64);
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..f {
                        let i = r * f + c;
                        dgamma[c] = dgamma[c] + gd[i] * xhat[i];
                        dbeta[c] = dbeta[c] + gd[i];
                        let dxh = gd[i] * gam[c];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[i];
                    }
                    for c in 0..f {
                        let i = r * f + c;
                        let dxh = gd[i] * gam[c];
                        dx[i] = inv_std[r] / ff * (ff * dxh - s1 - xhat[i] * s2);
                    }
                }
                if self.wants(*x) {
                    Self::accumulate(grads, *x, Tensor::from_vec(s, dx));
                }
                if self.wants(*gamma) {
                    Self::accumulate(grads, *gamma, Tensor::from_vec(&[f], dgamma));
                }
                if self.wants(*beta) {
                    Self::accumulate(grads, *beta, Tensor::from_vec(&[f], dbeta));
                }
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let f = *g.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(f).zip(y.chunks(f)).zip(gd.chunks(f)) {
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for ((o, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                Self::accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            Op::MaskedFill { a, mask } => {
                let mut d = g.clone();
                for chunk in d.data_mut().chunks_mut(mask.len()) {
                    for (o, &m) in chunk.iter_mut().zip(mask) {
                        if m {
                            *o = T::zero();
                        }
                    }
                }
                Self::accumulate(grads, *a, d);
            }
            &Op::Transpose { a } => {
                let s = g.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let d = transpose_last2(gd, m, n);
                Self::accumulate(grads, a, Tensor::from_vec(self.shape(a), d));
            }
            &Op::Reshape { a } => {
                Self::accumulate(grads, a, g.clone().reshaped(self.shape(a).to_vec()));
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, d) = permute_data(gd, g.shape(), &inverse);
                Self::accumulate(grads, *a, Tensor::from_vec(self.shape(*a), d));
            }
            Op::IndexSelect { a, axis, indices } => {
                let s = self.shape(*a);
                let (pre, n, post) = split3(s, *axis);
                let mut d = vec![T::zero(); pre * n * post];
                for p in 0..pre {
                    for (t, &i) in indices.iter().enumerate() {
                        let src = &gd[(p * indices.len() + t) * post..(p * indices.len() + t + 1) * post];
                        for (o, &v) in d[(p * n + i) * post..(p * n + i + 1) * post].iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                Self::accumulate(grads, *a, Tensor::from_vec(s, d));
            }
            &Op::PrefixMean { a } => {
                let s = self.shape(a);
                let (b, k, f) = (s[0], s[1], s[2]);
                let mut d = vec![T::zero(); b * k * f];
                let mut acc = vec![T::zero(); f];
                for bi in 0..b {
                    acc.iter_mut().for_each(|v| *v = T::zero());
                    for i in (0..k).rev() {
                        d[(bi * k + i) * f..(bi * k + i + 1) * f].copy_from_slice(&acc);
                        if i >= 1 {
                            let inv = T::from_f64(1.0 / i as f64);
                            for (s, &v) in acc.iter_mut().zip(&gd[(bi * k + i) * f..(bi * k + i + 1) * f]) {
                                *s = *s + v * inv;
                            }
                        }
                    }
                }
                Self::accumulate(grads, a, Tensor::from_vec(s, d));
            }
            &Op::SumAll { a } => {
                Self::accumulate(grads, a, Tensor::full(self.shape(a), gd[0]));
            }
            &Op::MeanAll { a } => {
                let n = self.value(a).numel();
                Self::accumulate(grads, a, Tensor::full(self.shape(a), gd[0] / T::from_f64(n as f64)));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `(prod before, len, prod after)` around `axis`.
fn split3(s: &[usize], axis: usize) -> (usize, usize, usize) {
    (s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product())
}

fn transpose_last2<T: Copy + Default>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    let block = m * n;
    if block == 0 {
        return out;
    }
    for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// `1 - 2 / (e^{2u} + 1)`: one `exp` instead of libm's slower `tanh`.
fn tanh_via_exp<T: Scalar>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((u * two).exp() + T::one())
}

fn permute_data<T: Copy + Default>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if nd == 0 {
        return (out_shape, x.to_vec());
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let (inner, inner_stride) = (out_shape[nd - 1], strides[nd - 1]);
    let outer: usize = out_shape[..nd - 1].iter().product();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| x[base + i * inner_stride]));
        }
        let mut ax = nd - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
impl Var {
    pub(crate) fn from_raw_for_tests(id: usize) -> Self {
        Var(id)
    }
}
