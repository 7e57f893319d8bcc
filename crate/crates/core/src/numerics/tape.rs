//! Reverse-mode differentiation over a linear tape of coarse-grained ops.
//!
//! Every op works on the "matrix view" of its operands: the last axis is
//! the column axis and all leading axes are flattened into rows. Values are
//! materialized eagerly; [`Tape::backward`] walks the tape in reverse and
//! returns gradients for every node and every parameter that was read.

use std::fmt;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row index that gathers a zero row.
pub const PAD: usize = usize::MAX;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Contiguous row ranges `offsets[s]..offsets[s + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("segment offsets must start at 0 and be nondecreasing"));
        }
        Ok(Segments { offsets })
    }

    /// `count` segments of `size` rows each.
    pub fn uniform(count: usize, size: usize) -> Self {
        Segments { offsets: (0..=count).map(|s| s * size).collect() }
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Segments { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of rows covered.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

/// Op categories, used for diagnostics and for fault injection in the
/// gradient-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Gather,
    Concat,
    Reshape,
    SegmentSoftmax,
    SegmentSum,
    SegmentMean,
    SegmentMax,
    SoftmaxRows,
    LayerNorm,
    MeanRows,
    SumAll,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::SegmentSoftmax,
        OpKind::SegmentSum,
        OpKind::SegmentMean,
        OpKind::SegmentMax,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::MeanRows,
        OpKind::SumAll,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::SegmentSoftmax => "segment_softmax",
            OpKind::SegmentSum => "segment_sum",
            OpKind::SegmentMean => "segment_mean",
            OpKind::SegmentMax => "segment_max",
            OpKind::SoftmaxRows => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::MeanRows => "mean_rows",
            OpKind::SumAll => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Gather { x: Var, idx: Arc<[usize]> },
    Concat(Vec<Var>),
    Reshape(Var),
    SegmentSoftmax { x: Var, seg: Arc<Segments> },
    SegmentSum { x: Var, seg: Arc<Segments> },
    SegmentMean { x: Var, seg: Arc<Segments> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat(_) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SegmentSoftmax { .. } => OpKind::SegmentSoftmax,
            Op::SegmentSum { .. } => OpKind::SegmentSum,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::SegmentMax { .. } => OpKind::SegmentMax,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::SumAll(_) => OpKind::SumAll,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node<T> {
    // `None` for parameters, whose values live in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients in store order (`None` for unused parameters).
    pub fn into_param_grads(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    check_finite: bool,
    non_finite: Option<OpKind>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new(), fault: None, check_finite: false, non_finite: None }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape { params: Some(params), ..Self::new() }
    }

    /// Records the first op whose output contains NaN or infinity; see
    /// [`Tape::check_finite`].
    pub fn enable_finite_checks(&mut self) {
        self.check_finite = true;
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(k) => Err(Error::NonFinite(k.name().to_string())),
            None => Ok(()),
        }
    }

    /// Deliberately corrupts the backward rule of one op kind. Only used to
    /// prove that the gradient checks can fail.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if self.check_finite && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = op.kind();
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.params.ok_or_else(|| Error::invalid("tape has no parameter store"))?;
        if id.0 >= store.len() {
            return Err(Error::invalid(format!("unknown parameter {id:?}")));
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x · w (+ b)` with `x` viewed as rows × k, `w` as k × m and `b` of length m.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, k, m) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![T::ZERO; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::shape(format!("linear: bias {:?} for width {m}", bv.shape())));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(n, k, m, xv.data(), false, wv.data(), false, T::ONE, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(value, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Selects rows of `x`; an index equal to [`PAD`] yields a zero row.
    pub fn gather(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = vec![T::ZERO; idx.len() * c];
        for (dst, &i) in out.chunks_exact_mut(c.max(1)).zip(idx.iter()) {
            if i == PAD {
                continue;
            }
            if i >= rows {
                return Err(Error::shape(format!("gather: row {i} of {rows}")));
            }
            dst.copy_from_slice(xv.row(i));
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(value, Op::Gather { x, idx }, &[x]))
    }

    /// Concatenates along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn check_segments(&self, x: Var, seg: &Segments, name: &str) -> Result<()> {
        let rows = self.value(x).rows();
        if seg.total() != rows {
            return Err(Error::shape(format!("{name}: segments cover {} of {rows} rows", seg.total())));
        }
        Ok(())
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments(x, &seg, "segment_softmax")?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        let mut mx = vec![T::ZERO; c];
        let mut tot = vec![T::ZERO; c];
        for s in 0..seg.count() {
            let r = seg.range(s);
            if r.is_empty() {
                continue;
            }
            mx.copy_from_slice(xv.row(r.start));
            for i in r.clone() {
                for (m, &v) in mx.iter_mut().zip(xv.row(i)) {
                    *m = m.max(v);
                }
            }
            tot.fill(T::ZERO);
            for i in r.clone() {
                for ((o, t), &m) in out[i * c..(i + 1) * c].iter_mut().zip(tot.iter_mut()).zip(&mx) {
                    *o = (*o - m).exp();
                    *t += *o;
                }
            }
            for i in r {
                for (o, &t) in out[i * c..(i + 1) * c].iter_mut().zip(&tot) {
                    *o = *o / t;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::SegmentSoftmax { x, seg }, &[x]))
    }

    pub fn segment_sum(&mut self, x: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments(x, &seg, "segment_sum")?;
        let value = segment_reduce(self.value(x), &seg, false);
        Ok(self.push(value, Op::SegmentSum { x, seg }, &[x]))
    }

    /// Mean over each segment; empty segments produce zero rows.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments(x, &seg, "segment_mean")?;
        let value = segment_reduce(self.value(x), &seg, true);
        Ok(self.push(value, Op::SegmentMean { x, seg }, &[x]))
    }

    /// Elementwise max over each segment. Ties resolve to the first row.
    pub fn segment_max(&mut self, x: Var, seg: &Segments) -> Result<Var> {
        self.check_segments(x, seg, "segment_max")?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::ZERO; seg.count() * c];
        let mut argmax = vec![0usize; seg.count() * c];
        for s in 0..seg.count() {
            let r = seg.range(s);
            if r.is_empty() {
                return Err(Error::invalid("segment_max: empty segment"));
            }
            for j in 0..c {
                let mut best = r.start;
                for i in r.clone() {
                    if xv.data()[i * c + j] > xv.data()[best * c + j] {
                        best = i;
                    }
                }
                out[s * c + j] = xv.data()[best * c + j];
                argmax[s * c + j] = best;
            }
        }
        let value = Tensor::new(&[seg.count(), c], out)?;
        Ok(self.push(value, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance (epsilon 1e-5),
    /// followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c == 0 || self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(format!("layer_norm: width {c}")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = xv.rows();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut xhat = vec![T::ZERO; n * c];
        let mut inv_std = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; n * c];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Mean over rows, producing a 1 × cols tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::invalid("mean_rows: no rows"));
        }
        let seg = Segments::uniform(1, xv.rows());
        let value = segment_reduce(xv, &seg, true);
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(Error::shape(format!("cross_entropy: {} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / T::from_f64(b as f64));
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(loss, Tensor::full(self.value(loss).shape(), T::ONE))
    }

    /// Reverse pass of the scalar `sum(seed * out)` without recording it.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let loss = out;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(seed);
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut params: Vec<Option<Tensor<T>>> = Vec::with_capacity(n_params);
        params.resize_with(n_params, || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(id) = node.op {
                accumulate(&mut params[id.0], &g);
                grads[i] = Some(g);
                continue;
            }
            let mut contribs = self.local_backward(Var(i), &g);
            if self.fault.is_some() && node.op.kind() == self.fault {
                let bad = T::from_f64(1.5);
                for (_, t) in &mut contribs {
                    t.data_mut().iter_mut().for_each(|v| *v *= bad);
                }
            }
            for (v, t) in contribs {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], &t);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_backward(&self, out: Var, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[out.0];
        let y = node.value.as_ref().expect("op node has a value");
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![T::ZERO; n * k];
                    T::gemm(n, m, k, g.data(), false, wv.data(), true, T::ZERO, &mut dx);
                    res.push((*x, Tensor::new(xv.shape(), dx).unwrap()));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::ZERO; k * m];
                    T::gemm(k, n, m, xv.data(), true, g.data(), false, T::ZERO, &mut dw);
                    res.push((*w, Tensor::new(wv.shape(), dw).unwrap()));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::ZERO; m];
                        for row in g.data().chunks_exact(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        res.push((*b, Tensor::new(self.value(*b).shape(), db).unwrap()));
                    }
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    res.push((*a, zip_map(g, bv, |g, b| g * b)));
                }
                if self.wants(*b) {
                    res.push((*b, zip_map(g, av, |g, a| g * a)));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * *c))),
            Op::Relu(x) => {
                res.push((*x, zip_map(g, self.value(*x), |g, v| if v > T::ZERO { g } else { T::ZERO })))
            }
            Op::Gelu(x) => res.push((*x, zip_map(g, self.value(*x), |g, v| g * gelu_grad(v)))),
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let d = dx.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    if i == PAD {
                        continue;
                    }
                    for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
                res.push((*x, dx));
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        res.push((p, Tensor::new(pv.shape(), d).unwrap()));
                    }
                    start += w;
                }
            }
            Op::Reshape(x) => {
                res.push((*x, g.clone().reshape(self.value(*x).shape()).unwrap()));
            }
            Op::SegmentSoftmax { x, seg } => {
                let c = y.cols();
                let mut dx = vec![T::ZERO; y.len()];
                let mut dot = vec![T::ZERO; c];
                for s in 0..seg.count() {
                    dot.fill(T::ZERO);
                    for i in seg.range(s) {
                        for j in 0..c {
                            dot[j] += y.data()[i * c + j] * g.data()[i * c + j];
                        }
                    }
                    for i in seg.range(s) {
                        for j in 0..c {
                            let k = i * c + j;
                            dx[k] = y.data()[k] * (g.data()[k] - dot[j]);
                        }
                    }
                }
                res.push((*x, Tensor::new(y.shape(), dx).unwrap()));
            }
            Op::SegmentSum { x, seg } | Op::SegmentMean { x, seg } => {
                let mean = matches!(node.op, Op::SegmentMean { .. });
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for s in 0..seg.count() {
                    let r = seg.range(s);
                    let scale = if mean && !r.is_empty() {
                        T::ONE / T::from_f64(r.len() as f64)
                    } else {
                        T::ONE
                    };
                    let gs = &g.data()[s * c..(s + 1) * c];
                    for i in r {
                        for (o, &v) in dx.row_mut(i).iter_mut().zip(gs) {
                            *o = v * scale;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &row) in argmax.iter().enumerate() {
                    dx.data_mut()[row * c + k % c] += g.data()[k];
                }
                res.push((*x, dx));
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut dx = vec![T::ZERO; y.len()];
                for (r, d) in dx.chunks_exact_mut(c).enumerate() {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, Tensor::new(y.shape(), dx).unwrap()));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = y.cols();
                let gv = self.value(*gain).data();
                let inv_c = T::from_f64(1.0 / c as f64);
                if self.wants(*x) {
                    let mut dx = vec![T::ZERO; y.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let o = r * c;
                        let mut mean_d = T::ZERO;
                        let mut mean_dh = T::ZERO;
                        for j in 0..c {
                            let dh = g.data()[o + j] * gv[j];
                            mean_d += dh;
                            mean_dh += dh * xhat[o + j];
                        }
                        mean_d *= inv_c;
                        mean_dh *= inv_c;
                        for j in 0..c {
                            let dh = g.data()[o + j] * gv[j];
                            dx[o + j] = inv * (dh - mean_d - xhat[o + j] * mean_dh);
                        }
                    }
                    res.push((*x, Tensor::new(y.shape(), dx).unwrap()));
                }
                let mut dg = vec![T::ZERO; c];
                let mut db = vec![T::ZERO; c];
                for (k, (&gk, &h)) in g.data().iter().zip(xhat).enumerate() {
                    dg[k % c] += gk * h;
                    db[k % c] += gk;
                }
                res.push((*gain, Tensor::new(self.value(*gain).shape(), dg).unwrap()));
                res.push((*bias, Tensor::new(self.value(*bias).shape(), db).unwrap()));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let scale = T::ONE / T::from_f64(xv.rows() as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (k, o) in dx.data_mut().iter_mut().enumerate() {
                    *o = g.data()[k % c] * scale;
                }
                res.push((*x, dx));
            }
            Op::SumAll(x) => {
                res.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= T::ONE;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                res.push((*logits, Tensor::new(lv.shape(), d).unwrap()));
            }
        }
        res
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn segment_reduce<T: Real>(x: &Tensor<T>, seg: &Segments, mean: bool) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::ZERO; seg.count() * c];
    for s in 0..seg.count() {
        let r = seg.range(s);
        let dst = &mut out[s * c..(s + 1) * c];
        let len = r.len();
        for i in r {
            for (o, &v) in dst.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        if mean && len > 0 {
            let inv = T::ONE / T::from_f64(len as f64);
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Tensor::new(&[seg.count(), c], out).unwrap()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut tot = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        tot += *v;
    }
    for v in row.iter_mut() {
        *v = *v / tot;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_CUBIC) * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let a = T::from_f64(SQRT_2_OVER_PI);
    let b = T::from_f64(GELU_CUBIC);
    let th = (a * (x + b * x * x * x)).tanh();
    let dinner = a * (T::ONE + T::from_f64(3.0) * b * x * x);
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * dinner
}
