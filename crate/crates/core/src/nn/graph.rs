use std::collections::HashMap;

use super::{NnError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SegmentSoftmax(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    L2Norm(Var),
    RowNorms(Var),
    MeanPool {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SegmentSum(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<usize>,
        scale: f64,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass and replays it backwards.
///
/// Parameters are copied from the borrowed [`ParamStore`] the first time
/// they are used; after [`Graph::backward`] their gradients can be pushed
/// back with [`Graph::accumulate_param_grads`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_segments(op: &'static str, segments: &[usize], rows: usize) -> Result<(), NnError> {
    let total: usize = segments.iter().sum();
    if total != rows {
        return Err(NnError::ShapeMismatch {
            op,
            left: vec![rows],
            right: vec![total],
        });
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used for gradient checks on inputs).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.tensor(id).clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x + bias` with `bias` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            add_into(row, tb.data());
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.derived(value, Op::AddRow(x, bias), &[x, bias]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.derived(value, op, &[x])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(NnError::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Softmax taken independently over consecutive groups of a flat tensor.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x);
        check_segments("segment_softmax", segments, t.len())?;
        let mut out = t.data().to_vec();
        let mut start = 0;
        for &len in segments {
            softmax_in_place(&mut out[start..start + len]);
            start += len;
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::SegmentSoftmax(x, segments.to_vec()), &[x]))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let c = t.cols();
        if self.value(gamma).len() != c {
            return Err(shape_err("layer_norm", t, self.value(gamma)));
        }
        if self.value(beta).len() != c {
            return Err(shape_err("layer_norm", t, self.value(beta)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.rows();
        let mut normed = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            rstd.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = parts.first().ok_or(NnError::EmptyInput("concat"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(NnError::invalid(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            parts,
        ))
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.derived(Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// Euclidean norm of each row; output shape `[rows]`.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let norms: Vec<f64> = (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.derived(Tensor::vector(norms), Op::RowNorms(x), &[x])
    }

    /// Mean over `axis`; that axis is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(NnError::invalid(format!(
                "mean_pool axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if len == 0 {
            return Err(NnError::EmptyInput("mean_pool"));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::MeanPool { x, outer, len, inner }, &[x]))
    }

    fn segment_reduce(&mut self, x: Var, segments: &[usize], mean: bool) -> Result<Var, NnError> {
        let name = if mean { "segment_mean" } else { "segment_sum" };
        let t = self.value(x);
        check_segments(name, segments, t.rows())?;
        let c = t.cols();
        let mut out = vec![0.0; segments.len() * c];
        let mut r = 0;
        for (s, &len) in segments.iter().enumerate() {
            if mean && len == 0 {
                return Err(NnError::EmptyInput("segment_mean"));
            }
            let dst = &mut out[s * c..(s + 1) * c];
            for _ in 0..len {
                add_into(dst, t.row(r));
                r += 1;
            }
            if mean {
                dst.iter_mut().for_each(|v| *v /= len as f64);
            }
        }
        let value = Tensor::new([segments.len(), c], out)?;
        let op = if mean {
            Op::SegmentMean(x, segments.to_vec())
        } else {
            Op::SegmentSum(x, segments.to_vec())
        };
        Ok(self.derived(value, op, &[x]))
    }

    /// Sums consecutive groups of rows: `[rows, c]` to `[groups, c]`.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize]) -> Result<Var, NnError> {
        self.segment_reduce(x, segments, false)
    }

    /// Averages consecutive groups of rows; empty groups are an error.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize]) -> Result<Var, NnError> {
        self.segment_reduce(x, segments, true)
    }

    /// Stride-1 convolution along time with zero "same" padding.
    ///
    /// `x` is `[T, c_in]`, `w` is `[k, c_in, c_out]` with odd `k`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ws = tw.shape();
        if tx.shape().len() != 2 || ws.len() != 3 || ws[1] != tx.shape()[1] || ws[0] % 2 == 0 {
            return Err(shape_err("conv1d", tx, tw));
        }
        let (steps, c_in) = (tx.shape()[0], tx.shape()[1]);
        let (k, c_out) = (ws[0], ws[2]);
        if tb.len() != c_out {
            return Err(shape_err("conv1d", tw, tb));
        }
        let pad = k / 2;
        let mut out = Vec::with_capacity(steps * c_out);
        for _ in 0..steps {
            out.extend_from_slice(tb.data());
        }
        for t in 0..steps {
            let dst = &mut out[t * c_out..(t + 1) * c_out];
            for tap in 0..k {
                let Some(src_t) = (t + tap).checked_sub(pad).filter(|&s| s < steps) else {
                    continue;
                };
                let xs = tx.row(src_t);
                let kernel = &tw.data()[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                for (ci, &xv) in xs.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &kernel[ci * c_out..(ci + 1) * c_out];
                    for (d, &wv) in dst.iter_mut().zip(wrow) {
                        *d += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new([steps, c_out], out)?;
        Ok(self.derived(value, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(NnError::invalid(format!(
                "gather_rows needs a 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(NnError::invalid(format!(
                    "gather_rows index {i} out of range for {} rows",
                    t.rows()
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new([indices.len(), c], out)?;
        Ok(self.derived(value, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    /// Multiplies row `i` of `x` by `gains[i]`.
    pub fn scale_rows(&mut self, x: Var, gains: Var) -> Result<Var, NnError> {
        let (tx, tg) = (self.value(x), self.value(gains));
        if tg.len() != tx.rows() {
            return Err(shape_err("scale_rows", tx, tg));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for (row, &g) in out.chunks_mut(c.max(1)).zip(tg.data()) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::ScaleRows(x, gains), &[x, gains]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `sum_i weights[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, NnError> {
        let t = self.value(x);
        if weights.len() != t.len() {
            return Err(NnError::ShapeMismatch {
                op: "weighted_sum",
                left: t.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = t.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.derived(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    /// Scaled dot-product attention, `softmax(q k^T * scale) v`, evaluated
    /// independently inside each group of consecutive rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[usize], scale: f64) -> Result<Var, NnError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape().len() != 2 || tq.shape() != tk.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tv.shape().len() != 2 || tv.rows() != tq.rows() {
            return Err(shape_err("attention", tq, tv));
        }
        if tq.rows() == 0 {
            return Err(NnError::EmptyInput("attention"));
        }
        check_segments("attention", segments, tq.rows())?;
        let (d, dv) = (tq.cols(), tv.cols());
        let mut out = vec![0.0; tq.rows() * dv];
        let mut probs = Vec::with_capacity(segments.iter().map(|m| m * m).sum());
        let mut start = 0;
        for &m in segments {
            for i in start..start + m {
                let qi = tq.row(i);
                let mut row: Vec<f64> = (start..start + m)
                    .map(|j| dot(qi, &tk.data()[j * d..(j + 1) * d]) * scale)
                    .collect();
                softmax_in_place(&mut row);
                let dst = &mut out[i * dv..(i + 1) * dv];
                for (jj, &p) in row.iter().enumerate() {
                    for (o, &vv) in dst.iter_mut().zip(tv.row(start + jj)) {
                        *o += p * vv;
                    }
                }
                probs.extend(row);
            }
            start += m;
        }
        let value = Tensor::new([tq.rows(), dv], out)?;
        Ok(self.derived(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, one
    /// `m x m` block per group, concatenated.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a single-element node.
    ///
    /// Gradients are available through [`Graph::grad`] afterwards. Calling
    /// this twice without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.backward_done {
            return Err(NnError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter used in this graph (zeros if unreachable).
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(v).len()]);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds this graph's parameter gradients into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, &g);
        }
    }

    fn acc(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g, contrib),
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, gout: &[f64]) {
        // Temporarily detach the op so parents can be read while grads are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = dY B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gy = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            da[i * k + kk] = dot(gy, &tb.data()[kk * n..(kk + 1) * n]);
                        }
                    }
                    self.acc(*a, &da);
                }
                let ta = self.value(*a);
                if self.needs(*b) {
                    // dB = A^T dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gy = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ta.data()[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &g) in db[kk * n..(kk + 1) * n].iter_mut().zip(gy) {
                                *d += av * g;
                            }
                        }
                    }
                    self.acc(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, gout);
                self.acc(*b, gout);
            }
            Op::Sub(a, b) => {
                self.acc(*a, gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gout.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gout.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.acc(*a, &ga);
                self.acc(*b, &gb);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = gout.iter().zip(tb.data()).map(|(g, y)| g / y).collect();
                let gb: Vec<f64> = gout
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.acc(*a, &ga);
                self.acc(*b, &gb);
            }
            Op::AddRow(x, b) => {
                self.acc(*x, gout);
                let c = self.value(*b).len();
                let mut gb = vec![0.0; c];
                for row in gout.chunks(c.max(1)) {
                    add_into(&mut gb, row);
                }
                self.acc(*b, &gb);
            }
            Op::Affine(x, s) => {
                let g: Vec<f64> = gout.iter().map(|g| g * s).collect();
                self.acc(*x, &g);
            }
            Op::Relu(x) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(*x, &g);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                let g: Vec<f64> = gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(*x, &g);
            }
            Op::Log(x) => {
                let g: Vec<f64> = gout.iter().zip(self.value(*x).data()).map(|(g, v)| g / v).collect();
                self.acc(*x, &g);
            }
            Op::Square(x) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| 2.0 * g * v)
                    .collect();
                self.acc(*x, &g);
            }
            Op::Clamp(x, lo, hi) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| if v < lo || v > hi { 0.0 } else { *g })
                    .collect();
                self.acc(*x, &g);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[idx].value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..*len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] = y[at(j)] * (gout[at(j)] - s);
                        }
                    }
                }
                self.acc(*x, &gx);
            }
            Op::SegmentSoftmax(x, segments) => {
                let y = self.nodes[idx].value.data();
                let mut gx = vec![0.0; y.len()];
                let mut start = 0;
                for &len in segments {
                    let r = start..start + len;
                    let s: f64 = gout[r.clone()].iter().zip(&y[r.clone()]).map(|(g, y)| g * y).sum();
                    for j in r {
                        gx[j] = y[j] * (gout[j] - s);
                    }
                    start += len;
                }
                self.acc(*x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gdata = self.value(*gamma).data().to_vec();
                let mut gx = vec![0.0; normed.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (r, &inv) in rstd.iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    let dy = &gout[span.clone()];
                    let xh = &normed[span.clone()];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let dxh = dy[j] * gdata[j];
                        sum_d += dxh;
                        sum_dx += dxh * xh[j];
                        gg[j] += dy[j] * xh[j];
                        gb[j] += dy[j];
                    }
                    for j in 0..c {
                        let dxh = dy[j] * gdata[j];
                        gx[r * c + j] = inv / c as f64 * (c as f64 * dxh - sum_d - xh[j] * sum_dx);
                    }
                }
                self.acc(*x, &gx);
                self.acc(*gamma, &gg);
                self.acc(*beta, &gb);
            }
            Op::Concat { parts, outer, inner } => {
                let axis_sizes: Vec<usize> = parts
                    .iter()
                    .map(|p| self.value(*p).len() / (outer * inner).max(1))
                    .collect();
                let total: usize = axis_sizes.iter().sum();
                let mut offset = 0;
                for (p, &sz) in parts.iter().zip(&axis_sizes) {
                    let mut gp = Vec::with_capacity(self.value(*p).len());
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&gout[base..base + sz * inner]);
                    }
                    self.acc(*p, &gp);
                    offset += sz;
                }
            }
            Op::L2Norm(x) => {
                let n = self.nodes[idx].value.item();
                let g0 = gout[0];
                let gx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|v| if n > 0.0 { g0 * v / n } else { 0.0 })
                    .collect();
                self.acc(*x, &gx);
            }
            Op::RowNorms(x) => {
                let norms = self.nodes[idx].value.data().to_vec();
                let t = self.value(*x);
                let c = t.cols();
                let mut gx = vec![0.0; t.len()];
                for (r, (&n, &g)) in norms.iter().zip(gout).enumerate() {
                    if n > 0.0 {
                        for j in 0..c {
                            gx[r * c + j] = g * t.data()[r * c + j] / n;
                        }
                    }
                }
                self.acc(*x, &gx);
            }
            Op::MeanPool { x, outer, len, inner } => {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            gx[(o * len + j) * inner + i] = gout[o * inner + i] / *len as f64;
                        }
                    }
                }
                self.acc(*x, &gx);
            }
            Op::SegmentSum(x, segments) | Op::SegmentMean(x, segments) => {
                let mean = matches!(op, Op::SegmentMean(..));
                let t = self.value(*x);
                let c = t.cols();
                let mut gx = vec![0.0; t.len()];
                let mut r = 0;
                for (s, &len) in segments.iter().enumerate() {
                    let w = if mean { 1.0 / len as f64 } else { 1.0 };
                    for _ in 0..len {
                        for j in 0..c {
                            gx[r * c + j] = gout[s * c + j] * w;
                        }
                        r += 1;
                    }
                }
                self.acc(*x, &gx);
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (steps, c_in) = (tx.shape()[0], tx.shape()[1]);
                let (k, c_out) = (tw.shape()[0], tw.shape()[2]);
                let pad = k / 2;
                let mut gx = vec![0.0; tx.len()];
                let mut gw = vec![0.0; tw.len()];
                let mut gb = vec![0.0; c_out];
                for t in 0..steps {
                    let gy = &gout[t * c_out..(t + 1) * c_out];
                    add_into(&mut gb, gy);
                    for tap in 0..k {
                        let Some(src_t) = (t + tap).checked_sub(pad).filter(|&s| s < steps) else {
                            continue;
                        };
                        let base = tap * c_in * c_out;
                        for ci in 0..c_in {
                            let wrow = &tw.data()[base + ci * c_out..base + (ci + 1) * c_out];
                            gx[src_t * c_in + ci] += dot(gy, wrow);
                            let xv = tx.data()[src_t * c_in + ci];
                            if xv != 0.0 {
                                for (d, &g) in gw[base + ci * c_out..base + (ci + 1) * c_out].iter_mut().zip(gy) {
                                    *d += xv * g;
                                }
                            }
                        }
                    }
                }
                self.acc(*x, &gx);
                self.acc(*w, &gw);
                self.acc(*b, &gb);
            }
            Op::GatherRows(x, indices) => {
                let t = self.value(*x);
                let c = t.cols();
                let mut gx = vec![0.0; t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &gout[r * c..(r + 1) * c]);
                }
                self.acc(*x, &gx);
            }
            Op::ScaleRows(x, gains) => {
                let (tx, tg) = (self.value(*x), self.value(*gains));
                let c = tx.cols().max(1);
                let mut gx = vec![0.0; tx.len()];
                let mut gg = vec![0.0; tg.len()];
                for (r, &g) in tg.data().iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    for j in span.clone() {
                        gx[j] = gout[j] * g;
                    }
                    gg[r] = dot(&gout[span.clone()], &tx.data()[span]);
                }
                self.acc(*x, &gx);
                self.acc(*gains, &gg);
            }
            Op::Sum(x) => {
                let g = vec![gout[0]; self.value(*x).len()];
                self.acc(*x, &g);
            }
            Op::WeightedSum(x, weights) => {
                let g: Vec<f64> = weights.iter().map(|w| w * gout[0]).collect();
                self.acc(*x, &g);
            }
            Op::Reshape(x) => self.acc(*x, gout),
            Op::Attention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (d, dv) = (tq.cols(), tv.cols());
                let mut gq = vec![0.0; tq.len()];
                let mut gk = vec![0.0; tk.len()];
                let mut gv = vec![0.0; tv.len()];
                let mut start = 0;
                let mut poff = 0;
                for &m in segments {
                    for ii in 0..m {
                        let i = start + ii;
                        let p = &probs[poff + ii * m..poff + (ii + 1) * m];
                        let gy = &gout[i * dv..(i + 1) * dv];
                        // dP_ij = dY_i . V_j ; dS = P * (dP - sum(P * dP))
                        let dp: Vec<f64> = (0..m).map(|jj| dot(gy, tv.row(start + jj))).collect();
                        let s: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                        for jj in 0..m {
                            let j = start + jj;
                            for (d_, &g) in gv[j * dv..(j + 1) * dv].iter_mut().zip(gy) {
                                *d_ += p[jj] * g;
                            }
                            let ds = p[jj] * (dp[jj] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                gq[i * d + c] += ds * tk.data()[j * d + c];
                                gk[j * d + c] += ds * tq.data()[i * d + c];
                            }
                        }
                    }
                    poff += m * m;
                    start += m;
                }
                self.acc(*q, &gq);
                self.acc(*k, &gk);
                self.acc(*v, &gv);
            }
        }
        self.nodes[idx].op = op;
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

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a (m x k) * b (k x n)`; each output entry accumulates over `k`
/// in order, so a row's result does not depend on the other rows.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (d, &bv) in dst.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *d += av * bv;
            }
        }
    }
}
