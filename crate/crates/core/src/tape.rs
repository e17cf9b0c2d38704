//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op pushes a node holding its value. The backward context (saved
//! inputs, normalisation statistics) is kept only when at least one input
//! requires a gradient, so frozen subgraphs run as plain forward arithmetic
//! and never allocate gradient buffers.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, Padding};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::{check_conv_fits, softmax_strided, split_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast { x: Var, b: Var, outer: usize, mid: usize, inner: usize },
    MulBcast { x: Var, b: Var, outer: usize, mid: usize, inner: usize },
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, cols: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: usize, hw: usize, train: bool },
    Conv2d { x: Var, w: Var, batch: usize, cin: usize, h: usize, wd: usize, cout: usize, k: usize, pad: Padding },
    Permute { x: Var, inv_axes: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, lens: Vec<usize>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, len_in: usize, start: usize, inner: usize },
    Sum(Var),
    Mean(Var),
    Bce { x: Var, target: Vec<T>, weight: Vec<T>, norm: T },
    CrossEntropy { x: Var, probs: Vec<T>, target: Vec<usize>, weight: Vec<T>, cols: usize, norm: T },
    L1 { x: Var, target: Vec<T>, weight: Vec<T>, norm: T },
    L2NormalizeRows { x: Var, norms: Vec<T>, cols: usize },
    Diag { x: Var, n: usize },
    MaskedLogSumExp { x: Var, probs: Vec<T>, cols: usize },
}

/// Batch statistics produced by a train-mode batch-norm op, for the caller
/// to fold into running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Gradients returned by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Add `other` into `self` (used to sum per-chunk gradients).
    pub fn accumulate(&mut self, other: Grads<T>) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes carrying a backward context.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf | Op::Param(_))).count()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { value, requires_grad: trainable, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite(alloc::format!("op output {:?}", value.shape())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----- linear algebra -------------------------------------------------

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul expects 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err!("matmul inner dims disagree: {sa:?}{} x {sb:?}{}", tf(ta), tf(tb)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n, ta, tb);
        self.push(Tensor::raw(vec![m, n], out), &[a, b], Op::MatMul { a, b, m, k, n, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a[g]) · op(b[g])` over 3-D operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("bmm expects matching 3-D operands, got {sa:?} and {sb:?}"));
        }
        let g = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err!("bmm inner dims disagree: {sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for gi in 0..g {
            kernels::matmul_acc(
                &da[gi * m * k..(gi + 1) * m * k],
                &db[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
                ta,
                tb,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        self.push(Tensor::raw(vec![g, m, n], out), &[a, b], Op::BatchMatMul { a, b, g, m, k, n, ta, tb })
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::raw(shape, out), &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x - *y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::raw(shape, out), &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::raw(shape, out), &[a, b], Op::Mul(a, b))
    }

    fn bcast_dims(&self, x: Var, b: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        let nb = self.value(b).numel();
        let outer: usize = sx[..axis].iter().product();
        let total: usize = sx.iter().product();
        let mut mid = 1;
        let mut end = axis;
        while end < sx.len() && mid < nb {
            mid *= sx[end];
            end += 1;
        }
        if mid != nb {
            return Err(shape_err!("cannot broadcast {} values over {sx:?} from axis {axis}", nb));
        }
        Ok((outer, mid, total / (outer * mid)))
    }

    /// `x + b`, with `b` spanning the dims of `x` starting at `axis` and
    /// repeated over the leading and trailing dims.
    pub fn add_bcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, mid, inner) = self.bcast_dims(x, b, axis)?;
        let (dx, db) = (self.data(x), self.data(b));
        let mut out = dx.to_vec();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for v in &mut out[base..base + inner] {
                    *v += db[m];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::raw(shape, out), &[x, b], Op::AddBcast { x, b, outer, mid, inner })
    }

    /// `x * b` with the broadcasting rule of [`Tape::add_bcast`].
    pub fn mul_bcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, mid, inner) = self.bcast_dims(x, b, axis)?;
        let (dx, db) = (self.data(x), self.data(b));
        let mut out = dx.to_vec();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for v in &mut out[base..base + inner] {
                    *v *= db[m];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::raw(shape, out), &[x, b], Op::MulBcast { x, b, outer, mid, inner })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, &[x], Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.data(x).to_vec();
        softmax_strided(&mut out, outer, len, inner);
        self.push(Tensor::raw(shape, out), &[x], Op::Softmax { x, outer, len, inner })
    }

    // ----- normalisation --------------------------------------------------

    /// Layer normalisation over the last dim with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err!("layer_norm affine must have {cols} values"));
        }
        let rows = self.value(x).numel() / cols;
        let data = self.data(x);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| g[i % cols] * v + b[i % cols]).collect();
        let rg = self.nodes[x.0].requires_grad;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if rg || self.requires_grad(gamma) { xhat } else { Vec::new() },
            inv_std: if rg { inv_std } else { Vec::new() },
            cols,
        };
        self.push(Tensor::raw(shape, out), &[x, gamma, beta], op)
    }

    /// Batch normalisation over `[B, C, ...]`, per channel across batch and
    /// spatial positions. With `running = Some((mean, var))` the op runs in
    /// eval mode; otherwise batch statistics are used and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm expects [B, C, ...], got {shape:?}"));
        }
        let (batch, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!("batch_norm affine must have {c} values"));
        }
        let data = self.data(x);
        let count = batch * hw;
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err!("running stats must have {c} channels"));
                }
                means.copy_from_slice(rm);
                vars.copy_from_slice(rv);
            }
            None => {
                let n = T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mean = s / n;
                    let mut v = T::zero();
                    for b in 0..batch {
                        for &x in &data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            v += (x - mean) * (x - mean);
                        }
                    }
                    means[ch] = mean;
                    vars[ch] = v / n;
                }
            }
        }
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (data[i] - means[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let train = running.is_none();
        let stats = train.then(|| BatchStats { mean: means, var: vars, count });
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, hw, train };
        Ok((self.push(Tensor::raw(shape, out), &[x, gamma, beta], op)?, stats))
    }

    // ----- convolution ----------------------------------------------------

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err!("conv2d input {sx:?} incompatible with kernel {sw:?}"));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Config(alloc::format!("even kernel size {k}")));
        }
        check_conv_fits(h, wd, k, pad)?;
        let (oh, ow) = (pad.out_size(h, k), pad.out_size(wd, k));
        let mut out = Vec::with_capacity(batch * cout * oh * ow);
        let (dx, dw) = (self.data(x), self.data(w));
        for b in 0..batch {
            let img = &dx[b * cin * h * wd..(b + 1) * cin * h * wd];
            out.extend(kernels::conv2d_single(img, dw, cin, h, wd, cout, k, pad));
        }
        let op = Op::Conv2d { x, w, batch, cin, h, wd, cout, k, pad };
        self.push(Tensor::raw(vec![batch, cout, oh, ow], out), &[x, w], op)
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_parts_unchecked(shape.to_vec(), self.data(x).to_vec())?;
        self.push(t, &[x], Op::Reshape(x))
    }

    /// Reorder dims: output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len() || axes.iter().any(|&a| a >= seen.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {axes:?} for {in_shape:?}"));
        }
        let (out_shape, out) = permute_data(self.data(x), &in_shape, axes);
        let mut inv_axes = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv_axes[a] = i;
        }
        self.push(Tensor::raw(out_shape, out), &[x], Op::Permute { x, inv_axes })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range"));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err!("concat shape mismatch {first:?} vs {s:?}"));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::raw(shape, out), inputs, Op::Concat { inputs: inputs.to_vec(), lens, outer, inner })
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err!("slice {start}+{len} on axis {axis} of {shape:?}"));
        }
        let (outer, len_in, inner) = split_axis(&shape, axis);
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.push(Tensor::raw(s, out), &[x], Op::Slice { x, outer, len_in, start, inner })
    }

    // ----- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    fn check_len(&self, x: Var, n: usize, what: &str) -> Result<()> {
        if self.value(x).numel() != n {
            return Err(shape_err!("{what}: expected {} values, got {n}", self.value(x).numel()));
        }
        Ok(())
    }

    /// `Σ w·bce(x, t) / norm` on logits `x`.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T], weight: &[T], norm: T) -> Result<Var> {
        self.check_len(x, target.len(), "bce target")?;
        self.check_len(x, weight.len(), "bce weight")?;
        let mut s = T::zero();
        for ((&v, &t), &w) in self.data(x).iter().zip(target).zip(weight) {
            let l = v.max(T::zero()) - v * t + (T::one() + (-v.abs()).libm_exp()).libm_ln();
            s += w * l;
        }
        let op = Op::Bce { x, target: target.to_vec(), weight: weight.to_vec(), norm };
        self.push(Tensor::scalar(s / norm), &[x], op)
    }

    /// Weighted softmax cross-entropy over the rows of a 2-D logit matrix.
    pub fn cross_entropy(&mut self, x: Var, target: &[usize], weight: &[T], norm: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != target.len() || weight.len() != target.len() {
            return Err(shape_err!("cross_entropy logits {shape:?} vs {} targets", target.len()));
        }
        let cols = shape[1];
        if target.iter().any(|&t| t >= cols) {
            return Err(shape_err!("cross_entropy target out of range"));
        }
        let mut probs = self.data(x).to_vec();
        softmax_strided(&mut probs, shape[0], cols, 1);
        let data = self.data(x);
        let mut s = T::zero();
        for (r, (&t, &w)) in target.iter().zip(weight).enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = &data[r * cols..(r + 1) * cols];
            s += w * (logsumexp(row.iter().copied()) - row[t]);
        }
        let op = Op::CrossEntropy { x, probs, target: target.to_vec(), weight: weight.to_vec(), cols, norm };
        self.push(Tensor::scalar(s / norm), &[x], op)
    }

    /// `Σ w·|x − t| / norm`.
    pub fn l1(&mut self, x: Var, target: &[T], weight: &[T], norm: T) -> Result<Var> {
        self.check_len(x, target.len(), "l1 target")?;
        self.check_len(x, weight.len(), "l1 weight")?;
        let s = self
            .data(x)
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&v, &t), &w)| w * (v - t).abs())
            .sum::<T>();
        let op = Op::L1 { x, target: target.to_vec(), weight: weight.to_vec(), norm };
        self.push(Tensor::scalar(s / norm), &[x], op)
    }

    /// Scale each row of a 2-D tensor to unit L2 norm. Zero rows are a
    /// contract violation (direction undefined).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(shape_err!("l2_normalize_rows expects 2-D, got {shape:?}"));
        }
        let cols = shape[1];
        let data = self.data(x);
        let mut norms = Vec::with_capacity(shape[0]);
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(cols) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::Contract("zero-norm embedding".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        self.push(Tensor::raw(shape, out), &[x], Op::L2NormalizeRows { x, norms, cols })
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(shape_err!("diag expects a square matrix, got {shape:?}"));
        }
        let n = shape[0];
        let out: Vec<T> = (0..n).map(|i| self.data(x)[i * n + i]).collect();
        self.push(Tensor::raw(vec![n], out), &[x], Op::Diag { x, n })
    }

    /// Row-wise `log Σ_{c: mask[r][c]} exp(x[r][c])` of a 2-D tensor.
    pub fn masked_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || mask.len() != shape[0] * shape[1] {
            return Err(shape_err!("masked_logsumexp mask does not match {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = self.data(x);
        let mut out = Vec::with_capacity(rows);
        let mut probs = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let idx = (0..cols).filter(|&c| mask[r * cols + c]);
            let mut max = T::neg_infinity();
            for c in idx.clone() {
                max = max.max(data[r * cols + c]);
            }
            if max == T::neg_infinity() {
                return Err(Error::Contract(alloc::format!("row {r} has an empty mask")));
            }
            let mut s = T::zero();
            for c in idx.clone() {
                let e = (data[r * cols + c] - max).libm_exp();
                probs[r * cols + c] = e;
                s += e;
            }
            for c in idx {
                probs[r * cols + c] /= s;
            }
            out.push(max + s.libm_ln());
        }
        self.push(Tensor::raw(vec![rows], out), &[x], Op::MaskedLogSumExp { x, probs, cols })
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every trainable parameter
    /// and every grad-requiring leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Grads { params: BTreeMap::new(), leaves: BTreeMap::new() };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), Tensor::raw(node.value.shape().to_vec(), g));
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => {
                        out.params.insert(*id, Tensor::raw(node.value.shape().to_vec(), g));
                    }
                },
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(&self, op: &Op<T>, y: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, m, k, n, ta, tb } => {
                let (da, db) = (self.data(a), self.data(b));
                self.acc(grads, a, |acc| {
                    if ta {
                        kernels::matmul_acc(db, g, k, n, m, tb, true, acc)
                    } else {
                        kernels::matmul_acc(g, db, m, n, k, false, !tb, acc)
                    }
                });
                self.acc(grads, b, |acc| {
                    if tb {
                        kernels::matmul_acc(g, da, n, m, k, true, ta, acc)
                    } else {
                        kernels::matmul_acc(da, g, k, m, n, !ta, false, acc)
                    }
                });
            }
            Op::BatchMatMul { a, b, g: groups, m, k, n, ta, tb } => {
                let (da, db) = (self.data(a), self.data(b));
                let (sa, sb, sc) = (m * k, k * n, m * n);
                self.acc(grads, a, |acc| {
                    for gi in 0..groups {
                        let (gg, bb) = (&g[gi * sc..(gi + 1) * sc], &db[gi * sb..(gi + 1) * sb]);
                        let out = &mut acc[gi * sa..(gi + 1) * sa];
                        if ta {
                            kernels::matmul_acc(bb, gg, k, n, m, tb, true, out)
                        } else {
                            kernels::matmul_acc(gg, bb, m, n, k, false, !tb, out)
                        }
                    }
                });
                self.acc(grads, b, |acc| {
                    for gi in 0..groups {
                        let (gg, aa) = (&g[gi * sc..(gi + 1) * sc], &da[gi * sa..(gi + 1) * sa]);
                        let out = &mut acc[gi * sb..(gi + 1) * sb];
                        if tb {
                            kernels::matmul_acc(gg, aa, n, m, k, true, ta, out)
                        } else {
                            kernels::matmul_acc(aa, gg, k, m, n, !ta, false, out)
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, a, |acc| add_into(acc, g));
                self.acc(grads, b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, |acc| add_into(acc, g));
                self.acc(grads, b, |acc| acc.iter_mut().zip(g).for_each(|(a, g)| *a -= *g));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                self.acc(grads, a, |acc| acc.iter_mut().zip(g).zip(db).for_each(|((a, g), b)| *a += *g * *b));
                self.acc(grads, b, |acc| acc.iter_mut().zip(g).zip(da).for_each(|((a, g), x)| *a += *g * *x));
            }
            Op::AddBcast { x, b, outer, mid, inner } => {
                self.acc(grads, x, |acc| add_into(acc, g));
                self.acc(grads, b, |acc| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            acc[m] += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::MulBcast { x, b, outer, mid, inner } => {
                let (dx, db) = (self.data(x), self.data(b));
                self.acc(grads, x, |acc| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in base..base + inner {
                                acc[i] += g[i] * db[m];
                            }
                        }
                    }
                });
                self.acc(grads, b, |acc| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            acc[m] += (base..base + inner).map(|i| g[i] * dx[i]).sum::<T>();
                        }
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, x, |acc| acc.iter_mut().zip(g).for_each(|(a, g)| *a += *g * s)),
            Op::Relu(x) => {
                let dx = self.data(x);
                self.acc(grads, x, |acc| {
                    for ((a, g), v) in acc.iter_mut().zip(g).zip(dx) {
                        if *v > T::zero() {
                            *a += *g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = y.data();
                self.acc(grads, x, |acc| {
                    acc.iter_mut().zip(g).zip(yd).for_each(|((a, g), y)| *a += *g * *y * (T::one() - *y))
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let yd = y.data();
                self.acc(grads, x, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot = (0..len).map(|l| g[base + l * inner] * yd[base + l * inner]).sum::<T>();
                            for l in 0..len {
                                let j = base + l * inner;
                                acc[j] += yd[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref inv_std, cols } => {
                let gm = self.data(gamma);
                let rows = g.len() / cols;
                self.acc(grads, gamma, |acc| {
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        acc[i % cols] += gv * xh;
                    }
                });
                self.acc(grads, beta, |acc| {
                    for (i, &gv) in g.iter().enumerate() {
                        acc[i % cols] += gv;
                    }
                });
                self.acc(grads, x, |acc| {
                    let n = T::of(cols as f64);
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let (gr, xr) = (&g[sl.clone()], &xhat[sl.clone()]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gm[c];
                            s1 += d;
                            s2 += d * xr[c];
                        }
                        for c in 0..cols {
                            let d = gr[c] * gm[c];
                            acc[r * cols + c] += inv_std[r] / n * (n * d - s1 - xr[c] * s2);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, ref xhat, ref inv_std, batch, hw, train } => {
                let gm = self.data(gamma);
                let c = gm.len();
                self.acc(grads, gamma, |acc| {
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            acc[ch] += (base..base + hw).map(|i| g[i] * xhat[i]).sum::<T>();
                        }
                    }
                });
                self.acc(grads, beta, |acc| {
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            acc[ch] += g[base..base + hw].iter().copied().sum::<T>();
                        }
                    }
                });
                self.acc(grads, x, |acc| {
                    if !train {
                        for b in 0..batch {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    acc[i] += g[i] * gm[ch] * inv_std[ch];
                                }
                            }
                        }
                        return;
                    }
                    let n = T::of((batch * hw) as f64);
                    for ch in 0..c {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for b in 0..batch {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                let d = g[i] * gm[ch];
                                s1 += d;
                                s2 += d * xhat[i];
                            }
                        }
                        for b in 0..batch {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                let d = g[i] * gm[ch];
                                acc[i] += inv_std[ch] / n * (n * d - s1 - xhat[i] * s2);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, batch, cin, h, wd, cout, k, pad } => {
                let (dx, dw) = (self.data(x), self.data(w));
                let (oh, ow) = (pad.out_size(h, k), pad.out_size(wd, k));
                let kk = cin * k * k;
                let direct = k == 1;
                self.acc(grads, w, |acc| {
                    for b in 0..batch {
                        let img = &dx[b * cin * h * wd..(b + 1) * cin * h * wd];
                        let gy = &g[b * cout * oh * ow..(b + 1) * cout * oh * ow];
                        if direct {
                            kernels::matmul_acc(gy, img, cout, oh * ow, kk, false, true, acc);
                        } else {
                            let cols = kernels::im2col(img, cin, h, wd, k, pad);
                            kernels::matmul_acc(gy, &cols, cout, oh * ow, kk, false, true, acc);
                        }
                    }
                });
                self.acc(grads, x, |acc| {
                    for b in 0..batch {
                        let gy = &g[b * cout * oh * ow..(b + 1) * cout * oh * ow];
                        let out = &mut acc[b * cin * h * wd..(b + 1) * cin * h * wd];
                        if direct {
                            kernels::matmul_acc(dw, gy, kk, cout, oh * ow, true, false, out);
                        } else {
                            let dcols = kernels::matmul(dw, gy, kk, cout, oh * ow, true, false);
                            kernels::col2im_acc(&dcols, cin, h, wd, k, pad, out);
                        }
                    }
                });
            }
            Op::Permute { x, ref inv_axes } => {
                let (_, back) = permute_data(g, y.shape(), inv_axes);
                self.acc(grads, x, |acc| add_into(acc, &back));
            }
            Op::Reshape(x) => self.acc(grads, x, |acc| add_into(acc, g)),
            Op::Concat { ref inputs, ref lens, outer, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    self.acc(grads, v, |acc| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut acc[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, len_in, start, inner } => {
                let len = g.len() / (outer * inner);
                self.acc(grads, x, |acc| {
                    for o in 0..outer {
                        let base = (o * len_in + start) * inner;
                        add_into(&mut acc[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, x, |acc| acc.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = T::of(self.value(x).numel() as f64);
                self.acc(grads, x, |acc| acc.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::Bce { x, ref target, ref weight, norm } => {
                let dx = self.data(x);
                self.acc(grads, x, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[0] * weight[i] * (sigmoid(dx[i]) - target[i]) / norm;
                    }
                });
            }
            Op::CrossEntropy { x, ref probs, ref target, ref weight, cols, norm } => {
                self.acc(grads, x, |acc| {
                    for (r, (&t, &w)) in target.iter().zip(weight).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            acc[r * cols + c] += g[0] * w * (probs[r * cols + c] - onehot) / norm;
                        }
                    }
                });
            }
            Op::L1 { x, ref target, ref weight, norm } => {
                let dx = self.data(x);
                self.acc(grads, x, |acc| {
                    for i in 0..acc.len() {
                        let d = dx[i] - target[i];
                        let s = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        acc[i] += g[0] * weight[i] * s / norm;
                    }
                });
            }
            Op::L2NormalizeRows { x, ref norms, cols } => {
                let yd = y.data();
                self.acc(grads, x, |acc| {
                    for (r, &n) in norms.iter().enumerate() {
                        let sl = r * cols..(r + 1) * cols;
                        let dot = sl.clone().map(|i| g[i] * yd[i]).sum::<T>();
                        for i in sl {
                            acc[i] += (g[i] - yd[i] * dot) / n;
                        }
                    }
                });
            }
            Op::Diag { x, n } => self.acc(grads, x, |acc| (0..n).for_each(|i| acc[i * n + i] += g[i])),
            Op::MaskedLogSumExp { x, ref probs, cols } => {
                self.acc(grads, x, |acc| {
                    for (i, (a, p)) in acc.iter_mut().zip(probs).enumerate() {
                        *a += g[i / cols] * *p;
                    }
                });
            }
        }
    }
}

fn tf(t: bool) -> &'static str {
    if t {
        "ᵀ"
    } else {
        ""
    }
}

#[inline]
fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, g)| *a += *g);
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).libm_exp())
    } else {
        let e = v.libm_exp();
        e / (T::one() + e)
    }
}

pub(crate) fn logsumexp<T: Real>(it: impl Iterator<Item = T> + Clone) -> T {
    let max = it.clone().fold(T::neg_infinity(), T::max);
    max + it.map(|v| (v - max).libm_exp()).sum::<T>().libm_ln()
}

/// Permute row-major `src` of `shape`: output dim `i` is input dim `axes[i]`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::boxed::Box;

    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

    /// Central finite differences of `build` at `inputs`, compared with the
    /// tape's analytic gradient.
    fn check(inputs: &[Tensor<f64>], build: Build) {
        let run = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = build(&mut tape, &vars).unwrap();
            (tape, vars, out)
        };
        let (tape, vars, out) = run(inputs);
        let grads = tape.backward(out).unwrap();
        let h = 1e-3;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.leaf(*v).expect("leaf grad");
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let (tp, _, op) = run(&plus);
                let (tm, _, om) = run(&minus);
                let fd = (tp.value(op).data()[0] - tm.value(om).data()[0]) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-6,
                    "input {i} elem {j}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn weighted_sum(t: &mut Tape<f64>, x: Var) -> Result<Var> {
        let w = rnd(t.shape(x), 99);
        let wv = t.constant(w);
        let p = t.mul(x, wv)?;
        t.sum(p)
    }

    #[test]
    fn sum_of_trainable_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(ParamId(0), Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut tape = Tape::<f32>::new();
        let frozen = tape.param(ParamId(0), Tensor::ones(&[2, 2]), false);
        let train = tape.param(ParamId(1), Tensor::ones(&[2, 2]), true);
        let h = tape.matmul(frozen, frozen).unwrap();
        assert!(!tape.requires_grad(h));
        let y = tape.mul(h, train).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.param(ParamId(0)).is_none());
        assert!(g.param(ParamId(1)).is_some());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradcheck_matmul_variants() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa = if ta { [4, 3] } else { [3, 4] };
            let sb = if tb { [2, 4] } else { [4, 2] };
            check(
                &[rnd(&sa, 1), rnd(&sb, 2)],
                Box::new(move |t, v| {
                    let y = t.matmul_t(v[0], v[1], ta, tb)?;
                    weighted_sum(t, y)
                }),
            );
            let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
            check(
                &[rnd(&sa, 3), rnd(&sb, 4)],
                Box::new(move |t, v| {
                    let y = t.bmm(v[0], v[1], ta, tb)?;
                    weighted_sum(t, y)
                }),
            );
        }
    }

    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        check(
            &[rnd(&[2, 3, 4], 5), rnd(&[3], 6), rnd(&[2, 3, 4], 7)],
            Box::new(|t, v| {
                let a = t.add_bcast(v[0], v[1], 1)?;
                let m = t.mul_bcast(a, v[1], 1)?;
                let s = t.sub(m, v[2])?;
                let p = t.mul(s, v[2])?;
                let q = t.sigmoid(p)?;
                let a2 = t.add(q, v[0])?;
                let sc = t.scale(a2, 0.7)?;
                weighted_sum(t, sc)
            }),
        );
    }

    #[test]
    fn gradcheck_relu_away_from_kink() {
        let x = rnd(&[3, 4], 30).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        check(
            &[x],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y)
            }),
        );
    }

    #[test]
    fn gradcheck_softmax_axes() {
        for axis in 0..3 {
            check(
                &[rnd(&[2, 3, 4], 8 + axis as u64)],
                Box::new(move |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    weighted_sum(t, y)
                }),
            );
        }
    }

    #[test]
    fn gradcheck_norms() {
        check(
            &[rnd(&[3, 5], 11), rnd(&[5], 12), rnd(&[5], 13)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y)
            }),
        );
        check(
            &[rnd(&[2, 3, 2, 2], 14), rnd(&[3], 15), rnd(&[3], 16)],
            Box::new(|t, v| {
                let (y, stats) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                assert!(stats.is_some());
                weighted_sum(t, y)
            }),
        );
        check(
            &[rnd(&[2, 3, 2, 2], 17), rnd(&[3], 18), rnd(&[3], 19)],
            Box::new(|t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0])), 1e-5)?;
                weighted_sum(t, y)
            }),
        );
    }

    #[test]
    fn gradcheck_conv() {
        for (k, pad) in [(3, Padding::SameReflect), (3, Padding::None), (1, Padding::None), (5, Padding::SameReflect)] {
            check(
                &[rnd(&[2, 2, 5, 4], 20), rnd(&[3, 2, k, k], 21)],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], pad)?;
                    weighted_sum(t, y)
                }),
            );
        }
    }

    #[test]
    fn gradcheck_layout_ops() {
        check(
            &[rnd(&[2, 3, 4], 22), rnd(&[2, 2, 4], 23)],
            Box::new(|t, v| {
                let p = t.permute(v[0], &[2, 0, 1])?;
                let r = t.reshape(p, &[4, 6])?;
                let back = t.reshape(r, &[4, 2, 3])?;
                let u = t.permute(back, &[1, 2, 0])?;
                let c = t.concat(&[u, v[1]], 1)?;
                let s = t.slice(c, 1, 2, 3)?;
                weighted_sum(t, s)
            }),
        );
    }

    #[test]
    fn gradcheck_losses() {
        let target = [1.0, 0.0, 1.0, 0.0, 0.5, 1.0];
        let weight = [1.0, 2.0, 0.0, 1.0, 1.0, 0.5];
        check(
            &[rnd(&[6], 24)],
            Box::new(move |t, v| {
                let a = t.bce_with_logits(v[0], &target, &weight, 3.0)?;
                let b = t.l1(v[0], &[0.9, -0.5, 0.3, 0.2, -0.7, 0.05], &weight, 2.0)?;
                t.add(a, b)
            }),
        );
        check(
            &[rnd(&[4, 3], 25)],
            Box::new(|t, v| {
                let ce = t.cross_entropy(v[0], &[0, 2, 1, 1], &[1.0, 0.0, 2.0, 1.0], 3.0)?;
                let m = t.mean(v[0])?;
                t.add(ce, m)
            }),
        );
        check(
            &[rnd(&[3, 4], 26), rnd(&[3, 4], 27)],
            Box::new(|t, v| {
                let a = t.l2_normalize_rows(v[0])?;
                let b = t.l2_normalize_rows(v[1])?;
                let s = t.matmul_t(a, b, false, true)?;
                let d = t.diag(s)?;
                let mask = [false, true, true, true, false, true, true, true, false];
                let l = t.masked_logsumexp(s, &mask)?;
                let diff = t.sub(l, d)?;
                t.mean(diff)
            }),
        );
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let (shape, out) = permute_data(x.data(), x.shape(), &[1, 2, 0]);
        assert_eq!(shape, vec![3, 4, 2]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out[(b * 4 + c) * 2 + a], x.data()[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn zero_norm_row_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]), true);
        assert!(matches!(tape.l2_normalize_rows(x), Err(Error::Contract(_))));
    }
}
