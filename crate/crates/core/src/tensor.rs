use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::kernels::{self, Padding};
use crate::real::Real;

/// Dense row-major tensor. Construction rejects non-finite values and
/// zero-sized dimensions; gradients live on the [`Tape`](crate::tape::Tape),
/// not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_parts_unchecked(shape.to_vec(), data)?;
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("element {i} of tensor {:?}", t.shape)));
        }
        Ok(t)
    }

    /// Shape-checked but skips the finiteness scan; used on hot paths whose
    /// inputs are already validated.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dimension in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!("shape {shape:?} needs {numel} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_parts_unchecked(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max),
        )
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2(self)?;
        let (k2, n) = dims2(other)?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims disagree: {:?} x {:?}", self.shape, other.shape));
        }
        Ok(Self::raw(vec![m, n], kernels::matmul(&self.data, &other.data, m, k, n, false, false)))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = dims2(self)?;
        Ok(Self::raw(vec![c, r], kernels::transpose(r, c, &self.data)))
    }

    /// Cross-correlation of a `[C_in×H×W]` input with `[C_out×C_in×k×k]` weights.
    pub fn conv2d(&self, kernel: &Self, padding: Padding) -> Result<Self> {
        let (cin, h, w) = dims3(self)?;
        let ks = kernel.shape();
        if ks.len() != 4 || ks[1] != cin || ks[2] != ks[3] {
            return Err(shape_err!("kernel {:?} incompatible with input {:?}", ks, self.shape));
        }
        let k = ks[2];
        if k % 2 == 0 {
            return Err(config_err!("even kernel size {k}"));
        }
        check_conv_fits(h, w, k, padding)?;
        let out = kernels::conv2d_single(&self.data, &kernel.data, cin, h, w, ks[0], k, padding);
        Ok(Self::raw(vec![ks[0], padding.out_size(h, k), padding.out_size(w, k)], out))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape));
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = self.data.clone();
        softmax_strided(&mut out, outer, len, inner);
        Ok(Self::raw(self.shape.clone(), out))
    }
}

pub(crate) fn check_conv_fits(h: usize, w: usize, k: usize, padding: Padding) -> Result<()> {
    match padding {
        Padding::SameReflect if k / 2 >= h.max(2) || k / 2 >= w.max(2) => {
            Err(shape_err!("reflect pad {} too large for {h}x{w}", k / 2))
        }
        Padding::None if k > h || k > w => Err(shape_err!("kernel {k} larger than {h}x{w}")),
        _ => Ok(()),
    }
}

pub(crate) fn dims2<T>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape[..] {
        [a, b] => Ok((a, b)),
        _ => Err(shape_err!("expected 2-D tensor, got {:?}", t.shape)),
    }
}

pub(crate) fn dims3<T>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(shape_err!("expected 3-D tensor, got {:?}", t.shape)),
    }
}

/// View `shape` as `[outer, shape[axis], inner]`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_strided<T: Real>(data: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for l in 0..len {
                max = max.max(data[base + l * inner]);
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (data[base + l * inner] - max).libm_exp();
                data[base + l * inner] = e;
                sum += e;
            }
            for l in 0..len {
                data[base + l * inner] /= sum;
            }
        }
    }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], momentum: T::of(0.1) }
    }

    /// Blend batch statistics in; `var` is the biased batch variance over `n` values.
    pub fn update(&mut self, mean: &[T], var: &[T], n: usize) {
        let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
        for c in 0..self.mean.len() {
            self.mean[c] = (T::one() - self.momentum) * self.mean[c] + self.momentum * mean[c];
            self.var[c] = (T::one() - self.momentum) * self.var[c] + self.momentum * var[c] * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalisation of a `[C×H×W]` input. Train mode normalises by the
/// statistics over `H×W` and folds them into `stats`; eval mode uses `stats`.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    bn_scale: &Tensor<T>,
    bn_shift: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(input)?;
    if bn_scale.numel() != c || bn_shift.numel() != c || stats.mean.len() != c {
        return Err(shape_err!("batch_norm expects {c} channels"));
    }
    if stats.var.iter().any(|v| *v < T::zero()) {
        return Err(config_err!("negative running variance"));
    }
    let hw = h * w;
    let eps = T::of(BN_EPS);
    let mut out = input.data.clone();
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    for ch in 0..c {
        let plane = &input.data[ch * hw..(ch + 1) * hw];
        let (mean, var) = match mode {
            NormMode::Train => {
                let mean = plane.iter().copied().sum::<T>() / T::of(hw as f64);
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(hw as f64);
                (mean, var)
            }
            NormMode::Eval => (stats.mean[ch], stats.var[ch]),
        };
        means[ch] = mean;
        vars[ch] = var;
        let inv = T::one() / (var + eps).sqrt();
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v = bn_scale.data[ch] * (*v - mean) * inv + bn_shift.data[ch];
        }
    }
    if mode == NormMode::Train {
        stats.update(&means, &vars, hw);
    }
    Ok(Tensor::raw(input.shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::<f32>::new(&[0], vec![]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::<f32>::new(&[1], vec![f32::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
        let z = Tensor::<f64>::zeros(&[2, 3]).matmul(&Tensor::from_fn(&[3, 4], |i| i as f64)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
        let p = t(&[2, 2], &[1., 2., 3., 4.]).matmul(&t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(p.data(), &[17., 39.]);
        assert!(matches!(m.matmul(&Tensor::zeros(&[2, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_examples() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 3], |i| (i * i) as f64 * 0.1);
        let id = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(img.conv2d(&id, Padding::SameReflect).unwrap(), img);

        let c = Tensor::<f64>::full(&[1, 5, 5], 0.37);
        let blur = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let out = c.conv2d(&blur, Padding::SameReflect).unwrap();
        assert!(out.max_abs_diff(&c).unwrap() < 1e-12);

        let ones = Tensor::ones(&[1, 1, 3, 3]);
        let out = img.conv2d(&ones, Padding::None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        let direct: f64 = img.data().iter().sum();
        assert!((out.data()[0] - direct).abs() < 1e-12);

        assert!(matches!(img.conv2d(&Tensor::ones(&[1, 1, 2, 2]), Padding::None), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::<f64>::full(&[5], 2.0).softmax(0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let s = t(&[2], &[0.0, 1e4]).softmax(0).unwrap();
        assert!(s.data()[0] < 1e-300 && (s.data()[1] - 1.0).abs() < 1e-12);
        let s = t(&[2], &[1.0, 2.0]).softmax(0).unwrap();
        let e = core::f64::consts::E;
        assert!((s.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((s.data()[0] - 0.2689).abs() < 1e-4 && (s.data()[1] - 0.7311).abs() < 1e-4);
        let cols = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).softmax(0).unwrap();
        for c in 0..3 {
            assert!((cols.at2(0, c) + cols.at2(1, c) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(u.softmax(1), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_examples() {
        let x = t(&[1, 1, 2], &[-1.0, 1.0]);
        let one = t(&[1], &[1.0]);
        let zero = t(&[1], &[0.0]);
        let mut stats = RunningStats::new(1);
        let y = batch_norm(&x, &one, &zero, &mut stats, NormMode::Eval).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);

        let y = batch_norm(&x, &zero, &t(&[1], &[0.7]), &mut stats, NormMode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));

        let x = t(&[1, 1, 2], &[1.0, 3.0]);
        let y = batch_norm(&x, &one, &zero, &mut stats, NormMode::Train).unwrap();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12 && (y.data()[1] - expect).abs() < 1e-12);
        // momentum 0.1 toward mean 2, unbiased var 2
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
