//! Slice-level numeric kernels shared by value-level tensor ops and the tape.
//!
//! Every kernel runs its reductions in a fixed order so repeated calls are
//! bit-identical.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `op(a) · op(b)` where `op` optionally transposes. `a` is stored as
/// `[m×k]` (or `[k×m]` when `ta`), `b` as `[k×n]` (or `[n×k]` when `tb`).
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, m, k, n, ta, tb, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_acc<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [T],
) {
    let at;
    let a = if ta {
        at = transpose(k, m, a);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if tb {
        bt = transpose(n, k, b);
        &bt[..]
    } else {
        b
    };
    gemm_acc(m, k, n, a, b, out);
}

/// Padding applied around the spatial dims of a convolution input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input size; borders are mirrored without repeating
    /// the edge sample (`[2,1 | 0,1,2,3 | 2,1]`).
    SameReflect,
    None,
}

impl Padding {
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::SameReflect => k / 2,
            Padding::None => 0,
        }
    }

    pub fn out_size(self, size: usize, k: usize) -> usize {
        match self {
            Padding::SameReflect => size,
            Padding::None => size + 1 - k,
        }
    }
}

/// Mirror index `i` (possibly negative or past the end) into `[0, len)`.
#[inline]
pub fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

/// Unfold one `[c×h×w]` image into columns `[c·k·k × oh·ow]`.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: Padding) -> Vec<T> {
    let p = pad.amount(k) as isize;
    let oh = pad.out_size(h, k);
    let ow = pad.out_size(w, k);
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = reflect(oy as isize + ky as isize - p, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize + kx as isize - p, w);
                        dst[oy * ow + ox] = plane[sy * w + sx];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx` (`[c×h×w]`).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: Padding, dx: &mut [T]) {
    let p = pad.amount(k) as isize;
    let oh = pad.out_size(h, k);
    let ow = pad.out_size(w, k);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = reflect(oy as isize + ky as isize - p, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize + kx as isize - p, w);
                        plane[sy * w + sx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlate a single `[cin×h×w]` image with `[cout×cin×k×k]` weights.
pub fn conv2d_single<T: Real>(
    x: &[T],
    weight: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: Padding,
) -> Vec<T> {
    let oh = pad.out_size(h, k);
    let ow = pad.out_size(w, k);
    if k == 1 {
        return matmul(weight, x, cout, cin, h * w, false, false);
    }
    let cols = im2col(x, cin, h, w, k, pad);
    matmul(weight, &cols, cout, cin * k * k, oh * ow, false, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-2, 1), 0);
    }

    #[test]
    fn transposed_matmul_agrees_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let direct = matmul(&a, &b, 2, 3, 4, false, false);
        let at = transpose(2, 3, &a);
        let bt = transpose(3, 4, &b);
        assert_eq!(matmul(&at, &bt, 2, 3, 4, true, true), direct);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, c, h, w, k, Padding::SameReflect);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_acc(&y, c, h, w, k, Padding::SameReflect, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
