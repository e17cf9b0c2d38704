//! Dense eigenvalue routines in `f64`: balancing, Hessenberg reduction and
//! the Francis double-shift QR iteration for general real matrices, and the
//! cyclic Jacobi method for symmetric ones.

use alloc::vec::Vec;

use crate::error::{Error, Result};

const MAX_ITS: usize = 60;

/// Eigenvalues `(re, im)` of the row-major `n×n` matrix `a`, unordered.
pub fn eigenvalues(a: &[f64], n: usize) -> Result<Vec<(f64, f64)>> {
    if a.len() != n * n {
        return Err(Error::Shape(alloc::format!("expected {n}x{n} matrix, got {} values", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    let mut m = a.to_vec();
    balance(&mut m, n);
    hessenberg(&mut m, n);
    hqr(&mut m, n)
}

fn balance(a: &mut [f64], n: usize) {
    const RADIX: f64 = 2.0;
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let (mut c, mut r) = (0.0, 0.0);
            for j in 0..n {
                if j != i {
                    c += a[j * n + i].abs();
                    r += a[i * n + j].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= sqrdx;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let g = 1.0 / f;
                for j in 0..n {
                    a[i * n + j] *= g;
                }
                for j in 0..n {
                    a[j * n + i] *= f;
                }
            }
        }
    }
}

/// Reduce to upper Hessenberg form by stabilised elimination.
fn hessenberg(a: &mut [f64], n: usize) {
    for m in 1..n.saturating_sub(1) {
        let mut x = 0.0f64;
        let mut piv = m;
        for j in m..n {
            if a[j * n + m - 1].abs() > x.abs() {
                x = a[j * n + m - 1];
                piv = j;
            }
        }
        if piv != m {
            for j in m - 1..n {
                a.swap(piv * n + j, m * n + j);
            }
            for j in 0..n {
                a.swap(j * n + piv, j * n + m);
            }
        }
        if x != 0.0 {
            for i in m + 1..n {
                let mut y = a[i * n + m - 1];
                if y != 0.0 {
                    y /= x;
                    a[i * n + m - 1] = 0.0;
                    for j in m..n {
                        a[i * n + j] -= y * a[m * n + j];
                    }
                    for j in 0..n {
                        a[j * n + m] += y * a[j * n + i];
                    }
                }
            }
        }
    }
    for i in 2..n {
        for j in 0..i - 1 {
            a[i * n + j] = 0.0;
        }
    }
}

fn hqr(a: &mut [f64], n: usize) -> Result<Vec<(f64, f64)>> {
    let at = |i: usize, j: usize| i * n + j;
    let mut w = alloc::vec![(0.0, 0.0); n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[at(i, j)].abs();
        }
    }
    let eps = f64::EPSILON;
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    let mut its = 0;
    while nn >= 0 {
        let nu = nn as usize;
        let mut l = nu;
        while l > 0 {
            let mut s = a[at(l - 1, l - 1)].abs() + a[at(l, l)].abs();
            if s == 0.0 {
                s = anorm;
            }
            if a[at(l, l - 1)].abs() <= eps * s {
                a[at(l, l - 1)] = 0.0;
                break;
            }
            l -= 1;
        }
        let mut x = a[at(nu, nu)];
        if l == nu {
            w[nu] = (x + t, 0.0);
            nn -= 1;
            its = 0;
            continue;
        }
        let mut y = a[at(nu - 1, nu - 1)];
        let mut ww = a[at(nu, nu - 1)] * a[at(nu - 1, nu)];
        if l == nu - 1 {
            let p = 0.5 * (y - x);
            let q = p * p + ww;
            let z = libm::sqrt(q.abs());
            x += t;
            if q >= 0.0 {
                let z = p + z.copysign(p);
                w[nu - 1] = (x + z, 0.0);
                w[nu] = (if z != 0.0 { x - ww / z } else { x + z }, 0.0);
            } else {
                w[nu] = (x + p, -z);
                w[nu - 1] = (x + p, z);
            }
            nn -= 2;
            its = 0;
            continue;
        }
        if its == MAX_ITS {
            return Err(Error::NoConvergence(alloc::format!("QR iteration stalled at index {nu} of {n}")));
        }
        if its % 10 == 0 && its > 0 {
            t += x;
            for i in 0..=nu {
                a[at(i, i)] -= x;
            }
            let s = a[at(nu, nu - 1)].abs() + a[at(nu - 1, nu - 2)].abs();
            x = 0.75 * s;
            y = x;
            ww = -0.4375 * s * s;
        }
        its += 1;
        let (mut p, mut q, mut r);
        let mut m = nu - 2;
        loop {
            let z = a[at(m, m)];
            let rr = x - z;
            let ss = y - z;
            p = (rr * ss - ww) / a[at(m + 1, m)] + a[at(m, m + 1)];
            q = a[at(m + 1, m + 1)] - z - rr - ss;
            r = a[at(m + 2, m + 1)];
            let s = p.abs() + q.abs() + r.abs();
            p /= s;
            q /= s;
            r /= s;
            if m == l {
                break;
            }
            let u = a[at(m, m - 1)].abs() * (q.abs() + r.abs());
            let v = p.abs() * (a[at(m - 1, m - 1)].abs() + z.abs() + a[at(m + 1, m + 1)].abs());
            if u <= eps * v {
                break;
            }
            m -= 1;
        }
        for i in m..nu - 1 {
            a[at(i + 2, i)] = 0.0;
            if i != m {
                a[at(i + 2, i - 1)] = 0.0;
            }
        }
        let mut k = m;
        while k < nu {
            if k != m {
                p = a[at(k, k - 1)];
                q = a[at(k + 1, k - 1)];
                r = if k + 1 != nu { a[at(k + 2, k - 1)] } else { 0.0 };
                x = p.abs() + q.abs() + r.abs();
                if x != 0.0 {
                    p /= x;
                    q /= x;
                    r /= x;
                }
            }
            let s = libm::sqrt(p * p + q * q + r * r).copysign(p);
            if s != 0.0 {
                if k == m {
                    if l != m {
                        a[at(k, k - 1)] = -a[at(k, k - 1)];
                    }
                } else {
                    a[at(k, k - 1)] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in k..=nu {
                    let mut pp = a[at(k, j)] + q * a[at(k + 1, j)];
                    if k + 1 != nu {
                        pp += r * a[at(k + 2, j)];
                        a[at(k + 2, j)] -= pp * z;
                    }
                    a[at(k + 1, j)] -= pp * y;
                    a[at(k, j)] -= pp * x;
                }
                let mmin = if nu < k + 3 { nu } else { k + 3 };
                for i in l..=mmin {
                    let mut pp = x * a[at(i, k)] + y * a[at(i, k + 1)];
                    if k + 1 != nu {
                        pp += z * a[at(i, k + 2)];
                        a[at(i, k + 2)] -= pp * r;
                    }
                    a[at(i, k + 1)] -= pp * q;
                    a[at(i, k)] -= pp;
                }
            }
            k += 1;
        }
    }
    Ok(w)
}

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations,
/// sorted descending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::Shape(alloc::format!("expected {n}x{n} matrix, got {} values", a.len())));
    }
    let mut m = a.to_vec();
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s
    };
    let total: f64 = m.iter().map(|v| v * v).sum();
    let mut sweeps = 0;
    while off(&m) > 1e-30 * total.max(f64::MIN_POSITIVE) {
        if sweeps == 100 {
            return Err(Error::NoConvergence("Jacobi sweeps exhausted".into()));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut d: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    d.sort_by(|a, b| b.total_cmp(a));
    Ok(d)
}

/// Singular values of a row-major `rows×cols` matrix, descending.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let k = rows.min(cols);
    let mut gram = alloc::vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = if rows <= cols {
                (0..cols).map(|c| a[i * cols + c] * a[j * cols + c]).sum()
            } else {
                (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum()
            };
        }
    }
    Ok(symmetric_eigenvalues(&gram, k)?.into_iter().map(|v| libm::sqrt(v.max(0.0))).collect())
}

/// Cumulative fractions of the sorted magnitudes: entry `i` is the share of
/// total magnitude carried by the `i+1` largest values.
pub fn cumulative_energy(magnitudes: &[f64]) -> Result<Vec<f64>> {
    let mut m: Vec<f64> = magnitudes.iter().map(|v| v.abs()).collect();
    m.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = m.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("spectrum is identically zero".into()));
    }
    let mut acc = 0.0;
    Ok(m.iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sorted_re(mut e: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        e.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        e
    }

    #[test]
    fn triangular_matrix_eigenvalues_are_diagonal() {
        let a = [2.0, 1.0, 3.0, 0.0, -1.0, 4.0, 0.0, 0.0, 5.0];
        let e = sorted_re(eigenvalues(&a, 3).unwrap());
        for ((re, im), want) in e.iter().zip([-1.0, 2.0, 5.0]) {
            assert!((re - want).abs() < 1e-12 && im.abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_has_complex_pair() {
        let a = [0.0, -1.0, 1.0, 0.0];
        let e = sorted_re(eigenvalues(&a, 2).unwrap());
        assert!((e[0].1 + 1.0).abs() < 1e-12 && (e[1].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn companion_matrix_roots() {
        // x^4 - 10x^3 + 35x^2 - 50x + 24 = (x-1)(x-2)(x-3)(x-4)
        let a = [10.0, -35.0, 50.0, -24.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let e = sorted_re(eigenvalues(&a, 4).unwrap());
        for ((re, _), want) in e.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((re - want).abs() < 1e-9, "{re} vs {want}");
        }
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let a = [2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0];
        let d = symmetric_eigenvalues(&a, 3).unwrap();
        let s = core::f64::consts::SQRT_2;
        for (got, want) in d.iter().zip([2.0 + s, 2.0, 2.0 - s]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_values_of_rank_one() {
        let a = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        let s = singular_values(&a, 3, 2).unwrap();
        assert!((s[0] - (70.0f64).sqrt()).abs() < 1e-12 && s[1].abs() < 1e-7);
    }

    #[test]
    fn energy_of_identity_is_linear() {
        let c = cumulative_energy(&vec![1.0; 100]).unwrap();
        assert!((c[2] - 0.03).abs() < 1e-12);
        assert_eq!(c[99], 1.0);
        assert!(cumulative_energy(&[0.0, 0.0]).is_err());
    }
}
