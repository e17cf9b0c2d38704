//! Library results against independent reference computations.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use readi_core::contrastive::{nt_xent_loss, LossForm};
use readi_core::linalg;
use readi_core::model::{attention_logits, eigen_energy_profile, AttentionLayer};
use readi_core::Tensor;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn sorted_magnitudes(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn general_eigenvalues_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 2, 3, 5, 8, 13, 24] {
        let a = gaussian(&mut rng, n, n);
        let ours = sorted_magnitudes(linalg::eigenvalues(&a, n).unwrap().iter().map(|&(re, im)| re.hypot(im)).collect());
        let m = DMatrix::from_row_slice(n, n, &a);
        let theirs = sorted_magnitudes(m.complex_eigenvalues().iter().map(|c| c.norm()).collect());
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() <= 1e-8 * (1.0 + y), "n={n}: {x} vs {y}");
        }
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        let sum_re: f64 = linalg::eigenvalues(&a, n).unwrap().iter().map(|e| e.0).sum();
        assert!((trace - sum_re).abs() < 1e-8 * (1.0 + trace.abs()));
    }
}

#[test]
fn symmetric_and_singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (r, c) in [(4, 4), (6, 3), (3, 7), (10, 10)] {
        let a = gaussian(&mut rng, r, c);
        let m = DMatrix::from_row_slice(r, c, &a);
        let ours = sorted_magnitudes(linalg::singular_values(&a, r, c).unwrap());
        let theirs = sorted_magnitudes(m.clone().svd(false, false).singular_values.iter().copied().collect());
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y), "{x} vs {y}");
        }
        let s = &m * m.transpose();
        let sd: Vec<f64> = s.transpose().iter().copied().collect();
        let ours = sorted_magnitudes(linalg::symmetric_eigenvalues(&sd, r).unwrap());
        let theirs = sorted_magnitudes(s.symmetric_eigenvalues().iter().copied().collect());
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

/// `A_X = (W_Q X)ᵀ (W_K X) / √d` built with nalgebra from the layer's weights.
fn logits_oracle(layer: &AttentionLayer<f64>, x: &DMatrix<f64>, head: usize) -> DMatrix<f64> {
    let (f, d) = (layer.feat, layer.head_dim);
    let wq = DMatrix::from_row_slice(d, f, &layer.projection(head, "W_Q").unwrap());
    let wk = DMatrix::from_row_slice(d, f, &layer.projection(head, "W_K").unwrap());
    (&wq * x).transpose() * (&wk * x) / (d as f64).sqrt()
}

#[test]
fn attention_logits_match_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let layer = AttentionLayer::<f64>::random(12, 3, 2, &mut rng).unwrap();
    let xd = gaussian(&mut rng, 12, 9);
    let x = Tensor::new(&[12, 9], xd.clone()).unwrap();
    let xm = DMatrix::from_row_slice(12, 9, &xd);
    for head in 0..2 {
        let ours = attention_logits(&x, &layer, head).unwrap();
        let theirs = logits_oracle(&layer, &xm, head);
        for i in 0..9 {
            for j in 0..9 {
                assert!((ours[i * 9 + j] - theirs[(i, j)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn logit_rank_is_bounded_by_head_dim() {
    let (n, f, d) = (200, 64, 16);
    for draw in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let layer = AttentionLayer::<f64>::random(f, d, 1, &mut rng).unwrap();
        let xd = gaussian(&mut rng, f, n);
        let profile = eigen_energy_profile(&Tensor::new(&[f, n], xd.clone()).unwrap(), &layer, 0).unwrap();
        assert!(profile.numerical_rank(1e-9) <= d, "draw {draw}: rank {}", profile.numerical_rank(1e-9));
        // Top 8% of indices carry the whole spectrum.
        assert!(profile.cumulative[n * 8 / 100 - 1] > 1.0 - 1e-9);
        let sv = logits_oracle(&layer, &DMatrix::from_row_slice(f, n, &xd), 0).svd(false, false).singular_values;
        let top = sv.max();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-9 * top).count(), d);
    }
}

/// Loss straight from its definition with explicit loops.
fn nt_xent_brute(z: &[Vec<f64>], zhat: &[Vec<f64>], tau: f64, literal: bool) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (cos(&zhat[i], &z[i]) / tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            if literal && k == i {
                continue;
            }
            den += (cos(&zhat[i], &z[k]) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

proptest! {
    #[test]
    fn nt_xent_matches_brute_force(n in 2usize..=8, q in 1usize..6, tau in 0.05f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = || -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
                    return v;
                }
            }
        };
        let z: Vec<Vec<f64>> = (0..n).map(|_| row()).collect();
        let zhat: Vec<Vec<f64>> = (0..n).map(|_| row()).collect();
        let positives: Vec<usize> = (0..n).collect();
        for (form, literal) in [(LossForm::Standard, false), (LossForm::Literal, true)] {
            let ours = nt_xent_loss(&to_tensor(&z), &to_tensor(&zhat), &positives, tau, form).unwrap();
            let want = nt_xent_brute(&z, &zhat, tau, literal);
            prop_assert!((ours - want).abs() <= 1e-6 * (1.0 + want.abs()), "{form:?}: {ours} vs {want}");
        }
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one(n in 2usize..=8, q in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: Vec<Vec<f64>> = vec![v; n];
        let positives: Vec<usize> = (0..n).collect();
        let l = nt_xent_loss(&to_tensor(&z), &to_tensor(&z), &positives, 0.1, LossForm::Literal).unwrap();
        prop_assert!((l - ((n - 1) as f64).ln()).abs() < 1e-6);
    }
}
