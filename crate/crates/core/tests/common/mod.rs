#![allow(dead_code)]

use kt_core::spectral::combinations;
use kt_core::{Cp, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(n: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn unit_cols(n: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = gaussian(n, r, rng);
    for mut c in m.column_iter_mut() {
        let k = c.norm();
        c /= k;
    }
    m
}

/// Uniform point of the probability simplex.
pub fn simplex(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v: DVector<f64> = DVector::from_fn(n, |_, _| Exp1.sample(rng));
    let s = v.sum();
    v / s
}

/// Column-stochastic matrix with entries bounded away from zero.
pub fn stochastic(n: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, r, |_, _| 0.1 + rng.random::<f64>());
    for mut c in m.column_iter_mut() {
        let s = c.sum();
        c /= s;
    }
    m
}

/// `t` plus Gaussian noise of Frobenius norm exactly `eta`.
pub fn perturb(t: &Tensor, eta: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let g: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(rng)).collect();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let data = t.data().iter().zip(&g).map(|(a, b)| a + eta * b / norm).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Order-3 decomposition with unit columns and its tensor perturbed by `eta`.
pub fn planted(n: usize, r: usize, eta: f64, rng: &mut ChaCha8Rng) -> (Cp, Tensor) {
    let cp = Cp::new((0..3).map(|_| unit_cols(n, r, rng)).collect()).unwrap();
    let t = perturb(&cp.expand().unwrap(), eta, rng);
    (cp, t)
}

/// Smallest singular value of a column subset, from the Gram eigenvalues.
pub fn gram_sigma_min(a: &DMatrix<f64>, cols: &[usize]) -> f64 {
    let s = a.select_columns(cols);
    if cols.len() > a.nrows() {
        return 0.0;
    }
    let g = s.transpose() * &s;
    SymmetricEigen::new(g).eigenvalues.min().max(0.0).sqrt()
}

/// Robust Kruskal rank by brute force: the largest k such that every
/// k-subset has `σ_min ≥ 1/τ`, checking every size independently.
/// Also returns the distance of the closest subset to the threshold.
pub fn krank_oracle(a: &DMatrix<f64>, tau: f64) -> (usize, f64) {
    let thr = 1.0 / tau;
    let mut best = 0;
    let mut margin = f64::INFINITY;
    for k in 1..=a.ncols() {
        let mut all = true;
        for cols in combinations(a.ncols(), k) {
            let s = gram_sigma_min(a, &cols);
            margin = margin.min((s - thr).abs() / thr);
            all &= s >= thr;
        }
        if all {
            best = k;
        }
    }
    (best, margin)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}
