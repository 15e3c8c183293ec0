//! Singular values, subspace projection and robust Kruskal rank.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::CpDecomposition;
use crate::Scalar;

/// Default cap on the number of column subsets examined at any one size.
pub const DEFAULT_KRANK_BUDGET: u64 = 1_000_000;
/// Default number of random directions tried by [`find_separating_vector`].
pub const DEFAULT_SEPARATING_RETRIES: usize = 64;

/// Thin SVD `m = u diag(sigma) vᵀ` with `sigma` descending.
#[derive(Debug, Clone)]
pub struct Svd<S: Scalar> {
    pub sigma: DVector<S>,
    pub u: DMatrix<S>,
    pub v: DMatrix<S>,
}

/// Thin SVD with descending singular values. Each left singular vector is
/// oriented so its largest-magnitude entry (first on ties) is positive.
pub fn svd<S: Scalar>(m: &DMatrix<S>) -> Result<Svd<S>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd { sigma: DVector::zeros(0), u: DMatrix::zeros(rows, 0), v: DMatrix::zeros(cols, 0) });
    }
    let dec = m.clone().svd(true, true);
    let u0 = dec.u.expect("u requested");
    let v0 = dec.v_t.expect("v requested").transpose();
    let s0 = dec.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s0[b].partial_cmp(&s0[a]).expect("finite singular values"));
    let mut u = u0.select_columns(&order);
    let mut v = v0.select_columns(&order);
    let sigma = DVector::from_iterator(k, order.iter().map(|&i| s0[i].max(S::zero())));
    for c in 0..k {
        let mut best = 0;
        for i in 1..rows {
            if u[(i, c)].abs() > u[(best, c)].abs() {
                best = i;
            }
        }
        if u[(best, c)] < S::zero() {
            u.column_mut(c).neg_mut();
            v.column_mut(c).neg_mut();
        }
    }
    Ok(Svd { sigma, u, v })
}

/// Singular values only, descending.
pub fn singular_values<S: Scalar>(m: &DMatrix<S>) -> Result<DVector<S>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("singular value input"));
    }
    if m.nrows().min(m.ncols()) == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut s: Vec<S> = m.clone().singular_values().iter().map(|&x| x.max(S::zero())).collect();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(DVector::from_vec(s))
}

/// `σ_k` of an `n x k` matrix; zero when `k > n`.
pub fn sigma_k<S: Scalar>(m: &DMatrix<S>) -> Result<S> {
    let k = m.ncols();
    if k == 0 {
        return Ok(S::zero());
    }
    if k > m.nrows() {
        return Ok(S::zero());
    }
    Ok(singular_values(m)?[k - 1])
}

/// Orthogonal projector onto the span of an orthonormal basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar + Serialize", deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct SubspaceProjector<S: Scalar> {
    #[serde(with = "crate::serde_rows")]
    basis: DMatrix<S>,
}

impl<S: Scalar> SubspaceProjector<S> {
    /// Wrap a basis; columns must be orthonormal.
    pub fn from_orthonormal(basis: DMatrix<S>) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &DMatrix<S> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `Bᵀx`.
    pub fn coordinates(&self, x: &DVector<S>) -> DVector<S> {
        self.basis.tr_mul(x)
    }

    /// `B Bᵀ x`.
    pub fn project(&self, x: &DVector<S>) -> DVector<S> {
        &self.basis * self.coordinates(x)
    }

    pub fn project_matrix(&self, m: &DMatrix<S>) -> DMatrix<S> {
        &self.basis * self.basis.tr_mul(m)
    }

    pub fn matrix(&self) -> DMatrix<S> {
        &self.basis * self.basis.transpose()
    }

    /// `‖m − Π m‖_F`.
    pub fn residual(&self, m: &DMatrix<S>) -> S {
        (m - self.project_matrix(m)).norm()
    }
}

/// Projector onto the top-`r` left singular subspace of `m`.
pub fn top_r_subspace<S: Scalar>(m: &DMatrix<S>, r: usize) -> Result<SubspaceProjector<S>> {
    let k = m.nrows().min(m.ncols());
    if r == 0 || r > k {
        return Err(invalid(format!("subspace dimension {r} outside 1..={k}")));
    }
    let d = svd(m)?;
    Ok(SubspaceProjector { basis: d.u.columns(0, r).into_owned() })
}

/// Robust Kruskal rank κ_τ together with its tightest failing subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrankCertificate<S> {
    pub tau: S,
    pub krank: usize,
    /// Column subset of size `krank + 1` with the smallest `σ_{krank+1}`;
    /// empty when `krank == R`.
    pub witness_columns: Vec<usize>,
    /// `σ_min` of the witness submatrix, absent when `krank == R`.
    pub witness_sigma: Option<S>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] != i + n - k) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Comparison threshold for `σ ≥ 1/τ`, relaxed by a few ulps so that exact
/// boundary cases (orthonormal columns at τ = 1) are not lost to rounding.
pub fn krank_threshold<S: Scalar>(tau: S) -> S {
    S::one() / tau * (S::one() - S::of(64.0) * S::default_epsilon())
}

pub fn robust_krank<S: Scalar>(a: &DMatrix<S>, tau: S) -> Result<KrankCertificate<S>> {
    robust_krank_with_budget(a, tau, DEFAULT_KRANK_BUDGET)
}

/// κ_τ(a): the largest k such that every k-column submatrix has `σ_k ≥ 1/τ`.
///
/// Sizes are checked in increasing order and each size is checked in full
/// before the next. Refuses when some size needs more than `budget`
/// subsets.
pub fn robust_krank_with_budget<S: Scalar>(
    a: &DMatrix<S>,
    tau: S,
    budget: u64,
) -> Result<KrankCertificate<S>> {
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(invalid("tau must be positive and finite"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("robust_krank input"));
    }
    let r = a.ncols();
    let thr = krank_threshold(tau);
    for k in 1..=r {
        let count = binomial(r, k);
        if count > budget as f64 {
            return Err(Error::Budget { what: "robust Kruskal rank enumeration", estimate: count, budget });
        }
        let subsets = combinations(r, k);
        let sigmas: Vec<S> = subsets
            .par_iter()
            .map(|cols| sigma_k(&a.select_columns(cols)))
            .collect::<Result<_>>()?;
        let mut worst = 0;
        for (i, &s) in sigmas.iter().enumerate() {
            if s < sigmas[worst] {
                worst = i;
            }
        }
        if !(sigmas[worst] >= thr) {
            return Ok(KrankCertificate {
                tau,
                krank: k - 1,
                witness_columns: subsets[worst].clone(),
                witness_sigma: Some(sigmas[worst]),
            });
        }
    }
    Ok(KrankCertificate { tau, krank: r, witness_columns: Vec::new(), witness_sigma: None })
}

/// Per-mode robust Kruskal ranks checked against `Σ k_j ≥ 2R + ℓ − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KruskalReport<S> {
    pub certificates: Vec<KrankCertificate<S>>,
    pub kranks: Vec<usize>,
    pub sum: usize,
    pub required: usize,
    pub margin: i64,
    pub passes: bool,
}

/// `taus` holds one value per mode, or a single value used for every mode.
pub fn check_kruskal_condition<S: Scalar>(
    decomp: &CpDecomposition<S>,
    taus: &[S],
) -> Result<KruskalReport<S>> {
    let l = decomp.order();
    let taus: Vec<S> = match taus.len() {
        1 => vec![taus[0]; l],
        n if n == l => taus.to_vec(),
        n => return Err(invalid(format!("{n} tau values for an order-{l} decomposition"))),
    };
    let certificates = decomp
        .factors()
        .iter()
        .zip(&taus)
        .map(|(f, &t)| robust_krank(f, t))
        .collect::<Result<Vec<_>>>()?;
    let kranks: Vec<usize> = certificates.iter().map(|c| c.krank).collect();
    let sum: usize = kranks.iter().sum();
    let required = 2 * decomp.rank() + l - 1;
    let margin = sum as i64 - required as i64;
    Ok(KruskalReport { certificates, kranks, sum, required, margin, passes: margin >= 0 })
}

/// A unit vector with large inner product against every input vector.
#[derive(Debug, Clone)]
pub struct SeparatingVector<S: Scalar> {
    pub w: DVector<S>,
    pub attempts: usize,
    /// `ε / (20 d t)` with ε the smallest input norm.
    pub threshold: S,
}

pub fn find_separating_vector<S: Scalar>(vectors: &[DVector<S>], seed: u64) -> Result<SeparatingVector<S>> {
    find_separating_vector_with(vectors, seed, DEFAULT_SEPARATING_RETRIES)
}

/// Draw Gaussian directions until `|⟨u_i, w⟩| > ε/(20dt)` for every input.
pub fn find_separating_vector_with<S: Scalar>(
    vectors: &[DVector<S>],
    seed: u64,
    retries: usize,
) -> Result<SeparatingVector<S>> {
    let Some(first) = vectors.first() else {
        return Err(invalid("no vectors to separate"));
    };
    let d = first.len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(invalid("vectors must share a positive dimension"));
    }
    let eps = vectors.iter().map(|v| v.norm()).fold(S::max_value().unwrap(), |a, b| a.min(b));
    if !(eps > S::zero()) {
        return Err(invalid("every vector needs a positive norm"));
    }
    let threshold = eps / S::of(20.0 * d as f64 * vectors.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=retries {
        let g = DVector::from_fn(d, |_, _| S::of(StandardNormal.sample(&mut rng)));
        let n = g.norm();
        if !(n > S::zero()) {
            continue;
        }
        let w = g / n;
        if vectors.iter().all(|v| v.dot(&w).abs() > threshold) {
            return Ok(SeparatingVector { w, attempts: attempt, threshold });
        }
    }
    Err(Error::RetriesExhausted {
        attempts: retries,
        reason: "no random direction cleared the separation threshold".into(),
    })
}

/// Number of entries with magnitude at least `eps`; with `eps == 0` the
/// number of nonzero entries.
pub fn nz_count<S: Scalar>(v: &[S], eps: S) -> usize {
    if eps == S::zero() {
        v.iter().filter(|x| **x != S::zero()).count()
    } else {
        v.iter().filter(|x| x.abs() >= eps).count()
    }
}
