//! Hidden Markov models through a three-view window embedding.
//!
//! A sequence `X_1..X_{2q+1}` is split into the prefix window `(X_1..X_q)`,
//! the middle observation `X_{q+1}` and the suffix window
//! `(X_{q+2}..X_{2q+1})`. Given the middle state these views are
//! independent, with population view matrices
//!
//! ```text
//! A_1 = M P̃,  A_{k+1} = (A_k ⊙ M) P̃      (prefix, X_1 most significant)
//! C_1 = M P,  C_{k+1} = (C_k ⊙ M) P      (suffix, X_{2q+1} most significant)
//! ```
//!
//! so the moment tensor is `[A_q, M, C_q diag(w)]`. Window indices are
//! big-endian in the orders above, matching the row order of
//! [`khatri_rao`].

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::multiview::{estimate_moment_tensor, normalize_factors, MultiViewSamples};
use super::{check_probability_vector, is_column_stochastic, parameter_error, SearchOptions, SearchSummary};
use crate::error::{dim, invalid, Error, Result};
use crate::spectral::{sigma_k, svd};
use crate::tensor::{khatri_rao, CpDecomposition, DenseTensor};

/// Default cap on the window alphabet size `n^q`.
pub const DEFAULT_WINDOW_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmParams {
    /// `P[i][j] = Pr(Z_{t+1} = i | Z_t = j)`.
    #[serde(with = "crate::serde_rows")]
    pub transition: DMatrix<f64>,
    /// `M[x][j] = Pr(X_t = x | Z_t = j)`.
    #[serde(with = "crate::serde_rows")]
    pub observation: DMatrix<f64>,
    #[serde(with = "crate::serde_rows::vec")]
    pub stationary: DVector<f64>,
}

impl HmmParams {
    /// Parameters with the stationary distribution of `transition`.
    pub fn new(transition: DMatrix<f64>, observation: DMatrix<f64>) -> Result<Self> {
        let stationary = stationary_distribution(&transition)?;
        Self::with_stationary(transition, observation, stationary)
    }

    /// Needed when the chain has several stationary distributions.
    pub fn with_stationary(transition: DMatrix<f64>, observation: DMatrix<f64>, stationary: DVector<f64>) -> Result<Self> {
        let p = Self { transition, observation, stationary };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.states();
        if self.transition.shape() != (r, r) || self.observation.ncols() != r || self.observation.nrows() == 0 {
            return Err(dim("transition must be R x R and observation n x R"));
        }
        check_probability_vector(&self.stationary, "stationary distribution")?;
        if !is_column_stochastic(&self.transition, 1e-10) || !is_column_stochastic(&self.observation, 1e-10) {
            return Err(invalid("transition and observation columns must be probability vectors"));
        }
        let drift = (&self.transition * &self.stationary - &self.stationary).amax();
        if drift > 1e-10 {
            return Err(invalid(format!("stationary distribution is off by {drift:e}")));
        }
        Ok(())
    }

    pub fn states(&self) -> usize {
        self.stationary.len()
    }

    pub fn alphabet(&self) -> usize {
        self.observation.nrows()
    }

    /// `σ_R(P)`.
    pub fn transition_sigma_min(&self) -> Result<f64> {
        sigma_k(&self.transition)
    }

    pub fn reverse(&self) -> Result<DMatrix<f64>> {
        reverse_transition(&self.transition, &self.stationary)
    }

    /// `(A_q, M, C_q)`.
    pub fn view_matrices(&self, q: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        if q == 0 {
            return Err(invalid("window length q must be positive"));
        }
        window_budget(self.alphabet(), q, DEFAULT_WINDOW_BUDGET)?;
        let m = &self.observation;
        let rev = self.reverse()?;
        let mut a = m * &rev;
        let mut c = m * &self.transition;
        for _ in 1..q {
            a = khatri_rao(&a, m)? * &rev;
            c = khatri_rao(&c, m)? * &self.transition;
        }
        Ok((a, m.clone(), c))
    }

    /// `[A_q, M, C_q diag(w)]`.
    pub fn population_cp(&self, q: usize) -> Result<CpDecomposition<f64>> {
        let (a, m, mut c) = self.view_matrices(q)?;
        for (mut col, &w) in c.column_iter_mut().zip(self.stationary.iter()) {
            col *= w;
        }
        CpDecomposition::new(vec![a, m, c])
    }

    pub fn population_moment(&self, q: usize) -> Result<DenseTensor<f64>> {
        self.population_cp(q)?.expand()
    }
}

/// The unique `w` with `Pw = w`, `Σ w = 1`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let r = p.nrows();
    if r == 0 || p.ncols() != r {
        return Err(dim("transition matrix must be square and nonempty"));
    }
    let mut sys = DMatrix::zeros(r + 1, r);
    sys.rows_mut(0, r).copy_from(&(p - DMatrix::identity(r, r)));
    sys.row_mut(r).fill(1.0);
    let mut rhs = DVector::zeros(r + 1);
    rhs[r] = 1.0;
    if sigma_k(&sys)? < 1e-10 {
        return Err(invalid("stationary distribution is not unique; pass it explicitly"));
    }
    let w = lstsq(&sys, &DMatrix::from_column_slice(r + 1, 1, rhs.as_slice()))?;
    Ok(w.column(0).into_owned())
}

/// `P̃ = diag(w) Pᵀ diag(w)⁻¹`, the transition matrix of the reversed chain.
pub fn reverse_transition(p: &DMatrix<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
    let r = w.len();
    if p.shape() != (r, r) {
        return Err(dim("transition and stationary sizes differ"));
    }
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(invalid("stationary distribution has a zero entry"));
    }
    Ok(DMatrix::from_fn(r, r, |i, j| w[i] * p[(j, i)] / w[j]))
}

fn window_budget(n: usize, q: usize, budget: u64) -> Result<usize> {
    let size = (n as f64).powi(q as i32);
    if size > budget as f64 {
        return Err(Error::Budget { what: "HMM window alphabet", estimate: size, budget });
    }
    Ok(n.pow(q as u32))
}

/// Big-endian index of `window` over an alphabet of size `n`.
pub fn encode_window(window: &[usize], n: usize) -> usize {
    window.iter().fold(0, |acc, &x| acc * n + x)
}

pub fn decode_window(mut index: usize, n: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = index % n;
        index /= n;
    }
    out
}

/// Equal-length observation sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HmmSequences {
    alphabet: usize,
    length: usize,
    data: Vec<usize>,
}

impl HmmSequences {
    pub fn new(alphabet: usize, length: usize, data: Vec<usize>) -> Result<Self> {
        if alphabet == 0 || length == 0 {
            return Err(invalid("alphabet and sequence length must be positive"));
        }
        if data.len() % length != 0 {
            return Err(dim(format!("{} observations do not split into length-{length} sequences", data.len())));
        }
        if let Some(&x) = data.iter().find(|&&x| x >= alphabet) {
            return Err(invalid(format!("observation {x} outside alphabet of size {alphabet}")));
        }
        Ok(Self { alphabet, length, data })
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.length
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.data.chunks(self.length)
    }
}

/// Draw `n_seq` sequences of `length` observations from the stationary chain.
pub fn sample_hmm(params: &HmmParams, length: usize, n_seq: usize, seed: u64) -> Result<HmmSequences> {
    params.validate()?;
    let cat = |v: Vec<f64>| WeightedIndex::new(v).map_err(|e| invalid(format!("bad distribution: {e}")));
    let start = cat(params.stationary.iter().copied().collect())?;
    let step: Vec<_> = params.transition.column_iter().map(|c| cat(c.iter().map(|x| x.max(0.0)).collect())).collect::<Result<_>>()?;
    let emit: Vec<_> = params.observation.column_iter().map(|c| cat(c.iter().map(|x| x.max(0.0)).collect())).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(length * n_seq);
    for _ in 0..n_seq {
        let mut z = start.sample(&mut rng);
        for t in 0..length {
            if t > 0 {
                z = step[z].sample(&mut rng);
            }
            data.push(emit[z].sample(&mut rng));
        }
    }
    HmmSequences::new(params.alphabet(), length, data)
}

/// Three-view samples `(prefix, middle, suffix)` from sequences of length
/// `2q + 1`; the window views have `n^q` categories.
pub fn hmm_embed(seqs: &HmmSequences, q: usize, budget: u64) -> Result<MultiViewSamples> {
    if q == 0 {
        return Err(invalid("window length q must be positive"));
    }
    if seqs.length() != 2 * q + 1 {
        return Err(dim(format!("sequences have length {}, expected 2q+1 = {}", seqs.length(), 2 * q + 1)));
    }
    let n = seqs.alphabet();
    let w = window_budget(n, q, budget)?;
    let mut data = Vec::with_capacity(3 * seqs.len());
    for s in seqs.rows() {
        data.push(encode_window(&s[..q], n));
        data.push(s[q]);
        data.push(s[q + 1..].iter().rev().fold(0, |acc, &x| acc * n + x));
    }
    MultiViewSamples::new(vec![w, n, w], data)
}

/// Sum rows of an `n^q x R` window matrix over the least significant digit:
/// `(D ⊙ M) P ↦ D P` when the columns of `M` sum to 1.
pub fn row_sum_collapse(c: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 || c.nrows() % n != 0 {
        return Err(dim(format!("{} rows are not a multiple of {n}", c.nrows())));
    }
    let rows = c.nrows() / n;
    Ok(DMatrix::from_fn(rows, c.ncols(), |i, j| (0..n).map(|k| c[(i * n + k, j)]).sum()))
}

/// Sum rows over the most significant digit; for the suffix matrix `C_q`
/// this gives `C_{q−1}` (`1ᵀ` when `q = 1`).
pub fn marginalize_leading(c: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 || c.nrows() % n != 0 {
        return Err(dim(format!("{} rows are not a multiple of {n}", c.nrows())));
    }
    let rows = c.nrows() / n;
    Ok(DMatrix::from_fn(rows, c.ncols(), |i, j| (0..n).map(|k| c[(k * rows + i, j)]).sum()))
}

fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .svd(true, true)
        .solve(b, 1e-14)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))
}

/// How the transition matrix was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionRoute {
    /// `D P = DP` by least squares.
    CollapsedRows,
    /// `P = (D ⊙ M̃)⁺ C̃`, used when `D` has rank below `R` (always for `q = 1`).
    KhatriRao,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmDiagnostics {
    pub search: SearchSummary,
    pub raw_weight_sum: f64,
    pub sign_flips: usize,
    pub route: TransitionRoute,
    /// `σ_R(D)`, zero when `D` has fewer than `R` rows.
    pub sigma_min_d: f64,
    /// `σ_R` of the matrix actually inverted.
    pub sigma_min_system: f64,
    /// `σ_R(P̃)` of the estimate.
    pub sigma_min_transition: f64,
    /// Residual `‖D P̃ − DP‖_F` of the collapse identity.
    pub collapse_residual: f64,
    /// The estimate is within `1e-6` of the identity: a deterministic chain,
    /// whose three views coincide.
    pub identity_transition: bool,
}

fn relative_tol(m: &DMatrix<f64>) -> Result<f64> {
    let s = svd(m)?;
    Ok(1e-9 * s.sigma.get(0).copied().unwrap_or(0.0).max(1.0))
}

/// Recover `P` from the suffix factor `C̃` and observation factor `M̃`.
pub fn recover_transition(c: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, TransitionRoute, f64, f64, f64)> {
    let n = m.nrows();
    let r = m.ncols();
    let d = marginalize_leading(c, n)?;
    let dp = row_sum_collapse(c, n)?;
    let sigma_d = sigma_k(&d)?;
    let sigma_d = if d.nrows() < r { 0.0 } else { sigma_d };
    let (p, route, sigma_sys) = if d.nrows() >= r && sigma_d > relative_tol(&d)? {
        (lstsq(&d, &dp)?, TransitionRoute::CollapsedRows, sigma_d)
    } else {
        let k = khatri_rao(&d, m)?;
        let s = if k.nrows() < r { 0.0 } else { sigma_k(&k)? };
        if !(s > relative_tol(&k)?) {
            return Err(Error::Numerical(format!(
                "transition system is ill-conditioned: σ_R(D) = {sigma_d:e}, σ_R(D ⊙ M̃) = {s:e}"
            )));
        }
        (lstsq(&k, c)?, TransitionRoute::KhatriRao, s)
    };
    let resid = (&d * &p - &dp).norm();
    Ok((p, route, sigma_d, sigma_sys, resid))
}

/// Learn from a `[n^q, n, n^q]` moment tensor.
pub fn learn_hmm_from_tensor(t: &DenseTensor<f64>, rank: usize, search: &SearchOptions) -> Result<(HmmParams, HmmDiagnostics)> {
    if t.order() != 3 || t.shape()[0] != t.shape()[2] {
        return Err(dim(format!("expected an [n^q, n, n^q] tensor, got {:?}", t.shape())));
    }
    if rank == 0 {
        return Err(invalid("rank must be positive"));
    }
    let res = search.decompose(t, rank, 1.0)?;
    let norm = normalize_factors(&res.decomposition)?;
    let m = norm.means[1].clone();
    let c = &norm.means[2];
    let (p, route, sigma_min_d, sigma_min_system, collapse_residual) = recover_transition(c, &m)?;
    let identity_transition = (&p - DMatrix::identity(rank, rank)).amax() < 1e-6;
    let diag = HmmDiagnostics {
        search: SearchSummary::of(&res, t),
        raw_weight_sum: norm.raw_weight_sum,
        sign_flips: norm.sign_flips,
        route,
        sigma_min_d,
        sigma_min_system,
        sigma_min_transition: sigma_k(&p)?,
        collapse_residual,
        identity_transition,
    };
    Ok((HmmParams { transition: p, observation: m, stationary: norm.weights }, diag))
}

pub fn learn_hmm(
    seqs: &HmmSequences,
    rank: usize,
    q: usize,
    search: &SearchOptions,
    window_budget: u64,
) -> Result<(HmmParams, HmmDiagnostics)> {
    let views = hmm_embed(seqs, q, window_budget)?;
    learn_hmm_from_tensor(&estimate_moment_tensor(&views, 3)?, rank, search)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmError {
    /// `permutation[s]` is the true state matched to estimated state `s`.
    pub permutation: Vec<usize>,
    pub observation: f64,
    pub transition: f64,
    pub stationary: f64,
}

/// Errors after relabeling states by the observation columns.
pub fn hmm_parameter_error(truth: &HmmParams, est: &HmmParams) -> Result<HmmError> {
    let e = parameter_error(
        std::slice::from_ref(&truth.observation),
        &truth.stationary,
        std::slice::from_ref(&est.observation),
        &est.stationary,
    )?;
    let pi = &e.permutation;
    let r = pi.len();
    let p = DMatrix::from_fn(r, r, |s, t| truth.transition[(pi[s], pi[t])]);
    Ok(HmmError {
        observation: e.matrices[0],
        transition: (&est.transition - p).norm(),
        stationary: e.weights,
        permutation: e.permutation,
    })
}
