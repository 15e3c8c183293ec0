//! Mixtures of spherical Gaussians `x = μ_h + ε`, `ε ~ N(0, σ² I)`.
//!
//! Raw moments expand as `E[x^⊗k] = Σ_S Mom_|S| ⊗ E[ε^⊗(k−|S|)]` over
//! subsets `S` of the modes, with `Mom_s = Σ_i w_i μ_i^⊗s`. Peeling the
//! mixed terms off order by order gives `Mom_ℓ` from the raw moments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::multiview::checked_count;
use super::{check_probability_vector, renormalize, SearchOptions, SearchSummary};
use crate::error::{dim, invalid, Error, Result};
use crate::matching::{align_symmetric, recover_weight};
use crate::tensor::{next_index, CpDecomposition, DenseTensor};

/// Samples per shard in moment accumulation.
const SHARD: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureParams {
    #[serde(with = "crate::serde_rows::vec")]
    pub weights: DVector<f64>,
    /// `n x R`, one mean per column.
    #[serde(with = "crate::serde_rows")]
    pub means: DMatrix<f64>,
    pub sigma: f64,
}

impl GaussianMixtureParams {
    pub fn new(weights: DVector<f64>, means: DMatrix<f64>, sigma: f64) -> Result<Self> {
        let p = Self { weights, means, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability_vector(&self.weights, "weights")?;
        if self.means.ncols() != self.weights.len() || self.means.nrows() == 0 {
            return Err(dim("means must be n x R"));
        }
        if self.means.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gaussian means"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(invalid("sigma must be positive"));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    /// `Mom_k = Σ_i w_i μ_i^⊗k` for `k = 1..=order`.
    pub fn population_mom(&self, order: usize) -> Result<Vec<DenseTensor<f64>>> {
        (1..=order).map(|k| weighted_symmetric(&self.means, self.weights.as_slice(), k)).collect()
    }

    /// `E[x^⊗k]` for `k = 1..=order`.
    pub fn population_raw_moments(&self, order: usize) -> Result<Vec<DenseTensor<f64>>> {
        let mom = self.population_mom(order)?;
        (1..=order).map(|k| mixed_sum(k, self.dim(), &mom, self.sigma, true)).collect()
    }
}

/// `m_s = E[g^s]` for `g ~ N(0, σ²)`: `σ^s (s−1)!!` for even `s`, else 0.
pub fn gaussian_univariate_moment(s: usize, sigma: f64) -> f64 {
    if s % 2 == 1 {
        return 0.0;
    }
    let dfact: f64 = (1..s).step_by(2).map(|k| k as f64).product();
    sigma.powi(s as i32) * dfact
}

/// Product of `m_c` over buckets of equal indices of size `c`.
fn noise_entry(idx: &[usize], sigma: f64) -> f64 {
    let mut sorted: Vec<usize> = idx.to_vec();
    sorted.sort_unstable();
    let mut v = 1.0;
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i] != sorted[start] {
            v *= gaussian_univariate_moment(i - start, sigma);
            if v == 0.0 {
                return 0.0;
            }
            start = i;
        }
    }
    v
}

/// `E[ε^⊗order]` for `ε ~ N(0, σ² I_n)`.
pub fn gaussian_noise_tensor(order: usize, sigma: f64, n: usize) -> Result<DenseTensor<f64>> {
    if order == 0 || n == 0 {
        return Err(invalid("noise tensor needs positive order and dimension"));
    }
    DenseTensor::from_fn(vec![n; order], |idx| noise_entry(idx, sigma))
}

/// `Σ_S Mom_|S|[i_S] · E[ε^⊗|S^c|][i_{S^c}]` over subsets `S` of the `k`
/// modes; the full set `S = [k]` is included only when `include_full`.
/// `mom[s − 1]` holds `Mom_s`; `Mom_0 = 1`.
fn mixed_sum(k: usize, n: usize, mom: &[DenseTensor<f64>], sigma: f64, include_full: bool) -> Result<DenseTensor<f64>> {
    let full = (1usize << k) - 1;
    DenseTensor::from_fn(vec![n; k], |idx| {
        let mut acc = 0.0;
        let mut inner = Vec::with_capacity(k);
        let mut outer = Vec::with_capacity(k);
        for mask in 0..=full {
            if mask == full && !include_full {
                continue;
            }
            if (k - mask.count_ones() as usize) % 2 == 1 {
                continue;
            }
            inner.clear();
            outer.clear();
            for (b, &i) in idx.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    inner.push(i);
                } else {
                    outer.push(i);
                }
            }
            let noise = if outer.is_empty() { 1.0 } else { noise_entry(&outer, sigma) };
            if noise == 0.0 {
                continue;
            }
            let m = if inner.is_empty() { 1.0 } else { mom[inner.len() - 1].get(&inner) };
            acc += m * noise;
        }
        acc
    })
}

/// `Mom_1..Mom_ℓ` from raw moments `E[x^⊗1]..E[x^⊗ℓ]`.
pub fn mom_from_raw(raw: &[DenseTensor<f64>], sigma: f64) -> Result<Vec<DenseTensor<f64>>> {
    let n = raw.first().ok_or_else(|| invalid("no raw moments"))?.shape()[0];
    let mut mom: Vec<DenseTensor<f64>> = Vec::with_capacity(raw.len());
    for (k, e) in raw.iter().enumerate().map(|(i, e)| (i + 1, e)) {
        if e.shape() != vec![n; k].as_slice() {
            return Err(dim(format!("raw moment {k} has shape {:?}", e.shape())));
        }
        let mixed = mixed_sum(k, n, &mom, sigma, false)?;
        mom.push(e.sub(&mixed)?);
    }
    Ok(mom)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.c
    }
}

/// Empirical `E[x^⊗k]` for `k = 1..=order`; rows of `samples` are points.
/// Shards are summed in parallel and combined in a fixed order, so the
/// result does not depend on the thread count.
pub fn empirical_raw_moments(samples: &DMatrix<f64>, order: usize) -> Result<Vec<DenseTensor<f64>>> {
    let (count, n) = samples.shape();
    if count == 0 {
        return Err(invalid("empty sample set"));
    }
    if order == 0 || n == 0 {
        return Err(invalid("order and dimension must be positive"));
    }
    let lens: Vec<usize> = (1..=order).map(|k| crate::tensor::checked_len(&vec![n; k])).collect::<Result<_>>()?;
    let rows: Vec<usize> = (0..count).collect();
    let shards: Vec<Vec<Vec<f64>>> = rows
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut acc: Vec<Vec<f64>> = lens.iter().map(|&l| vec![0.0; l]).collect();
            let mut cur = vec![1.0];
            let mut next = Vec::new();
            for &i in chunk {
                let x = samples.row(i);
                cur.clear();
                cur.push(1.0);
                for a in acc.iter_mut() {
                    next.clear();
                    for &c in &cur {
                        next.extend(x.iter().map(|&xi| c * xi));
                    }
                    std::mem::swap(&mut cur, &mut next);
                    for (s, &v) in a.iter_mut().zip(&cur) {
                        *s += v;
                    }
                }
            }
            acc
        })
        .collect();
    let total = count as f64;
    (1..=order)
        .map(|k| {
            let mut sums = vec![Compensated::default(); lens[k - 1]];
            for shard in &shards {
                for (s, &v) in sums.iter_mut().zip(&shard[k - 1]) {
                    s.add(v);
                }
            }
            DenseTensor::new(vec![n; k], sums.into_iter().map(|s| s.value() / total).collect())
        })
        .collect()
}

/// `Mom_1..Mom_ℓ` estimated from samples.
pub fn mom_tensors(samples: &DMatrix<f64>, order: usize, sigma: f64) -> Result<Vec<DenseTensor<f64>>> {
    mom_from_raw(&empirical_raw_moments(samples, order)?, sigma)
}

/// Estimate of `Mom_ℓ = Σ_i w_i μ_i^⊗ℓ`.
pub fn mom_tensor(samples: &DMatrix<f64>, order: usize, sigma: f64) -> Result<DenseTensor<f64>> {
    Ok(mom_tensors(samples, order, sigma)?.pop().expect("order ≥ 1"))
}

/// Square root of the smallest eigenvalue of the centered covariance.
pub fn estimate_sigma(samples: &DMatrix<f64>) -> Result<f64> {
    let (count, n) = samples.shape();
    if n == 0 {
        return Err(invalid("samples have no coordinates"));
    }
    if count < n {
        return Err(invalid(format!("{count} samples are fewer than the {n} dimensions")));
    }
    let mean = samples.row_mean();
    let centered = DMatrix::from_fn(count, n, |i, j| samples[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / count as f64;
    let eig = SymmetricEigen::new(cov);
    Ok(eig.eigenvalues.min().max(0.0).sqrt())
}

pub fn sample_gaussian_mixture(params: &GaussianMixtureParams, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    params.validate()?;
    let latent = WeightedIndex::new(params.weights.iter().copied()).map_err(|e| invalid(format!("bad weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.dim();
    let mut out = DMatrix::zeros(n_samples, n);
    for i in 0..n_samples {
        let h = latent.sample(&mut rng);
        for j in 0..n {
            let g: f64 = StandardNormal.sample(&mut rng);
            out[(i, j)] = params.means[(j, h)] + params.sigma * g;
        }
    }
    Ok(out)
}

/// `C·(c_max + σ ℓ ln n)^ℓ·(ℓ ln n + ln(1/δ))/ε²`, the sample size at which
/// every entry of the empirical `ℓ`-th moment is within `ε` with
/// probability `1 − δ`. `constant` defaults to 1.
pub fn required_samples_gaussian(
    eps: f64,
    order: usize,
    n: usize,
    c_max: f64,
    sigma: f64,
    delta: f64,
    constant: Option<f64>,
) -> Result<u64> {
    if !(eps > 0.0) || !(sigma >= 0.0) || !(c_max >= 0.0) || order == 0 || n < 2 {
        return Err(invalid("need eps > 0, sigma ≥ 0, c_max ≥ 0, order ≥ 1, n ≥ 2"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("δ must lie in (0, 1)"));
    }
    let c = constant.unwrap_or(1.0);
    let l = order as f64;
    let ln_n = (n as f64).ln();
    let scale = (c_max + sigma * l * ln_n).powf(l);
    checked_count(c * scale * (l * ln_n + (1.0 / delta).ln()) / (eps * eps))
}

/// How `σ` is chosen by [`learn_gaussian_mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    Known(f64),
    Estimate,
    /// Try `lo, lo + step, …, ≤ hi` and keep the value whose `Mom_ℓ`
    /// decomposes with the smallest relative error.
    Grid { lo: f64, hi: f64, step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiagnostics {
    pub sigma: f64,
    /// Decomposition of `Mom_ℓ`; absent for `R = 1`.
    pub search: Option<SearchSummary>,
    /// Decomposition of `Mom_{ℓ−1}`; absent when it was fitted by least
    /// squares on the `Mom_ℓ` directions (`ℓ = 3`) or `R = 1`.
    pub lower_search: Option<SearchSummary>,
    /// `‖Mom_{ℓ−1} − fit‖_F / ‖Mom_{ℓ−1}‖_F`.
    pub lower_fit_residual: f64,
    pub raw_weight_sum: f64,
    /// Smallest sign-invariant distance between two recovered directions.
    pub min_direction_separation: f64,
    /// Even-order coefficients that came out nonpositive.
    pub nonpositive_even_coefficients: usize,
    /// `(σ, relative error)` for every grid value tried.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_grid: Vec<(f64, f64)>,
}

/// Unit directions and coefficients `c_r` with `T ≈ Σ c_r d_r^⊗ℓ`.
fn symmetrize(cp: &CpDecomposition<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = cp.shape()[0];
    let r = cp.rank();
    let mut dirs = DMatrix::zeros(n, r);
    let mut coef = vec![0.0; r];
    for k in 0..r {
        let cols: Vec<DVector<f64>> = cp.factors().iter().map(|f| f.column(k).into_owned()).collect();
        let first = cols[0].normalize();
        if !first.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("component {k} has a zero factor")));
        }
        let mut avg = DVector::zeros(n);
        for c in &cols {
            let u = c.normalize();
            avg += if u.dot(&first) < 0.0 { -u } else { u };
        }
        let mut d = avg.normalize();
        let big = d.iamax();
        if d[big] < 0.0 {
            d = -d;
        }
        coef[k] = cols.iter().map(|c| c.dot(&d)).product();
        dirs.set_column(k, &d);
    }
    Ok((dirs, coef))
}

fn default_rho(t: &DenseTensor<f64>) -> f64 {
    (1.5 * t.norm().powf(1.0 / t.order() as f64)).max(1e-3)
}

/// `Σ_r c_r u_r^⊗k`.
fn weighted_symmetric(u: &DMatrix<f64>, coef: &[f64], k: usize) -> Result<DenseTensor<f64>> {
    if k == 1 {
        return DenseTensor::new(vec![u.nrows()], (u * DVector::from_column_slice(coef)).as_slice().to_vec());
    }
    let mut f = crate::tensor::symmetric_cp(u, k)?.into_factors();
    for (mut c, &w) in f[k - 1].column_iter_mut().zip(coef) {
        c *= w;
    }
    CpDecomposition::new(f)?.expand()
}

fn sym_fit_residual(t: &DenseTensor<f64>, dirs: &DMatrix<f64>, coef: &[f64]) -> Result<f64> {
    let fit = weighted_symmetric(dirs, coef, t.order())?;
    let nrm = t.norm();
    Ok(if nrm > 0.0 { crate::tensor::frobenius_distance(t, &fit)? / nrm } else { 0.0 })
}

/// Parameters from exact or estimated `Mom_1..Mom_ℓ` (`moms[k − 1] = Mom_k`).
pub fn learn_gaussian_from_moments(
    moms: &[DenseTensor<f64>],
    rank: usize,
    sigma: f64,
    search: &SearchOptions,
) -> Result<(GaussianMixtureParams, GaussianDiagnostics)> {
    let l = moms.len();
    if rank == 0 || l == 0 {
        return Err(invalid("rank and order must be positive"));
    }
    let n = moms[0].shape()[0];
    let mut diag = GaussianDiagnostics {
        sigma,
        search: None,
        lower_search: None,
        lower_fit_residual: 0.0,
        raw_weight_sum: 1.0,
        min_direction_separation: f64::INFINITY,
        nonpositive_even_coefficients: 0,
        sigma_grid: Vec::new(),
    };
    if rank == 1 {
        let mean = DMatrix::from_column_slice(n, 1, moms[0].data());
        return Ok((GaussianMixtureParams { weights: DVector::from_element(1, 1.0), means: mean, sigma }, diag));
    }
    if l < 3 {
        return Err(invalid("recovering more than one component needs order at least 3"));
    }
    let top = &moms[l - 1];
    let lower = &moms[l - 2];
    let res = search.decompose(top, rank, default_rho(top))?;
    diag.search = Some(SearchSummary::of(&res, top));
    let (dirs, mut c_top) = symmetrize(&res.decomposition)?;

    for a in 0..rank {
        for b in a + 1..rank {
            let (x, y) = (dirs.column(a), dirs.column(b));
            let d = (x - y).norm_squared().min((x + y).norm_squared());
            diag.min_direction_separation = diag.min_direction_separation.min(d.sqrt());
        }
    }
    if diag.min_direction_separation < 1e-6 {
        return Err(Error::Numerical("two recovered mean directions coincide; alignment is ambiguous".into()));
    }

    let (lower_dirs, mut c_low) = if l - 1 == 2 {
        let k = DMatrix::from_fn(n * n, rank, |i, r| dirs[(i / n, r)] * dirs[(i % n, r)]);
        let rhs = DMatrix::from_column_slice(n * n, 1, lower.data());
        let beta = k
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
        (dirs.clone(), beta.column(0).iter().copied().collect::<Vec<_>>())
    } else {
        let low = search.decompose(lower, rank, default_rho(lower))?;
        diag.lower_search = Some(SearchSummary::of(&low, lower));
        let (d2, c2) = symmetrize(&low.decomposition)?;
        let al = align_symmetric(&dirs, &d2, 2)?;
        let mut od = DMatrix::zeros(n, rank);
        let mut oc = vec![0.0; rank];
        for (s, &q) in al.permutation.iter().enumerate() {
            let sign = f64::from(al.signs[s]);
            od.set_column(q, &(d2.column(s) * sign));
            oc[q] = c2[s] * sign.powi((l - 1) as i32);
        }
        (od, oc)
    };
    diag.lower_fit_residual = sym_fit_residual(lower, &lower_dirs, &c_low)?;

    let mut dirs = dirs;
    let mut lower_dirs = lower_dirs;
    // The odd-order coefficient fixes the sign of each direction.
    let top_odd = l % 2 == 1;
    for r in 0..rank {
        let odd = if top_odd { c_top[r] } else { c_low[r] };
        if odd < 0.0 {
            dirs.column_mut(r).neg_mut();
            lower_dirs.column_mut(r).neg_mut();
            if top_odd {
                c_top[r] = -c_top[r];
            } else {
                c_low[r] = -c_low[r];
            }
        }
        let even = if top_odd { &mut c_low[r] } else { &mut c_top[r] };
        if !(*even > 0.0) {
            diag.nonpositive_even_coefficients += 1;
            *even = even.abs();
        }
    }

    let mut weights = DVector::zeros(rank);
    let mut means = DMatrix::zeros(n, rank);
    for r in 0..rank {
        let u = dirs.column(r) * c_top[r].powf(1.0 / l as f64);
        let v = lower_dirs.column(r) * c_low[r].powf(1.0 / (l - 1) as f64);
        let w = recover_weight(&v, &u, l)?;
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::Numerical(format!("component {r} has weight {w}")));
        }
        weights[r] = w;
        means.set_column(r, &(u / w.powf(1.0 / l as f64)));
    }
    diag.raw_weight_sum = renormalize(&mut weights)?;
    Ok((GaussianMixtureParams { weights, means, sigma }, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLearnConfig {
    pub sigma: SigmaChoice,
    pub search: SearchOptions,
}

/// Estimate `Mom_1..Mom_ℓ` from samples and recover the mixture.
pub fn learn_gaussian_mixture(
    samples: &DMatrix<f64>,
    rank: usize,
    order: usize,
    cfg: &GaussianLearnConfig,
) -> Result<(GaussianMixtureParams, GaussianDiagnostics)> {
    let raw = empirical_raw_moments(samples, order)?;
    let mut grid = Vec::new();
    let sigma = match cfg.sigma {
        SigmaChoice::Known(s) => s,
        SigmaChoice::Estimate => estimate_sigma(samples)?,
        SigmaChoice::Grid { lo, hi, step } => {
            if !(step > 0.0) || !(lo > 0.0) || !(hi >= lo) {
                return Err(invalid("sigma grid needs 0 < lo ≤ hi and step > 0"));
            }
            let steps = ((hi - lo) / step + 1e-9).floor() as usize;
            let mut best = (f64::INFINITY, lo);
            for k in 0..=steps {
                let s = lo + k as f64 * step;
                let mom = mom_from_raw(&raw, s)?;
                let top = mom.last().expect("order ≥ 1");
                let res = cfg.search.decompose(top, rank, default_rho(top))?;
                let rel = SearchSummary::of(&res, top).relative_error;
                grid.push((s, rel));
                if rel < best.0 {
                    best = (rel, s);
                }
            }
            best.1
        }
    };
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid("sigma must be nonnegative"));
    }
    let moms = mom_from_raw(&raw, sigma)?;
    let (mut params, mut diag) = learn_gaussian_from_moments(&moms, rank, sigma, &cfg.search)?;
    if sigma == 0.0 {
        // Degenerate data; keep the parameters valid.
        params.sigma = f64::MIN_POSITIVE;
    }
    diag.sigma_grid = grid;
    Ok((params, diag))
}

/// Largest entrywise deviation between two tensor lists.
pub fn max_entry_error(a: &[DenseTensor<f64>], b: &[DenseTensor<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim("tensor lists differ in length"));
    }
    a.iter().zip(b).try_fold(0.0f64, |m, (x, y)| Ok(m.max(x.sub(y)?.max_abs())))
}

/// Whether `t` is unchanged by every transposition of adjacent modes.
pub fn is_exchangeable(t: &DenseTensor<f64>, tol: f64) -> bool {
    let l = t.order();
    let mut idx = vec![0; l];
    let shape = t.shape().to_vec();
    loop {
        let v = t.get(&idx);
        for a in 0..l.saturating_sub(1) {
            idx.swap(a, a + 1);
            let ok = (t.get(&idx) - v).abs() <= tol;
            idx.swap(a, a + 1);
            if !ok {
                return false;
            }
        }
        if !next_index(&mut idx, &shape) {
            return true;
        }
    }
}
