//! Multi-view mixtures and single-topic models.
//!
//! A latent `h ∈ [R]` is drawn with probability `w_h`; given `h`, the `ℓ`
//! views are independent with `E[x^(j) | h = r] = M^(j)_r`. Indicator samples
//! store the drawn category of each view.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_probability_vector, is_column_stochastic, renormalize, SearchOptions, SearchSummary};
use crate::error::{dim, invalid, Error, Result};
use crate::matching::sign_fix;
use crate::tensor::{checked_len, CpDecomposition, DenseTensor};

/// Default constant in [`required_samples_multiview`].
pub const DEFAULT_SAMPLE_CONSTANT: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiViewParams {
    #[serde(with = "crate::serde_rows::vec")]
    pub weights: DVector<f64>,
    /// One `n_j x R` matrix per view.
    #[serde(with = "crate::serde_rows::mats")]
    pub means: Vec<DMatrix<f64>>,
}

impl MultiViewParams {
    pub fn new(weights: DVector<f64>, means: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = Self { weights, means };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability_vector(&self.weights, "weights")?;
        if self.means.len() < 2 {
            return Err(invalid("a multi-view model needs at least two views"));
        }
        let r = self.weights.len();
        for (j, m) in self.means.iter().enumerate() {
            if m.ncols() != r || m.nrows() == 0 {
                return Err(dim(format!("view {j} means are {}x{}, expected n x {r}", m.nrows(), m.ncols())));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("multi-view means"));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn order(&self) -> usize {
        self.means.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.means.iter().map(|m| m.nrows()).collect()
    }

    /// Every mean column is a probability vector (indicator mode).
    pub fn is_indicator(&self) -> bool {
        self.means.iter().all(|m| is_column_stochastic(m, 1e-9))
    }

    /// Largest absolute mean entry, the `c_max` of the sample-size bound.
    pub fn c_max(&self) -> f64 {
        self.means.iter().flat_map(|m| m.iter()).fold(0.0, |a, &x| a.max(x.abs()))
    }

    /// `[M^(1), …, M^(ℓ−1), M^(ℓ) diag(w)]`.
    pub fn as_cp(&self) -> Result<CpDecomposition<f64>> {
        let mut f = self.means.clone();
        let last = f.last_mut().expect("validated");
        for (mut c, &w) in last.column_iter_mut().zip(self.weights.iter()) {
            c *= w;
        }
        CpDecomposition::new(f)
    }

    /// The population tensor `E[x^(1) ⊗ … ⊗ x^(ℓ)]`.
    pub fn population_moment(&self) -> Result<DenseTensor<f64>> {
        self.as_cp()?.expand()
    }
}

/// A single-topic model: every view shares the topic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicParams {
    #[serde(with = "crate::serde_rows::vec")]
    pub weights: DVector<f64>,
    /// `n x R`, probability-vector columns.
    #[serde(with = "crate::serde_rows")]
    pub topics: DMatrix<f64>,
    /// Words observed per document.
    pub order: usize,
}

impl TopicParams {
    pub fn new(weights: DVector<f64>, topics: DMatrix<f64>, order: usize) -> Result<Self> {
        let p = Self { weights, topics, order };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_multiview()?;
        if !is_column_stochastic(&self.topics, 1e-9) {
            return Err(invalid("topic columns must be probability vectors"));
        }
        Ok(())
    }

    pub fn to_multiview(&self) -> Result<MultiViewParams> {
        MultiViewParams::new(self.weights.clone(), vec![self.topics.clone(); self.order])
    }
}

/// Indicator samples: `data[i·ℓ + j]` is the category of view `j` in sample `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiViewSamples {
    dims: Vec<usize>,
    data: Vec<usize>,
}

impl MultiViewSamples {
    pub fn new(dims: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(invalid("view dimensions must be positive"));
        }
        if data.len() % dims.len() != 0 {
            return Err(dim(format!("{} entries do not split into {} views", data.len(), dims.len())));
        }
        for row in data.chunks(dims.len()) {
            if let Some(j) = (0..dims.len()).find(|&j| row[j] >= dims[j]) {
                return Err(invalid(format!("category {} out of range for view {j} of size {}", row[j], dims[j])));
            }
        }
        Ok(Self { dims, data })
    }

    pub fn from_rows(dims: Vec<usize>, rows: &[Vec<usize>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dims.len()) {
            return Err(dim("sample rows must have one entry per view"));
        }
        Self::new(dims, rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn views(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let l = self.dims.len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.data.chunks(self.dims.len())
    }

    /// Keep the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { dims: self.dims.clone(), data: self.data[..n * self.dims.len()].to_vec() }
    }
}

fn categorical(weights: impl Iterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights.map(|x| x.max(0.0))).map_err(|e| invalid(format!("bad categorical distribution: {e}")))
}

/// Draw indicator samples; requires probability-vector mean columns.
pub fn sample_multiview(params: &MultiViewParams, n_samples: usize, seed: u64) -> Result<MultiViewSamples> {
    params.validate()?;
    if !params.is_indicator() {
        return Err(invalid("sampling needs probability-vector mean columns"));
    }
    let latent = categorical(params.weights.iter().copied())?;
    let views: Vec<Vec<WeightedIndex<f64>>> = params
        .means
        .iter()
        .map(|m| m.column_iter().map(|c| categorical(c.iter().copied())).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let l = params.order();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_samples * l);
    for _ in 0..n_samples {
        let h = latent.sample(&mut rng);
        for v in &views {
            data.push(v[h].sample(&mut rng));
        }
    }
    MultiViewSamples::new(params.dims(), data)
}

pub fn sample_topic(params: &TopicParams, n_samples: usize, seed: u64) -> Result<MultiViewSamples> {
    sample_multiview(&params.to_multiview()?, n_samples, seed)
}

/// Empirical `E[x^(1) ⊗ … ⊗ x^(ℓ)]` over the first `order` views. Counts
/// are integers, so the result does not depend on summation order.
pub fn estimate_moment_tensor(samples: &MultiViewSamples, order: usize) -> Result<DenseTensor<f64>> {
    if samples.is_empty() {
        return Err(invalid("empty sample set"));
    }
    if order == 0 || order > samples.views() {
        return Err(invalid(format!("order {order} needs between 1 and {} views", samples.views())));
    }
    let shape = samples.dims()[..order].to_vec();
    let len = checked_len(&shape)?;
    let mut counts = vec![0u64; len];
    for row in samples.rows() {
        let off = row[..order].iter().zip(&shape).fold(0usize, |acc, (&x, &n)| acc * n + x);
        counts[off] += 1;
    }
    let n = samples.len() as f64;
    DenseTensor::new(shape, counts.into_iter().map(|c| c as f64 / n).collect())
}

/// `C·(c_max·n)^ℓ·√(ℓ ln n)/ε²`, or with `√(ℓ ln n + ln(1/δ))` when a
/// failure probability `δ` is given. Conservative; `constant` defaults to 8.
pub fn required_samples_multiview(
    eps: f64,
    order: usize,
    n: usize,
    c_max: f64,
    confidence: Option<f64>,
    constant: Option<f64>,
) -> Result<u64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps must be positive"));
    }
    if order == 0 || n < 2 {
        return Err(invalid("need order ≥ 1 and n ≥ 2"));
    }
    if !(c_max > 0.0) || !c_max.is_finite() {
        return Err(invalid("c_max must be positive"));
    }
    let c = constant.unwrap_or(DEFAULT_SAMPLE_CONSTANT);
    if !(c > 0.0) {
        return Err(invalid("constant must be positive"));
    }
    let nf = n as f64;
    let mut inner = order as f64 * nf.ln();
    if let Some(delta) = confidence {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid("confidence δ must lie in (0, 1)"));
        }
        inner += (1.0 / delta).ln();
    }
    let base = (c_max * nf).powi(i32::try_from(order).map_err(|_| invalid("order too large"))?);
    checked_count(c * base * inner.sqrt() / (eps * eps))
}

pub(crate) fn checked_count(x: f64) -> Result<u64> {
    if !x.is_finite() || x >= u64::MAX as f64 {
        return Err(Error::InvalidArgument(format!("sample size {x:e} overflows")));
    }
    Ok(x.ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewDiagnostics {
    pub search: SearchSummary,
    /// `Σ_r ‖ṽ^(ℓ)_r‖₁` before the weights are renormalized.
    pub raw_weight_sum: f64,
    /// Number of factor columns negated by the sign fix.
    pub sign_flips: usize,
}

/// Recovered mixture after sign fixing and ℓ1 normalization.
pub(crate) struct Normalized {
    pub weights: DVector<f64>,
    pub means: Vec<DMatrix<f64>>,
    pub raw_weight_sum: f64,
    pub sign_flips: usize,
}

/// Make column sums nonnegative, scale modes `< ℓ` to unit column sums,
/// push the scale into the last mode and read weights off its ℓ1 norms.
pub(crate) fn normalize_factors(cp: &CpDecomposition<f64>) -> Result<Normalized> {
    let colsums = |m: &DMatrix<f64>| DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()));
    let sums: Vec<DVector<f64>> = cp.factors().iter().map(colsums).collect();
    let fix = sign_fix(&sums)?;
    let sign_flips = fix.flips.iter().flatten().filter(|&&b| b).count();
    let cp = fix.apply(cp)?;
    let l = cp.order();
    let r = cp.rank();
    let mut push = DVector::from_element(r, 1.0);
    let mut means = Vec::with_capacity(l);
    for f in &cp.factors()[..l - 1] {
        let mut m = f.clone();
        for (k, mut c) in m.column_iter_mut().enumerate() {
            let s = c.sum();
            if !(s > 0.0) {
                return Err(Error::Numerical(format!("factor column {k} sums to {s}")));
            }
            c /= s;
            push[k] *= s;
        }
        means.push(m);
    }
    let mut last = cp.factor(l - 1).clone();
    let mut weights = DVector::zeros(r);
    for (k, mut c) in last.column_iter_mut().enumerate() {
        c *= push[k];
        weights[k] = c.lp_norm(1);
        if !(weights[k] > 0.0) {
            return Err(Error::Numerical(format!("component {k} has zero weight")));
        }
        c /= weights[k];
    }
    means.push(last);
    let raw_weight_sum = renormalize(&mut weights)?;
    Ok(Normalized { weights, means, raw_weight_sum, sign_flips })
}

/// Decompose a moment tensor and normalize the factors into parameters.
pub fn learn_multiview_from_tensor(
    t: &DenseTensor<f64>,
    rank: usize,
    search: &SearchOptions,
) -> Result<(MultiViewParams, MultiViewDiagnostics)> {
    if rank == 0 {
        return Err(invalid("rank must be positive"));
    }
    if t.order() < 2 {
        return Err(invalid("moment tensor needs order at least 2"));
    }
    let res = search.decompose(t, rank, 1.0)?;
    let norm = normalize_factors(&res.decomposition)?;
    let params = MultiViewParams { weights: norm.weights, means: norm.means };
    let diag = MultiViewDiagnostics {
        search: SearchSummary::of(&res, t),
        raw_weight_sum: norm.raw_weight_sum,
        sign_flips: norm.sign_flips,
    };
    Ok((params, diag))
}

pub fn learn_multiview(
    samples: &MultiViewSamples,
    rank: usize,
    order: usize,
    search: &SearchOptions,
) -> Result<(MultiViewParams, MultiViewDiagnostics)> {
    learn_multiview_from_tensor(&estimate_moment_tensor(samples, order)?, rank, search)
}

/// Learn a topic model; the per-view estimates are averaged into one topic
/// matrix.
pub fn learn_topic(
    samples: &MultiViewSamples,
    rank: usize,
    order: usize,
    search: &SearchOptions,
) -> Result<(TopicParams, MultiViewDiagnostics)> {
    if samples.dims()[..order.min(samples.views())].windows(2).any(|w| w[0] != w[1]) {
        return Err(dim("topic views must share one vocabulary"));
    }
    let (mv, diag) = learn_multiview(samples, rank, order, search)?;
    let topics = mv.means.iter().fold(DMatrix::zeros(mv.means[0].nrows(), rank), |a, m| a + m) / order as f64;
    Ok((TopicParams { weights: mv.weights, topics, order }, diag))
}
