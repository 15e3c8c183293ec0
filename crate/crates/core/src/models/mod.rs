//! Latent-variable learners built on moment tensors.
//!
//! Every learner estimates a moment tensor, decomposes it with the bounded
//! net search in [`crate::decompose`], and post-processes the factors into
//! model parameters. Model code works in `f64`.

pub mod gaussian;
pub mod hmm;
pub mod io;
pub mod multiview;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::decompose::{bounded_low_rank_general, ApproximationResult, NetSearchConfig, SearchStrategy};
use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

pub use gaussian::{
    estimate_sigma, gaussian_noise_tensor, gaussian_univariate_moment, learn_gaussian_from_moments,
    learn_gaussian_mixture, mom_tensor, GaussianMixtureParams,
};
pub use hmm::{hmm_embed, learn_hmm, reverse_transition, HmmParams};
pub use multiview::{
    estimate_moment_tensor, learn_multiview, learn_topic, required_samples_multiview, sample_multiview,
    MultiViewParams, MultiViewSamples,
};

/// Parameters of any supported model, tagged by `"kind"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Multiview(MultiViewParams),
    Topic(multiview::TopicParams),
    Hmm(HmmParams),
    Gaussian(GaussianMixtureParams),
}

impl ModelParams {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Multiview(_) => "multiview",
            Self::Topic(_) => "topic",
            Self::Hmm(_) => "hmm",
            Self::Gaussian(_) => "gaussian",
        }
    }
}

/// Decomposition settings shared by the learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    /// Column bound; `None` picks a model-specific default.
    pub rho: Option<f64>,
    pub target_eps: f64,
    pub net_resolution: Option<f64>,
    pub seed: u64,
    pub budget: u64,
    pub strategy: SearchStrategy,
    pub starts: usize,
    pub max_sweeps: usize,
    pub least_squares_last_mode: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        let base = NetSearchConfig::<f64>::new(1, 1.0, 1.0).expect("valid defaults");
        Self {
            rho: None,
            target_eps: 1e-9,
            net_resolution: None,
            seed: 0,
            budget: base.budget,
            strategy: base.strategy,
            starts: base.starts,
            max_sweeps: base.max_sweeps,
            least_squares_last_mode: false,
        }
    }
}

impl SearchOptions {
    pub fn config(&self, rank: usize, default_rho: f64) -> Result<NetSearchConfig<f64>> {
        let mut cfg = NetSearchConfig::new(rank, self.rho.unwrap_or(default_rho), self.target_eps)?;
        cfg.net_resolution = self.net_resolution;
        cfg.seed = self.seed;
        cfg.budget = self.budget;
        cfg.strategy = self.strategy;
        cfg.starts = self.starts;
        cfg.max_sweeps = self.max_sweeps;
        cfg.least_squares_last_mode = self.least_squares_last_mode;
        Ok(cfg)
    }

    pub(crate) fn decompose(&self, t: &DenseTensor<f64>, rank: usize, default_rho: f64) -> Result<ApproximationResult<f64>> {
        bounded_low_rank_general(t, &self.config(rank, default_rho)?)
    }
}

/// Summary of the decomposition step inside a learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub achieved_error: f64,
    pub relative_error: f64,
    pub candidates_evaluated: u64,
    pub strategy: SearchStrategy,
    pub partial: bool,
}

impl SearchSummary {
    pub(crate) fn of(res: &ApproximationResult<f64>, t: &DenseTensor<f64>) -> Self {
        let norm = t.norm();
        Self {
            achieved_error: res.achieved_error,
            relative_error: if norm > 0.0 { res.achieved_error / norm } else { 0.0 },
            candidates_evaluated: res.candidates_evaluated,
            strategy: res.strategy,
            partial: res.partial,
        }
    }
}

/// Distance between estimated and true parameters after the best column
/// relabeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    /// `permutation[s]` is the true component matched to estimated component `s`.
    pub permutation: Vec<usize>,
    /// `‖M^(j) − M̃^(j)‖_F` per parameter matrix after relabeling.
    pub matrices: Vec<f64>,
    /// `‖w − w̃‖_2` after relabeling.
    pub weights: f64,
    /// Largest of the above.
    pub max: f64,
}

/// Relabel `est` to best match `truth` (Hungarian method on summed squared
/// column distances) and measure the remaining error.
pub fn parameter_error(
    truth: &[DMatrix<f64>],
    truth_w: &DVector<f64>,
    est: &[DMatrix<f64>],
    est_w: &DVector<f64>,
) -> Result<ParamError> {
    let r = truth_w.len();
    if est_w.len() != r || truth.len() != est.len() || truth.iter().zip(est).any(|(a, b)| a.shape() != b.shape()) {
        return Err(invalid("estimated and true parameters have different shapes"));
    }
    let cost = DMatrix::from_fn(r, r, |s, q| {
        truth.iter().zip(est).map(|(a, b)| (b.column(s) - a.column(q)).norm_squared()).sum::<f64>()
            + (est_w[s] - truth_w[q]).powi(2)
    });
    let permutation = min_cost_assignment(&cost)?;
    let matrices: Vec<f64> = truth
        .iter()
        .zip(est)
        .map(|(a, b)| (b - a.select_columns(&permutation)).norm())
        .collect();
    let tw = DVector::from_iterator(r, permutation.iter().map(|&q| truth_w[q]));
    let weights = (est_w - tw).norm();
    let max = matrices.iter().copied().fold(weights, f64::max);
    Ok(ParamError { permutation, matrices, weights, max })
}

/// Scale to unit sum; returns the original sum.
pub(crate) fn renormalize(w: &mut DVector<f64>) -> Result<f64> {
    let s = w.sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(crate::Error::Numerical(format!("weights sum to {s}")));
    }
    *w /= s;
    Ok(s)
}

pub(crate) fn check_probability_vector(w: &DVector<f64>, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(invalid(format!("{what} must have positive finite entries")));
    }
    if (w.sum() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("{what} sums to {}, not 1", w.sum())));
    }
    Ok(())
}

pub(crate) fn is_column_stochastic(m: &DMatrix<f64>, tol: f64) -> bool {
    m.iter().all(|&x| x >= -tol) && m.column_iter().all(|c| (c.sum() - 1.0).abs() <= tol)
}

/// Deterministic seed for replication `k` of a run seeded with `base`.
pub fn replication_seed(base: u64, k: u64) -> u64 {
    // SplitMix64 step
    let mut z = base.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
