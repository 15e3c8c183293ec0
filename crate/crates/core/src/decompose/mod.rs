//! ρ-bounded rank-R approximation by ε-net search.
//!
//! The input is first compressed onto the top-R left singular subspace of
//! every unfolding. Because the subspaces are orthonormal,
//! `‖T − X‖² = ‖T‖² − ‖G‖² + ‖G − X_G‖²` for any `X` whose factor columns lie
//! in them, where `G` is the core tensor of `T` in subspace coordinates. The
//! search therefore runs over factor columns in the small core coordinates,
//! drawn from a grid ε-net of each ball of radius `ρ_j`.
//!
//! Enumerating every tuple of net points is exponential in `R²` and only
//! feasible for tiny nets, so three strategies are offered:
//!
//! * [`SearchStrategy::Exhaustive`] scans all tuples in lexicographic order.
//! * [`SearchStrategy::CoarseToFine`] scans a coarser net exhaustively, then
//!   refines its best tuples on the requested net by coordinate descent.
//! * [`SearchStrategy::MultiStart`] runs the same descent from seeded random
//!   net tuples.
//!
//! Descent moves one column at a time to the net point minimizing the
//! objective with all other columns fixed, and accepts only strict
//! decreases. Every objective evaluation counts against the budget.

mod net;
mod search;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::spectral::{top_r_subspace, SubspaceProjector};
use crate::tensor::{frobenius_distance, CpDecomposition, DenseTensor};
use crate::Scalar;

pub use net::{build_eps_net, build_eps_net_with_budget, EpsNet, DEFAULT_NET_BUDGET};

/// Per-mode column-norm bounds; a single entry applies to every mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSpec<S> {
    pub rho: Vec<S>,
}

impl<S: Scalar> BoundsSpec<S> {
    pub fn new(rho: Vec<S>) -> Result<Self> {
        if rho.is_empty() || rho.iter().any(|r| !(*r > S::zero()) || !r.is_finite()) {
            return Err(invalid("column bounds must be positive and finite"));
        }
        Ok(Self { rho })
    }

    pub fn uniform(rho: S) -> Result<Self> {
        Self::new(vec![rho])
    }

    /// Bounds expanded to `order` modes.
    pub fn per_mode(&self, order: usize) -> Result<Vec<S>> {
        match self.rho.len() {
            1 => Ok(vec![self.rho[0]; order]),
            n if n == order => Ok(self.rho.clone()),
            n => Err(invalid(format!("{n} column bounds for an order-{order} tensor"))),
        }
    }

    pub fn max(&self) -> S {
        self.rho.iter().fold(S::zero(), |a, &b| a.max(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    /// Exhaustive when the net is small enough, otherwise coarse-to-fine,
    /// otherwise multi-start.
    #[default]
    Auto,
    Exhaustive,
    CoarseToFine,
    MultiStart,
}

impl std::str::FromStr for SearchStrategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "exhaustive" => Ok(Self::Exhaustive),
            "coarse_to_fine" | "coarse-to-fine" => Ok(Self::CoarseToFine),
            "multi_start" | "multi-start" => Ok(Self::MultiStart),
            _ => Err(invalid(format!("unknown search strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct NetSearchConfig<S: Scalar> {
    pub rank: usize,
    pub rho: BoundsSpec<S>,
    pub target_eps: S,
    /// Net resolution; `None` uses `target_eps / (6 R ρ²)`.
    pub net_resolution: Option<S>,
    pub seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub parallelism: Option<usize>,
    /// Maximum number of objective evaluations.
    pub budget: u64,
    pub strategy: SearchStrategy,
    /// Opt-in heuristic: after each descent sweep, solve the last mode by
    /// least squares, clamp to ρ and snap to the net. Not part of the net
    /// search proper.
    pub least_squares_last_mode: bool,
    /// Evaluation cap for the coarse exhaustive stage.
    pub coarse_budget: u64,
    /// Coarse tuples kept for refinement.
    pub refine_top: usize,
    /// Random starts for the multi-start strategy.
    pub starts: usize,
    /// Sweep cap for one descent run.
    pub max_sweeps: usize,
}

impl<S: Scalar> NetSearchConfig<S> {
    pub fn new(rank: usize, rho: S, target_eps: S) -> Result<Self> {
        if !(target_eps > S::zero()) {
            return Err(invalid("target_eps must be positive"));
        }
        Ok(Self {
            rank,
            rho: BoundsSpec::uniform(rho)?,
            target_eps,
            net_resolution: None,
            seed: 0,
            parallelism: None,
            budget: 200_000_000,
            strategy: SearchStrategy::Auto,
            least_squares_last_mode: false,
            coarse_budget: 8_000_000,
            refine_top: 8,
            starts: 16,
            max_sweeps: 1_000_000,
        })
    }

    /// `target_eps / (6 R ρ²)` with ρ the largest bound.
    pub fn theoretical_resolution(&self) -> S {
        let rho = self.rho.max();
        self.target_eps / (S::of(6.0 * self.rank.max(1) as f64) * rho * rho)
    }

    pub fn resolution(&self) -> S {
        self.net_resolution.unwrap_or_else(|| self.theoretical_resolution())
    }

    fn validate(&self) -> Result<()> {
        if !(self.target_eps > S::zero()) {
            return Err(invalid("target_eps must be positive"));
        }
        if let Some(r) = self.net_resolution {
            if !(r > S::zero()) || !r.is_finite() {
                return Err(invalid("net_resolution must be positive"));
            }
        }
        if self.budget == 0 {
            return Err(invalid("budget must be positive"));
        }
        if self.parallelism == Some(0) {
            return Err(invalid("parallelism must be positive"));
        }
        BoundsSpec::new(self.rho.rho.clone())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct ApproximationResult<S: Scalar> {
    #[serde(rename = "cp")]
    pub decomposition: CpDecomposition<S>,
    pub achieved_error: S,
    pub candidates_evaluated: u64,
    pub subspace_residuals: Vec<S>,
    /// `(2ℓ − 1)·target_eps`.
    pub guarantee_bound: S,
    pub net_resolution: S,
    pub theoretical_resolution_met: bool,
    pub strategy: SearchStrategy,
    /// Whether every net tuple was evaluated.
    pub exhaustive: bool,
    /// Budget ran out before the search finished.
    pub partial: bool,
}

/// Top-R subspace of one unfolding with its residual `‖M_j − Π_j M_j‖_F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct ModeSubspace<S: Scalar> {
    pub projector: SubspaceProjector<S>,
    pub residual: S,
}

fn subspace_dim(t_shape: &[usize], mode: usize, r: usize) -> usize {
    let rows = t_shape[mode];
    let cols: usize = t_shape.iter().enumerate().filter(|(k, _)| *k != mode).map(|(_, n)| n).product();
    r.min(rows).min(cols)
}

/// Per-mode top-`r` subspaces of the unfoldings of `t`.
pub fn compute_mode_subspaces<S: Scalar>(t: &DenseTensor<S>, r: usize) -> Result<Vec<ModeSubspace<S>>> {
    (0..t.order())
        .map(|j| {
            let m = t.unfold(j)?;
            let projector = top_r_subspace(&m, r)?;
            let residual = projector.residual(&m);
            Ok(ModeSubspace { projector, residual })
        })
        .collect()
}

/// Like [`compute_mode_subspaces`] but caps the dimension at what each
/// unfolding supports.
pub(crate) fn capped_mode_subspaces<S: Scalar>(t: &DenseTensor<S>, r: usize) -> Result<Vec<ModeSubspace<S>>> {
    (0..t.order())
        .map(|j| {
            let m = t.unfold(j)?;
            let projector = top_r_subspace(&m, subspace_dim(t.shape(), j, r))?;
            let residual = projector.residual(&m);
            Ok(ModeSubspace { projector, residual })
        })
        .collect()
}

/// Distance from `t` to the expansion of `cp` after projecting every factor
/// column into the top-R subspaces of `t` (R = `cp.rank()`).
pub fn project_candidate_guarantee_check<S: Scalar>(t: &DenseTensor<S>, cp: &CpDecomposition<S>) -> Result<S> {
    if cp.shape() != t.shape() {
        return Err(crate::error::dim(format!(
            "decomposition shape {:?} against tensor shape {:?}",
            cp.shape(),
            t.shape()
        )));
    }
    let subspaces = capped_mode_subspaces(t, cp.rank().max(1))?;
    project_into_subspaces(t, cp, &subspaces)
}

/// Distance from `t` to `cp` with factor `j` replaced by `Π_j U^(j)`.
pub fn project_into_subspaces<S: Scalar>(
    t: &DenseTensor<S>,
    cp: &CpDecomposition<S>,
    subspaces: &[ModeSubspace<S>],
) -> Result<S> {
    if subspaces.len() != cp.order() {
        return Err(crate::error::dim("one subspace per mode expected"));
    }
    let factors: Vec<DMatrix<S>> = cp
        .factors()
        .iter()
        .zip(subspaces)
        .map(|(f, s)| s.projector.project_matrix(f))
        .collect();
    frobenius_distance(t, &CpDecomposition::new(factors)?.expand()?)
}

/// Order-3 entry point; identical to [`bounded_low_rank_general`] at ℓ = 3.
pub fn bounded_low_rank_3<S: Scalar>(t: &DenseTensor<S>, cfg: &NetSearchConfig<S>) -> Result<ApproximationResult<S>> {
    if t.order() != 3 {
        return Err(invalid(format!("expected an order-3 tensor, got order {}", t.order())));
    }
    bounded_low_rank_general(t, cfg)
}

/// Best ρ-bounded rank-R approximation found by net search.
///
/// The guarantee recorded in the result is `(2ℓ − 1)·target_eps`, which is
/// `5·target_eps` at ℓ = 3. It applies when the input admits a ρ-bounded
/// rank-R decomposition within `target_eps` and the resolution is at most
/// the theoretical one; the search itself never checks that promise.
pub fn bounded_low_rank_general<S: Scalar>(
    t: &DenseTensor<S>,
    cfg: &NetSearchConfig<S>,
) -> Result<ApproximationResult<S>> {
    cfg.validate()?;
    if t.order() < 2 {
        return Err(invalid("approximation needs a tensor of order at least 2"));
    }
    if t.data().iter().any(|x| !x.is_finite()) {
        return Err(crate::Error::NonFinite("input tensor"));
    }
    match cfg.parallelism {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| invalid(e.to_string()))?
            .install(|| search::run(t, cfg)),
        None => search::run(t, cfg),
    }
}
