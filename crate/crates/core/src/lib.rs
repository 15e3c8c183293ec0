//! Robust CP tensor decomposition.
//!
//! Dense tensor algebra, singular-value tools and robust Kruskal rank
//! certification, ρ-bounded low-rank approximation by net search,
//! alignment of decompositions up to permutation and scaling, and
//! method-of-moments learners for multi-view mixtures, topic models,
//! hidden Markov models and spherical Gaussian mixtures.
//!
//! The numerical core (`tensor`, `spectral`, `decompose`, `matching`) is
//! generic over [`Scalar`]; the model learners work in `f64`.

pub mod assignment;
pub mod decompose;
pub mod error;
pub mod matching;
pub mod models;
pub mod serde_rows;
pub mod spectral;
pub mod tensor;

use nalgebra as na;
use num_traits as nt;

pub use error::{Error, Result};

/// Real scalar usable throughout the numerical core.
pub trait Scalar:
    na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    /// Lossy conversion to `f64`.
    #[inline]
    fn f64(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Matrix<S = f64> = na::DMatrix<S>;
pub type Vector<S = f64> = na::DVector<S>;

pub type Tensor = tensor::DenseTensor<f64>;
pub type Cp = tensor::CpDecomposition<f64>;
pub type Certificate = spectral::KrankCertificate<f64>;
pub type Projector = spectral::SubspaceProjector<f64>;
pub type SearchConfig = decompose::NetSearchConfig<f64>;
pub type Approximation = decompose::ApproximationResult<f64>;
pub type Alignment = matching::AlignmentResult<f64>;

pub use decompose::{
    bounded_low_rank_3, bounded_low_rank_general, build_eps_net, compute_mode_subspaces,
    project_candidate_guarantee_check, ApproximationResult, BoundsSpec, EpsNet, NetSearchConfig,
    SearchStrategy,
};
pub use matching::{
    align, align_symmetric, necessary_condition_check, recover_weight, sign_fix,
    split_rank_one, AlignmentResult,
};
pub use spectral::{
    check_kruskal_condition, find_separating_vector, nz_count, robust_krank, svd,
    top_r_subspace, KrankCertificate, KruskalReport, SubspaceProjector,
};
pub use tensor::{expand, frobenius_distance, khatri_rao, symmetric_cp, CpDecomposition, DenseTensor};
