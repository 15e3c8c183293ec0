//! Alignment of CP decompositions up to permutation and column scaling,
//! plus rank-one splitting, weight recovery, sign fixing and the
//! Khatri-Rao non-uniqueness diagnostic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::error::{dim, invalid, Error, Result};
use crate::spectral::svd;
use crate::tensor::{khatri_rao, CpDecomposition};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar + Serialize", deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct AlignmentResult<S: Scalar> {
    /// `permutation[s]` is the reference column matched to candidate column `s`.
    pub permutation: Vec<usize>,
    /// `scalings[j][s]`: least-squares coefficient of candidate column `s` on
    /// its matched reference column in mode `j`.
    #[serde(with = "crate::serde_rows::vecs")]
    pub scalings: Vec<DVector<S>>,
    /// `‖Π_j Λ^(j) − I‖_F`.
    pub scaling_product_deviation: S,
    /// `‖V^(j) − U^(j) Π Λ^(j)‖_F`.
    pub per_mode_residuals: Vec<S>,
    /// `(mode, column)` pairs, in candidate numbering, where the candidate
    /// column or its matched reference column is zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_columns: Vec<(usize, usize)>,
}

impl<S: Scalar> AlignmentResult<S> {
    pub fn max_residual(&self) -> S {
        self.per_mode_residuals.iter().fold(S::zero(), |a, &b| a.max(b))
    }
}

/// `min(‖x − y‖², ‖x + y‖²)` for unit vectors; 2 if either is missing.
fn chordal<S: Scalar>(x: Option<&DVector<S>>, y: Option<&DVector<S>>) -> S {
    match (x, y) {
        (Some(x), Some(y)) => (x - y).norm_squared().min((x + y).norm_squared()),
        _ => S::of(2.0),
    }
}

fn normalized_columns<S: Scalar>(m: &DMatrix<S>) -> Vec<Option<DVector<S>>> {
    m.column_iter()
        .map(|c| {
            let n = c.norm();
            (n > S::zero()).then(|| c.into_owned() / n)
        })
        .collect()
}

/// Match candidate columns to reference columns (Hungarian method on summed
/// sign-invariant chordal distances of normalized columns) and fit per-mode
/// least-squares scalings. Optimal for that matching objective, not jointly
/// over permutation and scalings.
pub fn align<S: Scalar>(reference: &CpDecomposition<S>, candidate: &CpDecomposition<S>) -> Result<AlignmentResult<S>> {
    if reference.rank() != candidate.rank() {
        return Err(dim(format!("ranks {} and {} differ", reference.rank(), candidate.rank())));
    }
    if reference.shape() != candidate.shape() {
        return Err(dim(format!("shapes {:?} and {:?} differ", reference.shape(), candidate.shape())));
    }
    let r = reference.rank();
    let l = reference.order();
    let uref: Vec<_> = reference.factors().iter().map(normalized_columns).collect();
    let ucand: Vec<_> = candidate.factors().iter().map(normalized_columns).collect();
    let cost = DMatrix::from_fn(r, r, |s, q| {
        (0..l).fold(S::zero(), |acc, j| acc + chordal(ucand[j][s].as_ref(), uref[j][q].as_ref()))
    });
    let permutation = min_cost_assignment(&cost)?;

    let mut zero_columns = Vec::new();
    let mut scalings = Vec::with_capacity(l);
    let mut per_mode_residuals = Vec::with_capacity(l);
    for j in 0..l {
        let u = reference.factor(j);
        let v = candidate.factor(j);
        let mut lam = DVector::zeros(r);
        let mut resid = S::zero();
        for (s, &q) in permutation.iter().enumerate() {
            let uq = u.column(q);
            let vs = v.column(s);
            let nn = uq.norm_squared();
            if nn > S::zero() {
                lam[s] = vs.dot(&uq) / nn;
            }
            if nn == S::zero() || vs.norm_squared() == S::zero() {
                zero_columns.push((j, s));
            }
            resid += (vs - uq * lam[s]).norm_squared();
        }
        scalings.push(lam);
        per_mode_residuals.push(resid.sqrt());
    }
    let dev = (0..r).fold(S::zero(), |acc, s| {
        let p = scalings.iter().fold(S::one(), |p, lam| p * lam[s]);
        acc + (p - S::one()) * (p - S::one())
    });
    zero_columns.sort_unstable();
    zero_columns.dedup();
    Ok(AlignmentResult {
        permutation,
        scalings,
        scaling_product_deviation: dev.sqrt(),
        per_mode_residuals,
        zero_columns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricAlignment<S> {
    pub permutation: Vec<usize>,
    /// Column signs applied to the reference; all `+1` for odd order.
    pub signs: Vec<i8>,
    /// `‖V − U Π D‖_F` with `D = diag(signs)`.
    pub residual: S,
}

/// Permutation-only alignment of symmetric factors. For even order a column
/// and its negation give the same tensor, so signs are matched as well.
pub fn align_symmetric<S: Scalar>(u: &DMatrix<S>, v: &DMatrix<S>, order: usize) -> Result<SymmetricAlignment<S>> {
    if u.shape() != v.shape() {
        return Err(dim(format!("shapes {:?} and {:?} differ", u.shape(), v.shape())));
    }
    if order < 2 {
        return Err(invalid("symmetric alignment needs order at least 2"));
    }
    let even = order % 2 == 0;
    let r = u.ncols();
    let dist = |s: usize, q: usize| -> (S, i8) {
        let plus = (v.column(s) - u.column(q)).norm_squared();
        let minus = (v.column(s) + u.column(q)).norm_squared();
        if even && minus < plus {
            (minus, -1)
        } else {
            (plus, 1)
        }
    };
    let cost = DMatrix::from_fn(r, r, |s, q| dist(s, q).0);
    let permutation = min_cost_assignment(&cost)?;
    let signs: Vec<i8> = permutation.iter().enumerate().map(|(s, &q)| dist(s, q).1).collect();
    let residual = permutation
        .iter()
        .enumerate()
        .fold(S::zero(), |acc, (s, &q)| acc + dist(s, q).0)
        .sqrt();
    Ok(SymmetricAlignment { permutation, signs, residual })
}

#[derive(Debug, Clone)]
pub struct RankOneSplit<S: Scalar> {
    pub u: DVector<S>,
    pub v: DVector<S>,
    /// `sqrt(Σ_{i≥2} σ_i²)` of the reshaped matrix.
    pub residual: S,
}

/// Reshape `w` row-major into `n1 x n2` and split off its top singular
/// triple, sharing `√σ₁` between both factors.
pub fn split_rank_one<S: Scalar>(w: &DVector<S>, n1: usize, n2: usize) -> Result<RankOneSplit<S>> {
    if n1.checked_mul(n2) != Some(w.len()) || n1 == 0 || n2 == 0 {
        return Err(dim(format!("length {} does not reshape to {n1}x{n2}", w.len())));
    }
    let m = DMatrix::from_row_slice(n1, n2, w.as_slice());
    let d = svd(&m)?;
    let root = d.sigma[0].sqrt();
    let residual = d.sigma.iter().skip(1).fold(S::zero(), |a, &s| a + s * s).sqrt();
    Ok(RankOneSplit { u: d.u.column(0) * root, v: d.v.column(0) * root, residual })
}

/// `(⟨u, v⟩ / ‖u‖²)^(−ℓ(ℓ−1))` for `u ≈ w^{1/(ℓ−1)} μ`, `v ≈ w^{1/ℓ} μ`.
///
/// The ratio is the expansion coefficient of `v` on `u`, equal to
/// `w^{1/ℓ − 1/(ℓ−1)}` on exact inputs, so the power returns `w` for any
/// `‖μ‖`.
pub fn recover_weight<S: Scalar>(u: &DVector<S>, v: &DVector<S>, order: usize) -> Result<S> {
    if u.len() != v.len() {
        return Err(dim("u and v lengths differ"));
    }
    if order < 2 {
        return Err(invalid("weight recovery needs order at least 2"));
    }
    let nn = u.norm_squared();
    if !(nn > S::zero()) {
        return Err(invalid("u must be nonzero"));
    }
    let beta = u.dot(v) / nn;
    if beta == S::zero() {
        return Err(Error::Numerical("u and v are orthogonal; weight is unbounded".into()));
    }
    let e = (order * (order - 1)) as i32;
    Ok(beta.powi(-e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignFix<S: Scalar> {
    /// `flips[j][r]`: column `r` of mode `j` changes sign.
    pub flips: Vec<Vec<bool>>,
    pub scalings: Vec<DVector<S>>,
}

impl<S: Scalar> SignFix<S> {
    /// Negate the flipped columns of `cp`; the expansion is unchanged because
    /// every column is flipped in an even number of modes.
    pub fn apply(&self, cp: &CpDecomposition<S>) -> Result<CpDecomposition<S>> {
        let signs: Vec<DVector<S>> = self
            .flips
            .iter()
            .map(|f| DVector::from_iterator(f.len(), f.iter().map(|&b| if b { -S::one() } else { S::one() })))
            .collect();
        cp.scale_columns(&signs)
    }
}

/// Flip signs so every scaling entry is nonnegative. Fails when a column's
/// product of scalings is not positive.
pub fn sign_fix<S: Scalar>(scalings: &[DVector<S>]) -> Result<SignFix<S>> {
    let Some(first) = scalings.first() else {
        return Err(invalid("no scalings"));
    };
    let r = first.len();
    if scalings.iter().any(|s| s.len() != r) {
        return Err(dim("scalings have different lengths"));
    }
    for c in 0..r {
        let p = scalings.iter().fold(S::one(), |p, s| p * s[c]);
        if !(p > S::zero()) {
            return Err(Error::Numerical(format!(
                "column {c} has scaling product {} and cannot be made nonnegative",
                p.f64()
            )));
        }
    }
    let flips: Vec<Vec<bool>> = scalings.iter().map(|s| s.iter().map(|&x| x < S::zero()).collect()).collect();
    let scalings = scalings.iter().map(|s| s.map(|x| x.abs())).collect();
    Ok(SignFix { flips, scalings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar + Serialize", deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct NecessaryCondition<S: Scalar> {
    pub sigma_min: S,
    pub tolerance: S,
    /// Unit `α` with `Σ_r α_r A_r ⊗ B_r ≈ 0`, present when `σ_min ≤ tolerance`.
    #[serde(with = "opt_vec", default)]
    pub null_vector: Option<DVector<S>>,
    pub unique_compatible: bool,
}

mod opt_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Copy + Serialize, Ser: Serializer>(v: &Option<DVector<S>>, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, S, D>(d: D) -> Result<Option<DVector<S>>, D::Error>
    where
        S: nalgebra::Scalar + Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Option::<Vec<S>>::deserialize(d)?.map(DVector::from_vec))
    }
}

/// `σ_min(A ⊙ B)` with tolerance `1e-9·max(1, ‖A ⊙ B‖_F)`.
pub fn necessary_condition_check<S: Scalar>(a: &DMatrix<S>, b: &DMatrix<S>) -> Result<NecessaryCondition<S>> {
    let k = khatri_rao(a, b)?;
    let tol = S::of(1e-9) * k.norm().max(S::one());
    necessary_condition_check_with(a, b, tol)
}

/// A decomposition `[A, B, C]` cannot be unique when `A ⊙ B` has a null
/// vector: adding `α_r u` to every `C_r` leaves the tensor unchanged.
pub fn necessary_condition_check_with<S: Scalar>(a: &DMatrix<S>, b: &DMatrix<S>, tol: S) -> Result<NecessaryCondition<S>> {
    let k = khatri_rao(a, b)?;
    let r = k.ncols();
    if r == 0 {
        return Ok(NecessaryCondition { sigma_min: S::zero(), tolerance: tol, null_vector: None, unique_compatible: true });
    }
    // Pad to at least R rows so the right singular basis is complete.
    let rows = k.nrows().max(r);
    let mut padded = DMatrix::zeros(rows, r);
    padded.rows_mut(0, k.nrows()).copy_from(&k);
    let d = svd(&padded)?;
    let sigma_min = d.sigma[r - 1];
    let singular = sigma_min <= tol;
    let null_vector = singular.then(|| d.v.column(r - 1).into_owned());
    Ok(NecessaryCondition { sigma_min, tolerance: tol, null_vector, unique_compatible: !singular })
}

/// `[A, B, C + u αᵀ]`, which expands to the same tensor as `[A, B, C]`
/// whenever `(A ⊙ B) α = 0`.
pub fn alternative_decomposition<S: Scalar>(
    a: &DMatrix<S>,
    b: &DMatrix<S>,
    c: &DMatrix<S>,
    alpha: &DVector<S>,
    u: &DVector<S>,
) -> Result<CpDecomposition<S>> {
    if alpha.len() != c.ncols() || u.len() != c.nrows() {
        return Err(dim("alpha must have R entries and u must match the rows of C"));
    }
    CpDecomposition::new(vec![a.clone(), b.clone(), c + u * alpha.transpose()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::expand;

    fn cp3() -> CpDecomposition<f64> {
        CpDecomposition::new(vec![
            DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 1.0, 0.3, 0.4]),
            DMatrix::from_row_slice(2, 2, &[0.7, -1.0, 0.1, 0.9]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.5, -0.8, 0.5]),
        ])
        .unwrap()
    }

    #[test]
    fn align_identity() {
        let a = align(&cp3(), &cp3()).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert!(a.scalings.iter().all(|s| s.iter().all(|&x| (x - 1.0).abs() < 1e-15)));
        assert!(a.max_residual() < 1e-15 && a.scaling_product_deviation < 1e-15);
    }

    #[test]
    fn align_permuted_and_scaled() {
        let reference = cp3();
        let scales = vec![
            DVector::from_vec(vec![2.0, 2.0]),
            DVector::from_vec(vec![0.5, 0.5]),
            DVector::from_vec(vec![1.0, 1.0]),
        ];
        let cand = reference.permute_columns(&[1, 0]).unwrap().scale_columns(&scales).unwrap();
        let a = align(&reference, &cand).unwrap();
        assert_eq!(a.permutation, vec![1, 0]);
        assert!(a.max_residual() < 1e-12);
        assert!(a.scaling_product_deviation < 1e-12);
        assert!((a.scalings[0][0] - 2.0).abs() < 1e-12);
        assert!(align(&reference, &CpDecomposition::new(vec![DMatrix::zeros(3, 2)]).unwrap()).is_err());
    }

    #[test]
    fn align_flags_zero_columns() {
        let reference = cp3();
        let mut f = reference.factors().to_vec();
        f[1].column_mut(0).fill(0.0);
        let a = align(&reference, &CpDecomposition::new(f).unwrap()).unwrap();
        assert_eq!(a.zero_columns, vec![(1, 0)]);
        assert_eq!(a.scalings[1][0], 0.0);
    }

    #[test]
    fn symmetric_swap_and_sign() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, -1.0]);
        let v = u.select_columns(&[1, 0]);
        let a = align_symmetric(&u, &v, 3).unwrap();
        assert_eq!(a.permutation, vec![1, 0]);
        assert!(a.residual < 1e-15);
        let a = align_symmetric(&u, &(-v.clone()), 4).unwrap();
        assert_eq!(a.signs, vec![-1, -1]);
        assert!(a.residual < 1e-15);
        assert!(align_symmetric(&u, &(-v), 3).unwrap().residual > 1.0);
    }

    #[test]
    fn split_exact_rank_one() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DVector::from_vec(vec![0.3, 0.4]);
        let w = DVector::from_iterator(6, (0..6).map(|k| a[k / 2] * b[k % 2]));
        let s = split_rank_one(&w, 3, 2).unwrap();
        assert!(s.residual < 1e-12);
        let back = DVector::from_iterator(6, (0..6).map(|k| s.u[k / 2] * s.v[k % 2]));
        assert!((back - w).norm() < 1e-12);
        assert!(split_rank_one(&DVector::<f64>::zeros(5), 2, 2).is_err());
    }

    #[test]
    fn recover_weight_coefficient_form() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let u = &e1 * 0.25f64.powf(0.5);
        let v = &e1 * 0.25f64.powf(1.0 / 3.0);
        assert!((recover_weight(&u, &v, 3).unwrap() - 0.25).abs() < 1e-14);
        let mu = DVector::from_vec(vec![3.0f64, -4.0]);
        assert!((recover_weight(&mu, &mu, 4).unwrap() - 1.0).abs() < 1e-15);
        assert!(recover_weight(&DVector::zeros(2), &e1, 3).is_err());
    }

    #[test]
    fn sign_fix_cases() {
        let s = vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])];
        let f = sign_fix(&s).unwrap();
        assert_eq!(f.flips, vec![vec![true], vec![true], vec![false]]);
        assert!(f.scalings.iter().all(|x| x[0] == 1.0));
        let pos = vec![DVector::from_vec(vec![0.5, 2.0]); 2];
        assert_eq!(sign_fix(&pos).unwrap().scalings, pos);
        let bad = vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])];
        assert!(sign_fix(&bad).is_err());
    }

    #[test]
    fn necessary_condition_cases() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let d = necessary_condition_check(&i2, &i2).unwrap();
        assert!((d.sigma_min - 1.0).abs() < 1e-14 && d.unique_compatible);

        let a = DMatrix::<f64>::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let d = necessary_condition_check(&a, &a).unwrap();
        assert!(!d.unique_compatible);
        let alpha = d.null_vector.unwrap();
        assert!(alpha[1].abs() < 1e-12 && (alpha[0] + alpha[2]).abs() < 1e-12);

        let c = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, -0.1, 1.0, 0.3, 0.5]);
        let u = DVector::from_vec(vec![0.7, -1.3]);
        let alt = alternative_decomposition(&a, &a, &c, &alpha, &u).unwrap();
        let orig = CpDecomposition::new(vec![a.clone(), a, c]).unwrap();
        let diff = crate::tensor::frobenius_distance(&expand(&orig).unwrap(), &expand(&alt).unwrap()).unwrap();
        assert!(diff < 1e-12);
    }
}
