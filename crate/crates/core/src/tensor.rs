//! Dense tensors and CP decompositions.
//!
//! Storage is row-major with the last index fastest. Unfoldings and the
//! Khatri-Rao product follow the same convention: column `c` of an
//! unfolding enumerates the remaining modes row-major, and row
//! `i_a * n_b + i_b` of `khatri_rao(a, b)` holds `a[i_a] * b[i_b]`.
//! Modes are 0-based.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};
use crate::{serde_rows, Scalar};

/// Largest tensor order accepted by [`DenseTensor::new`].
pub const DEFAULT_MAX_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor<S>", bound(deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct DenseTensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

#[derive(Deserialize)]
struct RawTensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TryFrom<RawTensor<S>> for DenseTensor<S> {
    type Error = Error;
    fn try_from(raw: RawTensor<S>) -> Result<Self> {
        DenseTensor::new(raw.shape, raw.data)
    }
}

/// Number of entries for `shape`, with overflow checking.
pub fn checked_len(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &n| {
        acc.checked_mul(n)
            .ok_or_else(|| invalid(format!("shape {shape:?} overflows usize")))
    })
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// Advance a row-major multi-index; returns false after the last one.
pub fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return true;
        }
        idx[k] = 0;
    }
    false
}

impl<S: Scalar> DenseTensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::with_max_order(shape, data, DEFAULT_MAX_ORDER)
    }

    pub fn with_max_order(shape: Vec<usize>, data: Vec<S>, max_order: usize) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid("tensor order must be at least 1"));
        }
        if shape.len() > max_order {
            return Err(invalid(format!(
                "tensor order {} exceeds the configured maximum {max_order}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(invalid(format!("shape {shape:?} has a zero extent")));
        }
        let len = checked_len(&shape)?;
        if data.len() != len {
            return Err(dim(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = checked_len(&shape)?;
        Self::new(shape, vec![S::zero(); len])
    }

    /// Fill entries from a function of the multi-index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> S) -> Result<Self> {
        let len = checked_len(&shape)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0; shape.len()];
        if len > 0 {
            loop {
                data.push(f(&idx));
                if !next_index(&mut idx, &shape) {
                    break;
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn norm_squared(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x * x)
    }

    pub fn norm(&self) -> S {
        self.norm_squared().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn scale(&self, a: S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| a * x).collect() }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: S, other: &Self) -> Result<Self> {
        same_shape(self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| x + a * y).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-S::one(), other)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(invalid(format!(
                "mode {mode} out of range for order-{} tensor",
                self.order()
            )));
        }
        Ok(())
    }

    /// Mode-`mode` matricization: `n_mode x prod(other extents)`.
    pub fn unfold(&self, mode: usize) -> Result<DMatrix<S>> {
        self.check_mode(mode)?;
        let rows = self.shape[mode];
        let cols = self.len() / rows;
        let st = strides(&self.shape);
        let inner = st[mode];
        let mut m = DMatrix::zeros(rows, cols);
        // Column index = outer * inner + inner_offset, where outer enumerates
        // modes before `mode` and inner the ones after it.
        for (flat, &x) in self.data.iter().enumerate() {
            let outer = flat / (inner * rows);
            let i = (flat / inner) % rows;
            let rest = flat % inner;
            m[(i, outer * inner + rest)] = x;
        }
        Ok(m)
    }

    /// Inverse of [`unfold`](Self::unfold).
    pub fn fold(m: &DMatrix<S>, mode: usize, shape: Vec<usize>) -> Result<Self> {
        let t = Self::zeros(shape)?;
        t.check_mode(mode)?;
        let rows = t.shape[mode];
        if m.nrows() != rows || m.ncols() * rows != t.len() {
            return Err(dim(format!(
                "{}x{} matrix cannot fold into {:?} along mode {mode}",
                m.nrows(),
                m.ncols(),
                t.shape
            )));
        }
        let inner = strides(&t.shape)[mode];
        let mut data = t.data;
        for (flat, v) in data.iter_mut().enumerate() {
            let outer = flat / (inner * rows);
            let i = (flat / inner) % rows;
            *v = m[(i, outer * inner + flat % inner)];
        }
        Ok(Self { shape: t.shape, data })
    }

    /// Weighted sum of the slices of an order-3 tensor along `mode`.
    ///
    /// The result is indexed by the two remaining modes in their original
    /// order, so for an exact `[A, B, C]` and `mode == 2` it equals
    /// `A diag(Cᵀx) Bᵀ`.
    pub fn mode_contract(&self, mode: usize, x: &DVector<S>) -> Result<DMatrix<S>> {
        if self.order() != 3 {
            return Err(invalid("mode_contract needs an order-3 tensor"));
        }
        self.check_mode(mode)?;
        if x.len() != self.shape[mode] {
            return Err(dim(format!(
                "vector of length {} against mode extent {}",
                x.len(),
                self.shape[mode]
            )));
        }
        let rest: Vec<usize> = (0..3).filter(|&k| k != mode).collect();
        let mut m = DMatrix::zeros(self.shape[rest[0]], self.shape[rest[1]]);
        let mut idx = [0usize; 3];
        for &v in &self.data {
            m[(idx[rest[0]], idx[rest[1]])] += x[idx[mode]] * v;
            next_index(&mut idx, &self.shape);
        }
        Ok(m)
    }

    /// Contract every mode except `keep` against the given vectors.
    pub fn contract_all_but(&self, keep: usize, vs: &[&[S]]) -> Result<DVector<S>> {
        self.check_mode(keep)?;
        if vs.len() != self.order() {
            return Err(dim("one vector per mode expected"));
        }
        let mut out = DVector::zeros(self.shape[keep]);
        let mut idx = vec![0usize; self.order()];
        for &v in &self.data {
            let mut w = v;
            for (k, &i) in idx.iter().enumerate() {
                if k != keep {
                    w *= vs[k][i];
                }
            }
            out[idx[keep]] += w;
            next_index(&mut idx, &self.shape);
        }
        Ok(out)
    }

    /// Reorder modes: mode `k` of the result is mode `perm[k]` of `self`.
    pub fn permute_modes(&self, perm: &[usize]) -> Result<Self> {
        let l = self.order();
        let mut seen = vec![false; l];
        if perm.len() != l || perm.iter().any(|&p| p >= l || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(format!("{perm:?} is not a permutation of {l} modes")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let st = strides(&self.shape);
        Self::from_fn(shape, |idx| {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * st[p]).sum();
            self.data[off]
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self>
    where
        S: for<'de> Deserialize<'de>,
    {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String>
    where
        S: Serialize,
    {
        Ok(serde_json::to_string(self)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self>
    where
        S: for<'de> Deserialize<'de>,
    {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()>
    where
        S: Serialize,
    {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

fn same_shape<S>(a: &DenseTensor<S>, b: &DenseTensor<S>) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim(format!("shapes {:?} and {:?} differ", a.shape, b.shape)));
    }
    Ok(())
}

/// Frobenius norm of `t1 - t2`.
pub fn frobenius_distance<S: Scalar>(t1: &DenseTensor<S>, t2: &DenseTensor<S>) -> Result<S> {
    same_shape(t1, t2)?;
    let ss = t1.data.iter().zip(&t2.data).fold(S::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    });
    Ok(ss.sqrt())
}

/// Column-wise Kronecker product.
pub fn khatri_rao<S: Scalar>(a: &DMatrix<S>, b: &DMatrix<S>) -> Result<DMatrix<S>> {
    if a.ncols() != b.ncols() {
        return Err(dim(format!(
            "khatri_rao column counts {} and {} differ",
            a.ncols(),
            b.ncols()
        )));
    }
    let nb = b.nrows();
    Ok(DMatrix::from_fn(a.nrows() * nb, a.ncols(), |row, r| {
        a[(row / nb, r)] * b[(row % nb, r)]
    }))
}

/// A list of factor matrices `U^(j)` (`n_j x R`) standing for `Σ_r ⊗_j U^(j)_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawCp<S>",
    into = "RawCp<S>",
    bound(serialize = "S: Scalar + Serialize", deserialize = "S: Scalar + Deserialize<'de>")
)]
pub struct CpDecomposition<S: Scalar> {
    factors: Vec<DMatrix<S>>,
}

#[derive(Serialize, Deserialize)]
struct RawCp<S> {
    rank: usize,
    factors: Vec<Vec<Vec<S>>>,
}

impl<S: Scalar> TryFrom<RawCp<S>> for CpDecomposition<S> {
    type Error = Error;
    fn try_from(raw: RawCp<S>) -> Result<Self> {
        let factors = raw
            .factors
            .iter()
            .map(|rows| serde_rows::from_rows(rows, Some(raw.rank)).map_err(invalid))
            .collect::<Result<Vec<_>>>()?;
        let cp = CpDecomposition::new(factors)?;
        if cp.rank() != raw.rank {
            return Err(dim(format!("declared rank {} but factors have {}", raw.rank, cp.rank())));
        }
        Ok(cp)
    }
}

impl<S: Scalar> From<CpDecomposition<S>> for RawCp<S> {
    fn from(cp: CpDecomposition<S>) -> Self {
        RawCp { rank: cp.rank(), factors: cp.factors.iter().map(serde_rows::to_rows).collect() }
    }
}

impl<S: Scalar> CpDecomposition<S> {
    pub fn new(factors: Vec<DMatrix<S>>) -> Result<Self> {
        let Some(first) = factors.first() else {
            return Err(invalid("a decomposition needs at least one factor"));
        };
        let r = first.ncols();
        if let Some((j, f)) = factors.iter().enumerate().find(|(_, f)| f.ncols() != r) {
            return Err(dim(format!("factor {j} has {} columns, factor 0 has {r}", f.ncols())));
        }
        if factors.iter().any(|f| f.nrows() == 0) {
            return Err(invalid("factor with zero rows"));
        }
        Ok(Self { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn factors(&self) -> &[DMatrix<S>] {
        &self.factors
    }

    pub fn factor(&self, j: usize) -> &DMatrix<S> {
        &self.factors[j]
    }

    pub fn into_factors(self) -> Vec<DMatrix<S>> {
        self.factors
    }

    pub fn expand(&self) -> Result<DenseTensor<S>> {
        expand(self)
    }

    /// Apply the same column permutation to every factor: column `s` of the
    /// result is column `perm[s]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(format!("{perm:?} is not a permutation of {r} columns")));
        }
        let factors = self.factors.iter().map(|f| f.select_columns(perm)).collect();
        Self::new(factors)
    }

    /// Scale column `r` of factor `j` by `scales[j][r]`.
    pub fn scale_columns(&self, scales: &[DVector<S>]) -> Result<Self> {
        if scales.len() != self.order() || scales.iter().any(|s| s.len() != self.rank()) {
            return Err(dim("one length-R scaling per mode expected"));
        }
        let factors = self
            .factors
            .iter()
            .zip(scales)
            .map(|(f, s)| {
                let mut g = f.clone();
                for (r, &x) in s.iter().enumerate() {
                    g.column_mut(r).scale_mut(x);
                }
                g
            })
            .collect();
        Self::new(factors)
    }

    /// Largest column norm of each factor.
    pub fn max_column_norms(&self) -> Vec<S> {
        self.factors
            .iter()
            .map(|f| f.column_iter().fold(S::zero(), |m, c| m.max(c.norm())))
            .collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self>
    where
        S: for<'de> Deserialize<'de>,
    {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String>
    where
        S: Serialize,
    {
        Ok(serde_json::to_string(self)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self>
    where
        S: for<'de> Deserialize<'de>,
    {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()>
    where
        S: Serialize,
    {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Evaluate `Σ_r Π_j factors[j][i_j][r]` at every multi-index.
pub fn expand<S: Scalar>(cp: &CpDecomposition<S>) -> Result<DenseTensor<S>> {
    let shape = cp.shape();
    let r = cp.rank();
    let f = &cp.factors;
    DenseTensor::from_fn(shape, |idx| {
        let mut sum = S::zero();
        for c in 0..r {
            let mut p = f[0][(idx[0], c)];
            for (j, &i) in idx.iter().enumerate().skip(1) {
                p *= f[j][(i, c)];
            }
            sum += p;
        }
        sum
    })
}

/// `Σ_r u_r^{⊗order}` as a decomposition with `order` copies of `u`.
pub fn symmetric_cp<S: Scalar>(u: &DMatrix<S>, order: usize) -> Result<CpDecomposition<S>> {
    if order < 2 {
        return Err(invalid("symmetric decompositions need order at least 2"));
    }
    CpDecomposition::new(vec![u.clone(); order])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> DenseTensor<f64> {
        DenseTensor::new(shape, data).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DenseTensor::<f64>::new(vec![], vec![]).is_err());
        assert!(DenseTensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::<f64>::new(vec![1; 9], vec![0.0]).is_err());
        assert!(DenseTensor::<f64>::with_max_order(vec![1; 9], vec![0.0], 9).is_ok());
        assert!(DenseTensor::<f64>::zeros(vec![usize::MAX, 3]).is_err());
    }

    #[test]
    fn unfold_matches_index_formula() {
        let x = t(vec![2, 2, 2], (1..=8).map(f64::from).collect());
        let m = x.unfold(0).unwrap();
        assert_eq!(m.shape(), (2, 4));
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(m[(i, j * 2 + k)], x.get(&[i, j, k]));
                }
            }
        }
        let m1 = x.unfold(1).unwrap();
        assert_eq!(m1[(1, 2)], x.get(&[1, 1, 0]));
    }

    #[test]
    fn fold_inverts_unfold() {
        let x = t(vec![2, 3, 4], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect());
        for mode in 0..3 {
            let back = DenseTensor::fold(&x.unfold(mode).unwrap(), mode, vec![2, 3, 4]).unwrap();
            assert_eq!(back, x);
        }
        assert!(x.unfold(3).is_err());
    }

    #[test]
    fn expand_small_cases() {
        let ones = DMatrix::from_element(2, 1, 1.0);
        let cp = CpDecomposition::new(vec![ones.clone(), ones.clone(), ones]).unwrap();
        assert!(expand(&cp).unwrap().data().iter().all(|&v| v == 1.0));

        let id = DMatrix::<f64>::identity(2, 2);
        let cp = CpDecomposition::new(vec![id.clone(), id.clone(), id]).unwrap();
        let x = expand(&cp).unwrap();
        let nonzero: Vec<usize> = (0..8).filter(|&k| x.data()[k] != 0.0).collect();
        assert_eq!(nonzero, vec![0, 7]);
    }

    #[test]
    fn frobenius_offset() {
        let a = t(vec![2, 2, 2], vec![0.0; 8]);
        let b = t(vec![2, 2, 2], vec![1.0; 8]);
        assert_eq!(frobenius_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(frobenius_distance(&a, &b).unwrap(), 8f64.sqrt());
        assert!(frobenius_distance(&a, &t(vec![8], vec![0.0; 8])).is_err());
    }

    #[test]
    fn khatri_rao_identity_columns() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let k = khatri_rao(&i2, &i2).unwrap();
        assert_eq!(k.column(0).as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(k.column(1).as_slice(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(khatri_rao(&i2, &DMatrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn contract_indicator_and_zero() {
        let x = t(vec![2, 3, 2], (0..12).map(f64::from).collect());
        let e = DVector::from_vec(vec![0.0, 1.0]);
        let s = x.mode_contract(2, &e).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(s[(i, j)], x.get(&[i, j, 1]));
            }
        }
        let z = x.mode_contract(1, &DVector::zeros(3)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(x.mode_contract(1, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let x = t(vec![2, 1, 2], vec![0.1, -1.0 / 3.0, 1e-300, std::f64::consts::PI]);
        let s = x.to_json_string().unwrap();
        assert_eq!(DenseTensor::<f64>::from_json_str(&s).unwrap(), x);
        assert!(DenseTensor::<f64>::from_json_str(r#"{"shape":[2],"data":[1]}"#).is_err());

        let cp = CpDecomposition::new(vec![
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.7]),
            DMatrix::from_row_slice(1, 2, &[1.0 / 7.0, -2.0]),
        ])
        .unwrap();
        let s = cp.to_json_string().unwrap();
        assert!(s.starts_with(r#"{"rank":2,"factors":[[[0.1,0.2],"#));
        assert_eq!(CpDecomposition::<f64>::from_json_str(&s).unwrap(), cp);
        assert!(CpDecomposition::<f64>::from_json_str(r#"{"rank":3,"factors":[[[1,2]]]}"#).is_err());
    }

    #[test]
    fn symmetric_cp_needs_order_two() {
        let u = DMatrix::from_element(3, 1, 1.0);
        assert!(symmetric_cp(&u, 1).is_err());
        let x = expand(&symmetric_cp(&u, 3).unwrap()).unwrap();
        assert_eq!(x.shape(), &[3, 3, 3]);
        assert!(x.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn works_in_single_precision() {
        let a = DMatrix::<f32>::from_row_slice(2, 1, &[1.0, 2.0]);
        let x = expand(&CpDecomposition::new(vec![a.clone(), a]).unwrap()).unwrap();
        assert_eq!(x.data(), &[1.0f32, 2.0, 2.0, 4.0]);
    }
}
