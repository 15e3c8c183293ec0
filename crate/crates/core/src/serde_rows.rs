//! Serialize matrices as arrays of rows.

use nalgebra::DMatrix;
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

pub fn to_rows<S: Copy>(m: &DMatrix<S>) -> Vec<Vec<S>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Build a matrix from rows; `ncols` disambiguates the empty case.
pub fn from_rows<S: nalgebra::Scalar + Copy + num_traits::Zero>(
    rows: &[Vec<S>],
    ncols: Option<usize>,
) -> Result<DMatrix<S>, String> {
    let c = match (rows.first(), ncols) {
        (Some(r), _) => r.len(),
        (None, Some(c)) => c,
        (None, None) => 0,
    };
    if rows.iter().any(|r| r.len() != c) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

pub fn serialize<S, Ser>(m: &DMatrix<S>, s: Ser) -> Result<Ser::Ok, Ser::Error>
where
    S: Copy + Serialize,
    Ser: Serializer,
{
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, S, D>(d: D) -> Result<DMatrix<S>, D::Error>
where
    S: nalgebra::Scalar + Copy + num_traits::Zero + Deserialize<'de>,
    D: Deserializer<'de>,
{
    let rows = Vec::<Vec<S>>::deserialize(d)?;
    from_rows(&rows, None).map_err(D::Error::custom)
}

pub mod vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Copy + Serialize, Ser: Serializer>(
        v: &DVector<S>,
        s: Ser,
    ) -> Result<Ser::Ok, Ser::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, S, D>(d: D) -> Result<DVector<S>, D::Error>
    where
        S: nalgebra::Scalar + Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(DVector::from_vec(Vec::<S>::deserialize(d)?))
    }
}

pub mod mats {
    use super::{from_rows, to_rows};
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Copy + Serialize, Ser: Serializer>(
        ms: &[DMatrix<S>],
        s: Ser,
    ) -> Result<Ser::Ok, Ser::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, S, D>(d: D) -> Result<Vec<DMatrix<S>>, D::Error>
    where
        S: nalgebra::Scalar + Copy + num_traits::Zero + Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Vec::<Vec<Vec<S>>>::deserialize(d)?
            .iter()
            .map(|rows| from_rows(rows, None).map_err(D::Error::custom))
            .collect()
    }
}

pub mod vecs {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Copy + Serialize, Ser: Serializer>(
        vs: &[DVector<S>],
        s: Ser,
    ) -> Result<Ser::Ok, Ser::Error> {
        vs.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, S, D>(d: D) -> Result<Vec<DVector<S>>, D::Error>
    where
        S: nalgebra::Scalar + Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<Vec<S>>::deserialize(d)?.into_iter().map(DVector::from_vec).collect())
    }
}
