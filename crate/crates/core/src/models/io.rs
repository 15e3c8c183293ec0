//! CSV sample files: a header row, then one sample per row.
//!
//! Multi-view files use columns `view_1..view_ℓ` holding category indices,
//! HMM files `x_1..x_m` holding observations, Gaussian files `x_1..x_n`
//! holding coordinates.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::hmm::HmmSequences;
use super::multiview::MultiViewSamples;
use crate::error::{dim, invalid, Result};

fn header(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}_{i}")).collect()
}

fn write_rows<W: Write, T: ToString>(w: W, head: Vec<String>, rows: impl Iterator<Item = Vec<T>>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(&head)?;
    for r in rows {
        wr.write_record(r.iter().map(|x| x.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

fn read_rows<R: Read, T: std::str::FromStr>(r: R, prefix: &str) -> Result<(usize, Vec<T>)> {
    let mut rd = csv::Reader::from_reader(r);
    let head = rd.headers()?.clone();
    let k = head.len();
    if k == 0 || head.iter().ne(header(prefix, k).iter().map(String::as_str)) {
        return Err(invalid(format!("expected header {prefix}_1..{prefix}_k")));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        for field in rec.iter() {
            let v = field
                .trim()
                .parse()
                .map_err(|_| invalid(format!("row {}: cannot parse {field:?}", line + 1)))?;
            out.push(v);
        }
    }
    Ok((k, out))
}

fn infer_dims(k: usize, data: &[usize]) -> Vec<usize> {
    let mut dims = vec![1; k];
    for row in data.chunks(k) {
        for (d, &x) in dims.iter_mut().zip(row) {
            *d = (*d).max(x + 1);
        }
    }
    dims
}

pub fn write_multiview<W: Write>(w: W, samples: &MultiViewSamples) -> Result<()> {
    write_rows(w, header("view", samples.views()), samples.rows().map(<[usize]>::to_vec))
}

/// View sizes are taken from `dims`, or inferred as one past the largest
/// category seen.
pub fn read_multiview<R: Read>(r: R, dims: Option<Vec<usize>>) -> Result<MultiViewSamples> {
    let (k, data) = read_rows::<_, usize>(r, "view")?;
    let dims = match dims {
        Some(d) if d.len() != k => return Err(dim(format!("{} view sizes for {k} views", d.len()))),
        Some(d) => d,
        None => infer_dims(k, &data),
    };
    MultiViewSamples::new(dims, data)
}

pub fn write_sequences<W: Write>(w: W, seqs: &HmmSequences) -> Result<()> {
    write_rows(w, header("x", seqs.length()), seqs.rows().map(<[usize]>::to_vec))
}

pub fn read_sequences<R: Read>(r: R, alphabet: Option<usize>) -> Result<HmmSequences> {
    let (k, data) = read_rows::<_, usize>(r, "x")?;
    let n = alphabet.unwrap_or_else(|| data.iter().max().map_or(1, |m| m + 1));
    HmmSequences::new(n, k, data)
}

pub fn write_points<W: Write>(w: W, x: &DMatrix<f64>) -> Result<()> {
    write_rows(w, header("x", x.ncols()), x.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()))
}

pub fn read_points<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let (k, data) = read_rows::<_, f64>(r, "x")?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(crate::Error::NonFinite("sample coordinates"));
    }
    Ok(DMatrix::from_row_slice(data.len() / k, k, &data))
}

/// Sample file contents of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSet {
    Views(MultiViewSamples),
    Sequences(HmmSequences),
    Points(DMatrix<f64>),
}

impl SampleSet {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        match self {
            Self::Views(s) => write_multiview(f, s),
            Self::Sequences(s) => write_sequences(f, s),
            Self::Points(x) => write_points(f, x),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Views(s) => s.len(),
            Self::Sequences(s) => s.len(),
            Self::Points(x) => x.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_multiview_file(path: impl AsRef<Path>, dims: Option<Vec<usize>>) -> Result<MultiViewSamples> {
    read_multiview(File::open(path)?, dims)
}

pub fn read_sequences_file(path: impl AsRef<Path>, alphabet: Option<usize>) -> Result<HmmSequences> {
    read_sequences(File::open(path)?, alphabet)
}

pub fn read_points_file(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_points(File::open(path)?)
}
