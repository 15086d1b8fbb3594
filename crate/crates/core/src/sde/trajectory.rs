use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GFDTTRJ1";

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Physical to normalized coordinates, in place.
    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    /// Normalized to physical coordinates, in place.
    pub fn invert(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }
}

/// Time-ordered samples of an `dim`-dimensional state, stored row-major.
/// Row `k` is the state after `(k + 1)·stride` integration steps of size
/// `dt` unless the producer documents otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    pub dt: f64,
    pub stride: usize,
    states: Vec<f64>,
    pub normalization: Option<Normalization>,
}

impl Trajectory {
    pub fn new(dim: usize, dt: f64, stride: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} values do not form rows of width {dim}",
                states.len()
            )));
        }
        if !(dt > 0.0) || stride == 0 {
            return Err(Error::InvalidParameter("trajectory needs dt > 0 and stride ≥ 1".into()));
        }
        Ok(Trajectory {
            dim,
            dt,
            stride,
            states,
            normalization: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], dt: f64, stride: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("ragged trajectory rows".into()));
        }
        Self::new(dim, dt, stride, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.states.chunks_exact(self.dim)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn into_states(self) -> Vec<f64> {
        self.states
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Time between consecutive rows.
    pub fn sample_interval(&self) -> f64 {
        self.dt * self.stride as f64
    }

    /// Simulated time covered by the rows.
    pub fn span(&self) -> f64 {
        self.len() as f64 * self.sample_interval()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Population variance per dimension.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for r in self.rows() {
            for ((a, b), mu) in v.iter_mut().zip(r).zip(&m) {
                *a += (b - mu) * (b - mu);
            }
        }
        let n = self.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// Every `every`-th row, keeping the time bookkeeping consistent.
    pub fn subsample(&self, every: usize) -> Trajectory {
        let every = every.max(1);
        let states = self.rows().step_by(every).flatten().copied().collect();
        Trajectory {
            dim: self.dim,
            dt: self.dt,
            stride: self.stride * every,
            states,
            normalization: self.normalization.clone(),
        }
    }

    /// Rows `range`, same time bookkeeping.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            dim: self.dim,
            dt: self.dt,
            stride: self.stride,
            states: self.states[range.start * self.dim..range.end * self.dim].to_vec(),
            normalization: self.normalization.clone(),
        }
    }

    /// Zero-mean, unit-variance copy plus the transform that was applied.
    pub fn normalize(&self) -> Result<(Trajectory, Normalization)> {
        if self.len() < 2 {
            return Err(Error::InsufficientData("normalization needs at least two samples".into()));
        }
        let mean = self.mean();
        let std: Vec<f64> = self.variance().iter().map(|v| v.sqrt()).collect();
        if let Some(j) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::DegenerateData(format!("dimension {j} has zero variance")));
        }
        let norm = Normalization { mean, std };
        Ok((self.normalized_with(&norm), norm))
    }

    /// Applies an existing transform (e.g. one fitted on other data).
    pub fn normalized_with(&self, norm: &Normalization) -> Trajectory {
        let mut states = self.states.clone();
        for r in states.chunks_exact_mut(self.dim) {
            norm.apply(r);
        }
        Trajectory {
            dim: self.dim,
            dt: self.dt,
            stride: self.stride,
            states,
            normalization: Some(norm.clone()),
        }
    }

    /// Maps a normalized trajectory back to physical units.
    pub fn denormalize(&self) -> Result<Trajectory> {
        let norm = self
            .normalization
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("trajectory is not normalized".into()))?;
        let mut states = self.states.clone();
        for r in states.chunks_exact_mut(self.dim) {
            norm.invert(r);
        }
        Ok(Trajectory {
            dim: self.dim,
            dt: self.dt,
            stride: self.stride,
            states,
            normalization: None,
        })
    }

    /// CSV with header `t,x1,..,xn`; `t` is the time of each row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        let h = self.sample_interval();
        for (k, r) in self.rows().enumerate() {
            write!(w, "{}", (k + 1) as f64 * h)?;
            for v in r {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv). The row
    /// spacing becomes `dt` with stride 1.
    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let r = BufReader::new(File::open(path)?);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))??;
        let dim = header.split(',').count() - 1;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", i + 2)))?;
            if vals.len() != dim + 1 {
                return Err(Error::dim("trajectory CSV row", dim + 1, vals.len()));
            }
            times.push(vals[0]);
            states.extend_from_slice(&vals[1..]);
        }
        let dt = match times.len() {
            0 => return Err(Error::InsufficientData("CSV has no rows".into())),
            1 => times[0],
            n => (times[n - 1] - times[0]) / (n - 1) as f64,
        };
        Trajectory::new(dim, dt, 1, states)
    }

    /// Binary layout: magic, `u64` dim, `u64` rows, `f64` dt, `u64` stride,
    /// then the states as little-endian `f64`, row-major.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.stride as u64).to_le_bytes())?;
        for v in &self.states {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Trajectory> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 40];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated trajectory header".into()))?;
        if &head[..8] != MAGIC {
            return Err(Error::Format("bad trajectory magic".into()));
        }
        let word = |i: usize| <[u8; 8]>::try_from(&head[8 + 8 * i..16 + 8 * i]).unwrap();
        let dim = u64::from_le_bytes(word(0)) as usize;
        let rows = u64::from_le_bytes(word(1)) as usize;
        let dt = f64::from_le_bytes(word(2));
        let stride = u64::from_le_bytes(word(3)) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != dim * rows * 8 {
            return Err(Error::Format(format!(
                "expected {} state values, found {} bytes",
                dim * rows,
                bytes.len()
            )));
        }
        let states = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Trajectory::new(dim, dt, stride, states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shifted_data_normalizes_to_same() {
        let a = Trajectory::new(1, 0.1, 1, vec![1.0, 2.0, 4.0, 7.0]).unwrap();
        let b = Trajectory::new(1, 0.1, 1, vec![6.0, 7.0, 9.0, 12.0]).unwrap();
        let (na, _) = a.normalize().unwrap();
        let (nb, nm) = b.normalize().unwrap();
        assert!(nm.mean[0] == 8.5);
        for (x, y) in na.states().iter().zip(nb.states()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn plus_minus_one_is_fixed() {
        let t = Trajectory::new(1, 1.0, 1, vec![-1.0, 1.0]).unwrap();
        let (n, _) = t.normalize().unwrap();
        assert_eq!(n.states(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let t = Trajectory::new(2, 1.0, 1, vec![1.0, 2.0, 1.0, 3.0]).unwrap();
        assert!(matches!(t.normalize(), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn span_bookkeeping() {
        let t = Trajectory::new(1, 0.01, 10, vec![0.0; 50]).unwrap();
        assert!((t.span() - 5.0).abs() < 1e-12);
        let s = t.subsample(5);
        assert_eq!(s.len(), 10);
        assert!((s.span() - t.span()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..50)) {
            let t = Trajectory::from_rows(&rows, 0.01, 1).unwrap();
            if let Ok((n, _)) = t.normalize() {
                let back = n.denormalize().unwrap();
                for (x, y) in back.states().iter().zip(t.states()) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
                let m = n.mean();
                let v = n.variance();
                for j in 0..3 {
                    prop_assert!(m[j].abs() < 1e-12 * n.len() as f64);
                    prop_assert!((v[j] - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn binary_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 0..40), stride in 1usize..20) {
            let n = vals.len() / 2 * 2;
            let t = Trajectory::new(2, 0.05, stride, vals[..n].to_vec()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.bin");
            t.write_binary(&p).unwrap();
            prop_assert_eq!(Trajectory::read_binary(&p).unwrap(), t);
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = Trajectory::new(2, 0.1, 1, vec![0.5, -1.25, 3.0, 4.0, 1e-8, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let back = Trajectory::read_csv(&p).unwrap();
        assert_eq!(back.states(), t.states());
        assert!((back.dt - 0.1).abs() < 1e-12);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x1,x2\n"));
    }

    #[test]
    fn corrupt_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        std::fs::write(&p, b"NOTATRAJ").unwrap();
        assert!(Trajectory::read_binary(&p).is_err());
    }
}
