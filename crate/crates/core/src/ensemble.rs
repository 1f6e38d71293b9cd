use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `M` particles in `R^d` observed at time `t`; the sample representation of
/// a density. States are stored row-major, one particle per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    dim: usize,
    states: Vec<f64>,
    time: f64,
}

impl Ensemble {
    pub fn new(dim: usize, states: Vec<f64>, time: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("ensemble dimension must be at least 1"));
        }
        if states.is_empty() || !states.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} coordinates do not form a non-empty ensemble of dimension {dim}",
                states.len()
            )));
        }
        if !time.is_finite() {
            return Err(Error::invalid("ensemble time must be finite"));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ensemble coordinates must be finite"));
        }
        Ok(Ensemble { dim, states, time })
    }

    pub fn from_rows(rows: &[Vec<f64>], time: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut states = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            states.extend_from_slice(r);
        }
        Self::new(dim, states, time)
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_raw(dim: usize, states: Vec<f64>, time: f64) -> Self {
        debug_assert!(dim > 0 && !states.is_empty() && states.len().is_multiple_of(dim));
        Ensemble { dim, states, time }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    /// Always false; ensembles hold at least one particle.
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::ChunksExact<'_, f64> {
        self.states.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.states
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.states
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.particles() {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += v;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased per-coordinate sample variance (zero for a single particle).
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.len();
        if n < 2 {
            return vec![0.0; self.dim];
        }
        let mut var = vec![0.0; self.dim];
        for p in self.particles() {
            for k in 0..self.dim {
                var[k] += (p[k] - mean[k]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        var
    }

    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        check_dim(self.dim, shift.len())?;
        let states = self
            .particles()
            .flat_map(|p| p.iter().zip(shift).map(|(a, b)| a + b))
            .collect();
        Self::new(self.dim, states, self.time)
    }

    /// The first `n` particles.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("cannot keep {n} of {} particles", self.len())));
        }
        Ok(Ensemble::from_raw(self.dim, self.states[..n * self.dim].to_vec(), self.time))
    }

    /// Particles at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut states = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("particle index {i} out of range")));
            }
            states.extend_from_slice(self.particle(i));
        }
        Self::new(self.dim, states, self.time)
    }

    /// CSV with header `x1..xd`, one particle per row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record((1..=self.dim).map(|k| format!("x{k}")))?;
        for p in self.particles() {
            wtr.write_record(p.iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, time: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let dim = rdr.headers()?.len();
        let mut states = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            check_dim(dim, rec.len())?;
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad number {field:?} in ensemble CSV")))?;
                states.push(v);
            }
        }
        Self::new(dim, states, time)
    }
}

/// An axis-aligned box `Π (lower_k, upper_k)`. Coordinates flagged as
/// unbounded have no faces and are never reflected.
///
/// Serialized as `{"lower": [...], "upper": [...]}` with `null` bounds for
/// unbounded coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DomainRepr", try_from = "DomainRepr")]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
    bounded: Vec<bool>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let bounded = vec![true; lower.len()];
        Self::with_mask(lower, upper, bounded)
    }

    pub fn with_mask(lower: Vec<f64>, upper: Vec<f64>, bounded: Vec<bool>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::invalid("domain dimension must be at least 1"));
        }
        check_dim(lower.len(), upper.len())?;
        check_dim(lower.len(), bounded.len())?;
        for k in 0..lower.len() {
            if bounded[k] && !(lower[k].is_finite() && upper[k].is_finite() && lower[k] < upper[k]) {
                return Err(Error::invalid(format!(
                    "bounded coordinate {k} needs finite lower < upper, got ({}, {})",
                    lower[k], upper[k]
                )));
            }
        }
        Ok(BoxDomain { lower, upper, bounded })
    }

    /// The cube `(lo, hi)^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    /// All of `R^dim`.
    pub fn unbounded(dim: usize) -> Self {
        BoxDomain {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            bounded: vec![false; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_bounded(&self, k: usize) -> bool {
        self.bounded[k]
    }

    pub fn fully_bounded(&self) -> bool {
        self.bounded.iter().all(|&b| b)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|k| !self.bounded[k] || (self.lower[k] <= x[k] && x[k] <= self.upper[k]))
    }

    /// Geometric mean of the half-widths of the bounded coordinates.
    pub fn mean_half_width(&self) -> Option<f64> {
        let hw: Vec<f64> = (0..self.dim())
            .filter(|&k| self.bounded[k])
            .map(|k| 0.5 * (self.upper[k] - self.lower[k]))
            .collect();
        if hw.is_empty() {
            return None;
        }
        Some((hw.iter().map(|v| v.ln()).sum::<f64>() / hw.len() as f64).exp())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainRepr {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

impl From<BoxDomain> for DomainRepr {
    fn from(b: BoxDomain) -> Self {
        let pick = |v: &[f64]| {
            v.iter().zip(&b.bounded).map(|(&x, &bd)| bd.then_some(x)).collect()
        };
        DomainRepr { lower: pick(&b.lower), upper: pick(&b.upper) }
    }
}

impl TryFrom<DomainRepr> for BoxDomain {
    type Error = Error;

    fn try_from(r: DomainRepr) -> Result<Self> {
        check_dim(r.lower.len(), r.upper.len())?;
        let mut lower = Vec::with_capacity(r.lower.len());
        let mut upper = Vec::with_capacity(r.lower.len());
        let mut bounded = Vec::with_capacity(r.lower.len());
        for (lo, hi) in r.lower.into_iter().zip(r.upper) {
            match (lo, hi) {
                (Some(lo), Some(hi)) => {
                    lower.push(lo);
                    upper.push(hi);
                    bounded.push(true);
                }
                (None, None) => {
                    lower.push(f64::NEG_INFINITY);
                    upper.push(f64::INFINITY);
                    bounded.push(false);
                }
                _ => return Err(Error::invalid("a coordinate must be bounded on both sides or neither")),
            }
        }
        BoxDomain::with_mask(lower, upper, bounded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_ensembles() {
        assert!(Ensemble::new(0, vec![1.0], 0.0).is_err());
        assert!(Ensemble::new(2, vec![], 0.0).is_err());
        assert!(Ensemble::new(2, vec![1.0, 2.0, 3.0], 0.0).is_err());
        assert!(Ensemble::new(1, vec![f64::NAN], 0.0).is_err());
        assert!(Ensemble::new(1, vec![1.0], f64::INFINITY).is_err());
    }

    #[test]
    fn moments() {
        let e = Ensemble::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]], 0.0).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.mean(), vec![1.0, 2.0]);
        assert_eq!(e.variance(), vec![2.0, 2.0]);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let e = Ensemble::new(2, vec![0.1, -1e-300, 1.0 / 3.0, 12345.678], 0.5).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x1,x2\n"));
        let back = Ensemble::read_csv(buf.as_slice(), 0.5).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn box_validation() {
        assert!(BoxDomain::new(vec![1.0], vec![1.0]).is_err());
        assert!(BoxDomain::with_mask(vec![0.0, 5.0], vec![1.0, 0.0], vec![true, false]).is_ok());
        let b = BoxDomain::cube(2, -4.0, 4.0).unwrap();
        assert!(b.contains(&[4.0, -4.0]));
        assert!(!b.contains(&[4.1, 0.0]));
        assert!((b.mean_half_width().unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(BoxDomain::unbounded(3).mean_half_width(), None);
    }

    #[test]
    fn box_json_uses_null_for_unbounded() {
        let b = BoxDomain::with_mask(vec![-1.0, 0.0], vec![1.0, 0.0], vec![true, false]).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"lower":[-1.0,null],"upper":[1.0,null]}"#);
        let back: BoxDomain = serde_json::from_str(&s).unwrap();
        assert!(!back.is_bounded(1));
        assert!(serde_json::from_str::<BoxDomain>(r#"{"lower":[1.0],"upper":[0.0]}"#).is_err());
    }
}
