//! Count containers shared by every module.

use std::collections::BTreeMap;
use std::ops::Deref;

use crate::error::{Error, Result};

/// One observed count vector `c_1..c_K` with its cached draw size `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVector {
    counts: Vec<u32>,
    total: u64,
}

impl CountVector {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Validation(format!(
                "a count vector needs at least 2 categories, got {}",
                counts.len()
            )));
        }
        let total = counts.iter().map(|&c| c as u64).sum();
        Ok(Self { counts, total })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.counts
    }
}

impl Deref for CountVector {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.counts
    }
}

/// Continuous per-category population sizes with their cached sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationEstimate {
    sizes: Vec<f64>,
    total: f64,
}

impl PopulationEstimate {
    pub fn new(sizes: Vec<f64>) -> Result<Self> {
        if let Some(bad) = sizes.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::Domain(format!(
                "population sizes must be finite and non-negative, got {bad}"
            )));
        }
        let total = sizes.iter().sum();
        Ok(Self { sizes, total })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Nearest-integer estimate, used when a discrete answer is wanted.
    pub fn rounded(&self) -> Vec<u64> {
        self.sizes.iter().map(|s| s.round() as u64).collect()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.sizes
    }
}

impl Deref for PopulationEstimate {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.sizes
    }
}

/// Dense row-major matrix of observations (rows) by categories (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl CountMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.row(i).iter().map(|&c| c as u64).sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        (0..self.rows).map(|i| self.row_total(i)).collect()
    }

    /// Elementwise maximum over rows.
    pub fn column_max(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.cols];
        for r in self.rows() {
            for (m, &c) in out.iter_mut().zip(r) {
                *m = (*m).max(c);
            }
        }
        out
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> CountMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        CountMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Collapse identical rows into (row, multiplicity) pairs. Sums over rows
    /// of any per-row quantity can then be taken over far fewer distinct rows.
    pub fn collapse(&self) -> WeightedRows {
        let mut seen: BTreeMap<&[u32], u64> = BTreeMap::new();
        for r in self.rows() {
            *seen.entry(r).or_insert(0) += 1;
        }
        let mut out = WeightedRows {
            cols: self.cols,
            counts: Vec::with_capacity(seen.len() * self.cols),
            totals: Vec::with_capacity(seen.len()),
            weights: Vec::with_capacity(seen.len()),
        };
        for (r, w) in seen {
            out.counts.extend_from_slice(r);
            out.totals.push(r.iter().map(|&c| c as u64).sum());
            out.weights.push(w as f64);
        }
        out
    }
}

/// Distinct rows of a [`CountMatrix`] with their multiplicities.
#[derive(Debug, Clone)]
pub struct WeightedRows {
    pub(crate) cols: usize,
    pub(crate) counts: Vec<u32>,
    pub(crate) totals: Vec<u64>,
    pub(crate) weights: Vec<f64>,
}

impl WeightedRows {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], u64, f64)> {
        self.counts
            .chunks_exact(self.cols.max(1))
            .zip(&self.totals)
            .zip(&self.weights)
            .map(|((c, &n), &w)| (c, n, w))
    }

    /// Number of original rows.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn column_max(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.cols];
        for (r, _, _) in self.iter() {
            for (m, &c) in out.iter_mut().zip(r) {
                *m = (*m).max(c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_vector_requires_two_categories() {
        assert!(CountVector::new(vec![3]).is_err());
        let c = CountVector::new(vec![3, 4]).unwrap();
        assert_eq!(c.total(), 7);
        assert_eq!(&c[..], &[3, 4]);
    }

    #[test]
    fn estimate_rejects_negative() {
        assert!(PopulationEstimate::new(vec![1.0, -0.5]).is_err());
        assert!(PopulationEstimate::new(vec![1.0, f64::NAN]).is_err());
        let e = PopulationEstimate::new(vec![1.4, 2.6]).unwrap();
        assert_eq!(e.total(), 4.0);
        assert_eq!(e.rounded(), vec![1, 3]);
    }

    #[test]
    fn collapse_counts_multiplicities() {
        let m = CountMatrix::from_rows(&[vec![1, 2], vec![0, 1], vec![1, 2]]).unwrap();
        let w = m.collapse();
        assert_eq!(w.len(), 2);
        assert_eq!(w.total_weight(), 3.0);
        let got: Vec<_> = w.iter().map(|(c, n, w)| (c.to_vec(), n, w)).collect();
        assert_eq!(got, vec![(vec![0, 1], 1, 1.0), (vec![1, 2], 3, 2.0)]);
        assert_eq!(m.column_max(), vec![1, 2]);
    }

    #[test]
    fn shape_is_checked() {
        assert!(CountMatrix::new(2, 2, vec![1, 2, 3]).is_err());
        assert!(CountMatrix::from_rows(&[vec![1, 2], vec![1]]).is_err());
    }
}
