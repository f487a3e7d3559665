//! Compressed sparse column storage.
//!
//! Symmetric matrices are stored with both triangles present. Row indices are
//! sorted within each column and duplicates are summed on construction, so
//! two matrices built from the same triplet pattern share identical
//! `col_ptr`/`row_idx` arrays; the Cholesky symbolic analysis relies on this.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from `(row, col, value)` triplets; duplicate entries are summed.
    /// Explicit zeros are kept so that patterns are value independent.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            counts[j + 1] += 1;
        }
        for j in 0..ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            let p = next[j];
            rows[p] = i;
            vals[p] = v;
            next[j] += 1;
        }

        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for j in 0..ncols {
            order.clear();
            order.extend(counts[j]..counts[j + 1]);
            order.sort_by_key(|&p| rows[p]);
            let mut last: Option<usize> = None;
            for &p in &order {
                if last == Some(rows[p]) {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    row_idx.push(rows[p]);
                    values.push(vals[p]);
                    last = Some(rows[p]);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Assemble from raw parts. Row indices must be sorted and unique per column.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != ncols + 1 || row_idx.len() != values.len() {
            return Err(Error::DimensionMismatch("inconsistent CSC arrays".into()));
        }
        if col_ptr[ncols] != row_idx.len() {
            return Err(Error::DimensionMismatch(
                "col_ptr does not cover row_idx".into(),
            ));
        }
        for j in 0..ncols {
            let col = &row_idx[col_ptr[j]..col_ptr[j + 1]];
            if col.windows(2).any(|w| w[0] >= w[1]) || col.iter().any(|&i| i >= nrows) {
                return Err(Error::Validation(format!(
                    "column {j} has unsorted or out-of-range rows"
                )));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn same_pattern(&self, other: &CscMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.col_ptr == other.col_ptr
            && self.row_idx == other.row_idx
    }

    /// Iterate `(row, value)` over column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Iterate all stored `(row, col, value)` entries column by column.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| self.column(j).map(move |(i, v)| (i, j, v)))
    }

    /// Position of entry `(i, j)` in the value array, if stored.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.col_ptr[j];
        let col = &self.row_idx[start..self.col_ptr[j + 1]];
        col.binary_search(&i).ok().map(|p| start + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.find(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_acc(x, 1.0, &mut y);
        y
    }

    /// `y += alpha A x`.
    pub fn mul_vec_acc(&self, x: &[f64], alpha: f64, y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let axj = alpha * xj;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * axj;
            }
        }
    }

    /// `y = Aᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| self.column(j).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    /// `xᵀ A y` without forming `A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        let mut total = 0.0;
        for (j, &yj) in y.iter().enumerate() {
            if yj == 0.0 {
                continue;
            }
            let s: f64 = self.column(j).map(|(i, v)| v * x[i]).sum();
            total += s * yj;
        }
        total
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn transpose(&self) -> CscMatrix {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        CscMatrix::from_triplets(self.ncols, self.nrows, &trip)
    }

    /// Sparse product `A B`.
    pub fn matmul(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut work = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched: Vec<usize> = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            for (k, bkj) in other.column(j) {
                for (i, aik) in self.column(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        work[i] = 0.0;
                        touched.push(i);
                    }
                    work[i] += aik * bkj;
                }
            }
            touched.sort_unstable();
            for &i in &touched {
                row_idx.push(i);
                values.push(work[i]);
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `diag(d) A` (row scaling).
    pub fn scale_rows(&self, d: &[f64]) -> CscMatrix {
        assert_eq!(d.len(), self.nrows);
        let values = self
            .row_idx
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| v * d[i])
            .collect();
        self.with_values(values)
    }

    pub fn scaled(&self, alpha: f64) -> CscMatrix {
        self.with_values(self.values.iter().map(|v| v * alpha).collect())
    }

    /// Values of `self` laid out on a (super-)pattern. Entries of `self`
    /// absent from `pattern` are an error.
    pub fn aligned_to(&self, pattern: &CscMatrix) -> Result<Vec<f64>> {
        if self.nrows != pattern.nrows || self.ncols != pattern.ncols {
            return Err(Error::DimensionMismatch("pattern shape differs".into()));
        }
        let mut out = vec![0.0; pattern.nnz()];
        for (i, j, v) in self.triplets() {
            let p = pattern
                .find(i, j)
                .ok_or_else(|| Error::Validation(format!("entry ({i}, {j}) not in pattern")))?;
            out[p] = v;
        }
        Ok(out)
    }

    /// Union of sparsity patterns, all values zero.
    pub fn pattern_union(mats: &[&CscMatrix]) -> CscMatrix {
        let (nrows, ncols) = (mats[0].nrows, mats[0].ncols);
        let trip: Vec<_> = mats
            .iter()
            .flat_map(|m| {
                assert_eq!((m.nrows, m.ncols), (nrows, ncols));
                m.triplets().map(|(i, j, _)| (i, j, 0.0))
            })
            .collect();
        CscMatrix::from_triplets(nrows, ncols, &trip)
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> CscMatrix {
        let mut trip = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v.abs() > drop_tol || i == j {
                    trip.push((i, j, v));
                }
            }
        }
        CscMatrix::from_triplets(m.nrows(), m.ncols(), &trip)
    }

    /// Write as `triplet <rows> <cols> <nnz>` followed by `i j value` lines.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "triplet {} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i} {j} {v}")?;
        }
        Ok(())
    }

    pub fn read_triplets<R: BufRead>(r: R) -> Result<CscMatrix> {
        let mut lines = r.lines().enumerate();
        let (nrows, ncols, nnz) = loop {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(0, "missing triplet header"))?;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 4 || f[0] != "triplet" {
                return Err(Error::parse(
                    ln + 1,
                    "expected `triplet <rows> <cols> <nnz>`",
                ));
            }
            let p = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::parse(ln + 1, e.to_string()))
            };
            break (p(f[1])?, p(f[2])?, p(f[3])?);
        };
        let mut trip = Vec::with_capacity(nnz);
        for (ln, line) in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::parse(ln + 1, "expected `i j value`"));
            }
            let i: usize = f[0]
                .parse()
                .map_err(|_| Error::parse(ln + 1, "bad row index"))?;
            let j: usize = f[1]
                .parse()
                .map_err(|_| Error::parse(ln + 1, "bad column index"))?;
            let v: f64 = f[2]
                .parse()
                .map_err(|_| Error::parse(ln + 1, "bad value"))?;
            if i >= nrows || j >= ncols {
                return Err(Error::parse(
                    ln + 1,
                    format!("entry ({i}, {j}) out of range"),
                ));
            }
            trip.push((i, j, v));
        }
        if trip.len() != nnz {
            return Err(Error::parse(
                0,
                format!("expected {nnz} entries, found {}", trip.len()),
            ));
        }
        Ok(CscMatrix::from_triplets(nrows, ncols, &trip))
    }
}
