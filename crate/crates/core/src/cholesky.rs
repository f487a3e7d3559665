//! Sparse Cholesky factorization `P A Pᵀ = L Lᵀ` with a reusable symbolic phase.
//!
//! The symbolic analysis (fill-reducing ordering, elimination tree, the full
//! nonzero structure of `L`, and the scatter map from `A` into the permuted
//! upper triangle) depends only on the sparsity pattern of `A`. It is computed
//! once and shared through an `Arc`; each numeric factorization then only
//! touches values. Consecutive columns with nested patterns form supernodes
//! stored as dense panels; the numeric phase factors each panel and pushes
//! its outer-product update into ancestor panels, then the panels are copied
//! into a plain column layout used by the solves.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};
use crate::par;
use crate::sparse::CscMatrix;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    #[default]
    Amd,
    /// Index `b·m + v` is copy `b` of base node `v` (`m = n / blocks`). Base
    /// nodes are ordered by AMD on the collapsed pattern and the copies of
    /// each base node are kept adjacent.
    BlockAmd {
        blocks: usize,
    },
}

#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    src_col_ptr: Vec<usize>,
    src_row_idx: Vec<usize>,
    // entries of the permuted upper triangle: value `A.values[c_src[e]]`
    // lands at panel slot `c_dest[e]`
    c_src: Vec<usize>,
    l_ptr: Vec<usize>,
    l_row: Vec<usize>,
    // supernode s spans columns sn_first[s]..sn_first[s + 1]; its panel holds
    // the rows of its first column, column-major, from sn_off[s]
    sn_first: Vec<usize>,
    sn_off: Vec<usize>,
    col_super: Vec<usize>,
    c_dest: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyze the pattern of a square matrix with symmetric structure.
    pub fn analyze(a: &CscMatrix, ordering: Ordering) -> Result<Arc<Self>> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let perm = match ordering {
            Ordering::Natural => (0..n).collect::<Vec<_>>(),
            Ordering::Amd => amd_order(a)?,
            Ordering::BlockAmd { blocks } => block_amd_order(a, blocks)?,
        };
        let mut iperm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }

        // Upper triangle of C = P A Pᵀ with provenance of every value.
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(a.nnz() / 2 + n);
        for j in 0..n {
            for p in a.col_ptr()[j]..a.col_ptr()[j + 1] {
                let i = a.row_idx()[p];
                let (ci, cj) = (iperm[i], iperm[j]);
                if ci <= cj {
                    entries.push((cj, ci, p));
                }
            }
        }
        entries.sort_unstable();
        let mut c_ptr = vec![0usize; n + 1];
        for &(cj, _, _) in &entries {
            c_ptr[cj + 1] += 1;
        }
        for k in 0..n {
            c_ptr[k + 1] += c_ptr[k];
        }
        let c_row: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let c_src: Vec<usize> = entries.iter().map(|e| e.2).collect();

        let parent = etree(n, &c_ptr, &c_row);

        let mut r_ptr = Vec::with_capacity(n + 1);
        let mut r_idx = Vec::new();
        r_ptr.push(0);
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(k, &c_ptr, &c_row, &parent, &mut stack, &mut mark);
            for &j in &stack[top..n] {
                counts[j] += 1;
                r_idx.push(j);
            }
            r_ptr.push(r_idx.len());
        }

        let mut l_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_ptr[j + 1] = l_ptr[j] + counts[j];
        }
        let mut l_row = vec![0usize; l_ptr[n]];
        let mut next: Vec<usize> = (0..n).map(|j| l_ptr[j] + 1).collect();
        for j in 0..n {
            l_row[l_ptr[j]] = j;
        }
        for k in 0..n {
            for &j in &r_idx[r_ptr[k]..r_ptr[k + 1]] {
                l_row[next[j]] = k;
                next[j] += 1;
            }
        }

        let mut sn_first = vec![0usize];
        for j in 1..n {
            let merge = parent[j - 1] == j && counts[j - 1] == counts[j] + 1;
            if !merge {
                sn_first.push(j);
            }
        }
        if n > 0 {
            sn_first.push(n);
        }
        let ns = sn_first.len().saturating_sub(1);
        let mut col_super = vec![0usize; n];
        let mut sn_off = vec![0usize; ns + 1];
        for s in 0..ns {
            let (f, e) = (sn_first[s], sn_first[s + 1]);
            col_super[f..e].fill(s);
            sn_off[s + 1] = sn_off[s] + counts[f] * (e - f);
        }
        let mut c_dest = Vec::with_capacity(c_row.len());
        for k in 0..n {
            for &i in &c_row[c_ptr[k]..c_ptr[k + 1]] {
                // entry (k, i) of the lower triangle
                let sn = col_super[i];
                let f = sn_first[sn];
                let rows = &l_row[l_ptr[f]..l_ptr[f + 1]];
                let r = rows
                    .binary_search(&k)
                    .expect("entry of A lies in the pattern of L");
                c_dest.push(sn_off[sn] + (i - f) * counts[f] + r);
            }
        }

        Ok(Arc::new(Self {
            n,
            perm,
            iperm,
            src_col_ptr: a.col_ptr().to_vec(),
            src_row_idx: a.row_idx().to_vec(),
            c_src,
            l_ptr,
            l_row,
            sn_first,
            sn_off,
            col_super,
            c_dest,
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of `L`, diagonal included.
    pub fn nnz_l(&self) -> usize {
        self.l_row.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn matches(&self, a: &CscMatrix) -> bool {
        a.nrows() == self.n
            && a.ncols() == self.n
            && a.col_ptr() == self.src_col_ptr.as_slice()
            && a.row_idx() == self.src_row_idx.as_slice()
    }

    /// Numeric factorization of a matrix with the analyzed pattern.
    pub fn factor(self: &Arc<Self>, a: &CscMatrix) -> Result<CholeskyFactor> {
        if !self.matches(a) {
            return Err(Error::Validation(
                "matrix pattern differs from the analyzed pattern".into(),
            ));
        }
        let av = a.values();
        let mut v = vec![0.0; self.sn_off.last().copied().unwrap_or(0)];
        for (e, &src) in self.c_src.iter().enumerate() {
            v[self.c_dest[e]] += av[src];
        }
        let mut lt = Vec::new();
        let mut pos = Vec::new();
        for s in 0..self.sn_first.len().saturating_sub(1) {
            let (f, w) = (self.sn_first[s], self.sn_first[s + 1] - self.sn_first[s]);
            let m = self.l_ptr[f + 1] - self.l_ptr[f];
            let rows = &self.l_row[self.l_ptr[f]..self.l_ptr[f + 1]];
            let (head, tail) = v.split_at_mut(self.sn_off[s + 1]);
            let blk = &mut head[self.sn_off[s]..];
            factor_panel(blk, m, w, f)?;
            let mb = m - w;
            if mb == 0 {
                continue;
            }
            lt.clear();
            for r in 0..mb {
                lt.extend((0..w).map(|p| blk[p * m + w + r]));
            }
            let base = self.sn_off[s + 1];
            let mut i0 = 0;
            while i0 < mb {
                let t = self.col_super[rows[w + i0]];
                let (ft, et) = (self.sn_first[t], self.sn_first[t + 1]);
                let mut i1 = i0;
                while i1 < mb && rows[w + i1] < et {
                    i1 += 1;
                }
                let trows = &self.l_row[self.l_ptr[ft]..self.l_ptr[ft + 1]];
                let tm = trows.len();
                pos.clear();
                let mut q = 0;
                for &r in &rows[w + i0..] {
                    while trows[q] != r {
                        q += 1;
                    }
                    pos.push(q);
                }
                let toff = self.sn_off[t] - base;
                if w * (i1 - i0) * (mb - i0) >= GEMM_MIN_FLOPS {
                    let a = DMatrixView::from_slice_with_strides(&blk[w + i0..], mb - i0, w, 1, m);
                    let b = DMatrixView::from_slice_with_strides(&blk[w + i0..], i1 - i0, w, 1, m);
                    let u = a * b.transpose();
                    for c in 0..i1 - i0 {
                        let col = toff + (rows[w + i0 + c] - ft) * tm;
                        for r in c..mb - i0 {
                            tail[col + pos[r]] -= u[(r, c)];
                        }
                    }
                } else {
                    for c in i0..i1 {
                        let col = toff + (rows[w + c] - ft) * tm;
                        let lc = &lt[c * w..(c + 1) * w];
                        for r in c..mb {
                            let lr = &lt[r * w..(r + 1) * w];
                            let dot: f64 = lr.iter().zip(lc).map(|(x, y)| x * y).sum();
                            tail[col + pos[r - i0]] -= dot;
                        }
                    }
                }
                i0 = i1;
            }
        }
        let mut lx = vec![0.0; self.l_row.len()];
        for s in 0..self.sn_first.len().saturating_sub(1) {
            let (f, e) = (self.sn_first[s], self.sn_first[s + 1]);
            let m = self.l_ptr[f + 1] - self.l_ptr[f];
            let blk = &v[self.sn_off[s]..self.sn_off[s + 1]];
            for j in 0..e - f {
                let dst = self.l_ptr[f + j];
                lx[dst..dst + m - j].copy_from_slice(&blk[j * m + j..(j + 1) * m]);
            }
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            lx,
        })
    }
}

const GEMM_MIN_FLOPS: usize = 4096;
const SOLVE_CHUNK: usize = 16;

/// Dense Cholesky of the leading `w × w` block of an `m × w` column-major
/// panel, with the rows below scaled by the inverse transpose.
fn factor_panel(blk: &mut [f64], m: usize, w: usize, first: usize) -> Result<()> {
    for j in 0..w {
        let d = blk[j * m + j];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: first + j,
                value: d,
            });
        }
        let ljj = d.sqrt();
        blk[j * m + j] = ljj;
        for r in j + 1..m {
            blk[j * m + r] /= ljj;
        }
        let (done, rest) = blk.split_at_mut((j + 1) * m);
        let lj = &done[j * m..];
        for c in j + 1..w {
            let lcj = lj[c];
            if lcj != 0.0 {
                let col = &mut rest[(c - j - 1) * m..(c - j) * m];
                for r in c..m {
                    col[r] -= lj[r] * lcj;
                }
            }
        }
    }
    Ok(())
}

/// Numeric factor bound to its symbolic analysis.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    lx: Vec<f64>,
}

impl CholeskyFactor {
    /// One-shot analyze + factor.
    pub fn new(a: &CscMatrix) -> Result<Self> {
        SymbolicCholesky::analyze(a, Ordering::Amd)?.factor(a)
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// `log |A| = 2 Σ log L_jj`.
    pub fn log_det(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|j| self.lx[s.l_ptr[j]].ln()).sum::<f64>()
    }

    fn forward(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let xj = x[j] / self.lx[s.l_ptr[j]];
            x[j] = xj;
            if xj != 0.0 {
                for p in s.l_ptr[j] + 1..s.l_ptr[j + 1] {
                    x[s.l_row[p]] -= self.lx[p] * xj;
                }
            }
        }
    }

    fn backward(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let mut xj = x[j];
            for p in s.l_ptr[j] + 1..s.l_ptr[j + 1] {
                xj -= self.lx[p] * x[s.l_row[p]];
            }
            x[j] = xj / self.lx[s.l_ptr[j]];
        }
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        assert_eq!(b.len(), s.n);
        let mut x: Vec<f64> = s.perm.iter().map(|&p| b[p]).collect();
        self.forward(&mut x);
        self.backward(&mut x);
        let mut out = vec![0.0; s.n];
        for (k, &p) in s.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }

    /// Solve for several right-hand sides. Columns are processed in fixed
    /// chunks that share one pass over `L`; each result equals `solve`.
    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let chunks: Vec<&[Vec<f64>]> = rhs.chunks(SOLVE_CHUNK).collect();
        par::map_slice(&chunks, |c| self.solve_chunk(c))
            .into_iter()
            .flatten()
            .collect()
    }

    fn solve_chunk(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let s = &self.symbolic;
        let r = rhs.len();
        let mut x = vec![0.0; s.n * r];
        for (c, b) in rhs.iter().enumerate() {
            assert_eq!(b.len(), s.n);
            for (k, &p) in s.perm.iter().enumerate() {
                x[k * r + c] = b[p];
            }
        }
        let mut xj = [0.0; SOLVE_CHUNK];
        for j in 0..s.n {
            let ljj = self.lx[s.l_ptr[j]];
            for c in 0..r {
                x[j * r + c] /= ljj;
                xj[c] = x[j * r + c];
            }
            for p in s.l_ptr[j] + 1..s.l_ptr[j + 1] {
                let l = self.lx[p];
                let row = &mut x[s.l_row[p] * r..(s.l_row[p] + 1) * r];
                for c in 0..r {
                    row[c] -= l * xj[c];
                }
            }
        }
        for j in (0..s.n).rev() {
            xj[..r].copy_from_slice(&x[j * r..(j + 1) * r]);
            for p in s.l_ptr[j] + 1..s.l_ptr[j + 1] {
                let l = self.lx[p];
                let row = &x[s.l_row[p] * r..(s.l_row[p] + 1) * r];
                for c in 0..r {
                    xj[c] -= l * row[c];
                }
            }
            let ljj = self.lx[s.l_ptr[j]];
            for c in 0..r {
                x[j * r + c] = xj[c] / ljj;
            }
        }
        (0..r)
            .map(|c| {
                let mut out = vec![0.0; s.n];
                for (k, &p) in s.perm.iter().enumerate() {
                    out[p] = x[k * r + c];
                }
                out
            })
            .collect()
    }

    /// Takahashi recursion for the entries of `A⁻¹` on the pattern of `L`,
    /// one supernode panel at a time from the root down.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let s = &self.symbolic;
        let ns = s.sn_first.len().saturating_sub(1);
        let mut z = vec![0.0; s.sn_off.last().copied().unwrap_or(0)];
        let mut pos = Vec::new();
        for sn in (0..ns).rev() {
            let (f, w) = (s.sn_first[sn], s.sn_first[sn + 1] - s.sn_first[sn]);
            let m = s.l_ptr[f + 1] - s.l_ptr[f];
            let mb = m - w;
            let rows = &s.l_row[s.l_ptr[f]..s.l_ptr[f + 1]];
            let panel = DMatrix::from_fn(m, w, |r, j| {
                if r >= j {
                    self.lx[s.l_ptr[f + j] + r - j]
                } else {
                    0.0
                }
            });
            let ld = panel.rows(0, w).into_owned();
            let ld_inv = ld
                .solve_lower_triangular(&DMatrix::identity(w, w))
                .expect("factor diagonal is positive");
            let mut zdd = ld_inv.transpose() * &ld_inv;
            let (head, tail) = z.split_at_mut(s.sn_off[sn + 1]);
            let blk = &mut head[s.sn_off[sn]..];
            if mb > 0 {
                // U = L_B L_D⁻¹
                let u = panel.rows(w, mb) * &ld_inv;
                let mut zbb = DMatrix::zeros(mb, mb);
                let base = s.sn_off[sn + 1];
                let mut i0 = 0;
                while i0 < mb {
                    let t = s.col_super[rows[w + i0]];
                    let (ft, et) = (s.sn_first[t], s.sn_first[t + 1]);
                    let mut i1 = i0;
                    while i1 < mb && rows[w + i1] < et {
                        i1 += 1;
                    }
                    let trows = &s.l_row[s.l_ptr[ft]..s.l_ptr[ft + 1]];
                    let tm = trows.len();
                    pos.clear();
                    let mut q = 0;
                    for &r in &rows[w + i0..] {
                        while trows[q] != r {
                            q += 1;
                        }
                        pos.push(q);
                    }
                    let toff = s.sn_off[t] - base;
                    for c in i0..i1 {
                        let col = toff + (rows[w + c] - ft) * tm;
                        for r in c..mb {
                            let v = tail[col + pos[r - i0]];
                            zbb[(r, c)] = v;
                            zbb[(c, r)] = v;
                        }
                    }
                    i0 = i1;
                }
                let zbd = -(zbb * &u);
                zdd -= u.transpose() * &zbd;
                for j in 0..w {
                    for r in 0..mb {
                        blk[j * m + w + r] = zbd[(r, j)];
                    }
                }
            }
            for j in 0..w {
                for r in j..w {
                    blk[j * m + r] = 0.5 * (zdd[(r, j)] + zdd[(j, r)]);
                }
            }
        }
        let mut zx = vec![0.0; self.lx.len()];
        for sn in 0..ns {
            let (f, e) = (s.sn_first[sn], s.sn_first[sn + 1]);
            let m = s.l_ptr[f + 1] - s.l_ptr[f];
            let blk = &z[s.sn_off[sn]..s.sn_off[sn + 1]];
            for j in 0..e - f {
                let dst = s.l_ptr[f + j];
                zx[dst..dst + m - j].copy_from_slice(&blk[j * m + j..(j + 1) * m]);
            }
        }
        SelectedInverse {
            symbolic: Arc::clone(s),
            zx,
        }
    }

    /// `Pᵀ L⁻ᵀ z`: maps standard normal `z` to a draw with covariance `A⁻¹`.
    pub fn solve_lt_permuted(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        assert_eq!(z.len(), s.n);
        let mut u = z.to_vec();
        self.backward(&mut u);
        let mut out = vec![0.0; s.n];
        for (k, &p) in s.perm.iter().enumerate() {
            out[p] = u[k];
        }
        out
    }
}

/// Entries of `A⁻¹` on the nonzero pattern of `L + Lᵀ`.
///
/// Every pair of vertices sharing an entry of `A` is covered, so these are
/// enough for marginal variances and for traces `Tr(A⁻¹ M)` with `M` on the
/// pattern of `A`.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    symbolic: Arc<SymbolicCholesky>,
    zx: Vec<f64>,
}

impl SelectedInverse {
    fn slot(&self, pi: usize, pj: usize) -> Option<usize> {
        let s = &self.symbolic;
        let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        let rows = &s.l_row[s.l_ptr[c]..s.l_ptr[c + 1]];
        rows.binary_search(&r).ok().map(|k| s.l_ptr[c] + k)
    }

    /// `(A⁻¹)_ij` in original indexing, if `(i, j)` lies in the computed pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let s = &self.symbolic;
        self.slot(s.iperm[i], s.iperm[j]).map(|p| self.zx[p])
    }

    /// Diagonal of `A⁻¹` in original ordering.
    pub fn diag(&self) -> Vec<f64> {
        let s = &self.symbolic;
        (0..s.n).map(|i| self.zx[s.l_ptr[s.iperm[i]]]).collect()
    }

    /// `Tr(A⁻¹ M)` for symmetric `M` whose pattern lies inside that of `A`.
    pub fn trace_product(&self, m: &CscMatrix) -> Result<f64> {
        let mut acc = 0.0;
        for (i, j, v) in m.triplets() {
            let z = self.get(i, j).ok_or_else(|| {
                Error::Validation(format!("entry ({i}, {j}) outside the factor pattern"))
            })?;
            acc += v * z;
        }
        Ok(acc)
    }
}

fn amd_order(a: &CscMatrix) -> Result<Vec<usize>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let control = amd::Control::default();
    let (p, _pinv, _info) = amd::order::<usize>(n, a.col_ptr(), a.row_idx(), &control)
        .map_err(|status| Error::Numerical(format!("AMD ordering failed: {status:?}")))?;
    Ok(p)
}

fn block_amd_order(a: &CscMatrix, blocks: usize) -> Result<Vec<usize>> {
    let n = a.nrows();
    if blocks == 0 || !n.is_multiple_of(blocks) {
        return Err(Error::InvalidParameter(format!(
            "{n} rows do not split into {blocks} blocks"
        )));
    }
    let m = n / blocks;
    let trip: Vec<(usize, usize, f64)> =
        a.triplets().map(|(i, j, _)| (i % m, j % m, 1.0)).collect();
    let base = amd_order(&CscMatrix::from_triplets(m, m, &trip))?;
    Ok(base
        .iter()
        .flat_map(|&v| (0..blocks).map(move |b| b * m + v))
        .collect())
}

fn etree(n: usize, c_ptr: &[usize], c_row: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &c_row[c_ptr[k]..c_ptr[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L`, returned in `stack[top..n]` in an order
/// where every node precedes its elimination-tree ancestors.
fn ereach(
    k: usize,
    c_ptr: &[usize],
    c_row: &[usize],
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for &row in &c_row[c_ptr[k]..c_ptr[k + 1]] {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> CscMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.random::<f64>() < density {
                    b[(i, j)] = rng.random::<f64>() - 0.5;
                }
            }
        }
        let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
        CscMatrix::from_dense(&a, 0.0)
    }

    fn laplacian_2d(m: usize) -> CscMatrix {
        let idx = |r: usize, c: usize| r * m + c;
        let mut t = Vec::new();
        for r in 0..m {
            for c in 0..m {
                t.push((idx(r, c), idx(r, c), 4.1));
                if r + 1 < m {
                    t.push((idx(r, c), idx(r + 1, c), -1.0));
                    t.push((idx(r + 1, c), idx(r, c), -1.0));
                }
                if c + 1 < m {
                    t.push((idx(r, c), idx(r, c + 1), -1.0));
                    t.push((idx(r, c + 1), idx(r, c), -1.0));
                }
            }
        }
        CscMatrix::from_triplets(m * m, m * m, &t)
    }

    #[test]
    fn identity_log_det_is_zero() {
        let f = CholeskyFactor::new(&CscMatrix::identity(5)).unwrap();
        assert_eq!(f.log_det(), 0.0);
    }

    #[test]
    fn diagonal_log_det() {
        let f = CholeskyFactor::new(&CscMatrix::diagonal(&[2.0, 2.0, 2.0])).unwrap();
        assert!((f.log_det() - 3.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn random_spd_log_det_matches_eigenvalues() {
        let a = random_spd(20, 0.3, 7);
        let eig = a.to_dense().symmetric_eigen();
        let oracle: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        let f = CholeskyFactor::new(&a).unwrap();
        assert!(
            (f.log_det() - oracle).abs() < 1e-9,
            "{} vs {}",
            f.log_det(),
            oracle
        );
    }

    #[test]
    fn solves_match_dense() {
        for (seed, ordering) in [(1, Ordering::Amd), (2, Ordering::Natural)] {
            let a = random_spd(30, 0.1, seed);
            let f = SymbolicCholesky::analyze(&a, ordering)
                .unwrap()
                .factor(&a)
                .unwrap();
            let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&b);
            let r = a.mul_vec(&x);
            let err = r
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "residual {err}");
        }
    }

    #[test]
    fn symbolic_reuse_across_values() {
        let a = laplacian_2d(12);
        let sym = SymbolicCholesky::analyze(&a, Ordering::Amd).unwrap();
        for shift in [0.0, 1.0, 10.0] {
            let mut vals = a.values().to_vec();
            for j in 0..a.ncols() {
                let p = a.find(j, j).unwrap();
                vals[p] += shift;
            }
            let b = a.with_values(vals);
            let f = sym.factor(&b).unwrap();
            let dense = b.to_dense().cholesky().unwrap();
            let oracle: f64 = 2.0 * dense.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            assert!((f.log_det() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn amd_reduces_fill_on_grid() {
        let a = laplacian_2d(30);
        let nat = SymbolicCholesky::analyze(&a, Ordering::Natural).unwrap();
        let amd = SymbolicCholesky::analyze(&a, Ordering::Amd).unwrap();
        assert!(amd.nnz_l() < nat.nnz_l());
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a =
            CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(
            CholeskyFactor::new(&a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn pattern_mismatch_is_rejected() {
        let a = laplacian_2d(4);
        let sym = SymbolicCholesky::analyze(&a, Ordering::Amd).unwrap();
        assert!(sym.factor(&CscMatrix::identity(16)).is_err());
    }

    #[test]
    fn block_solve_equals_single_solves() {
        let a = random_spd(60, 0.1, 8);
        let f = CholeskyFactor::new(&a).unwrap();
        let rhs: Vec<Vec<f64>> = (0..37)
            .map(|s| {
                (0..60)
                    .map(|i| ((i * 7 + s * 3) % 11) as f64 - 5.0)
                    .collect()
            })
            .collect();
        let many = f.solve_many(&rhs);
        for (b, x) in rhs.iter().zip(&many) {
            assert_eq!(&f.solve(b), x);
        }
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        let a = random_spd(25, 0.15, 5);
        let f = CholeskyFactor::new(&a).unwrap();
        let z = f.selected_inverse();
        let inv = a.to_dense().try_inverse().unwrap();
        for (i, j, _) in a.triplets() {
            assert!((z.get(i, j).unwrap() - inv[(i, j)]).abs() < 1e-10);
        }
        for (i, d) in z.diag().iter().enumerate() {
            assert!((d - inv[(i, i)]).abs() < 1e-10);
        }
        let tr = z.trace_product(&a).unwrap();
        assert!((tr - 25.0).abs() < 1e-9);
    }

    #[test]
    fn factor_transpose_solve_reproduces_covariance() {
        // Pᵀ L⁻ᵀ applied to the identity gives M with M Mᵀ = A⁻¹.
        let a = random_spd(12, 0.3, 11);
        let f = CholeskyFactor::new(&a).unwrap();
        let n = 12;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = f.solve_lt_permuted(&e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        let cov = &m * m.transpose();
        let inv = a.to_dense().try_inverse().unwrap();
        assert!((cov - inv).abs().max() < 1e-10);
    }
}
