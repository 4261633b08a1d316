//! Compressed sparse row matrices for the difference stencils, plus thin
//! wrappers around faer's sparse LU and QR for the Newton systems.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from (row, col, value) entries; duplicates are summed
    /// and exact zeros dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        let mut rows = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                cols.push(c);
                vals.push(v);
                last = Some((r, c));
            }
        }
        let mut keep_cols = Vec::with_capacity(cols.len());
        let mut keep_vals = Vec::with_capacity(vals.len());
        for ((r, c), v) in rows.into_iter().zip(cols).zip(vals) {
            if v != 0.0 {
                row_ptr[r + 1] += 1;
                keep_cols.push(c);
                keep_vals.push(v);
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { nrows, ncols, row_ptr, cols: keep_cols, vals: keep_vals }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self::from_triplets(d.len(), d.len(), d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Csr { nrows, ncols, row_ptr: vec![0; nrows + 1], cols: vec![], vals: vec![] }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `Σ_j a_ij (x_j − x_i)`: equals `matvec` for operators whose rows sum
    /// to zero, and returns exact zeros on constant vectors.
    pub fn matvec_centered(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * (x[j] - x[i])).sum()).collect()
    }

    pub fn matmul(&self, other: &Csr) -> Csr {
        assert_eq!(self.ncols, other.nrows);
        let mut entries = Vec::new();
        for i in 0..self.nrows {
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    entries.push((i, j, a * b));
                }
            }
        }
        Csr::from_triplets(self.nrows, other.ncols, entries)
    }

    /// `diag(s) * self`.
    pub fn row_scaled(&self, s: &[f64]) -> Csr {
        assert_eq!(s.len(), self.nrows);
        let mut out = self.clone();
        for i in 0..self.nrows {
            for v in &mut out.vals[self.row_ptr[i]..self.row_ptr[i + 1]] {
                *v *= s[i];
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Csr {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Sum of `diag(c_k) * A_k` over the given terms.
    pub fn weighted_sum(nrows: usize, ncols: usize, terms: &[(&[f64], &Csr)]) -> Csr {
        let mut entries = Vec::new();
        for (c, a) in terms {
            assert_eq!((a.nrows, a.ncols), (nrows, ncols));
            for i in 0..nrows {
                if c[i] != 0.0 {
                    entries.extend(a.row(i).map(|(j, v)| (i, j, c[i] * v)));
                }
            }
        }
        Csr::from_triplets(nrows, ncols, entries)
    }

    pub fn add(&self, other: &Csr) -> Csr {
        let mut e = self.triplets();
        e.extend(other.triplets());
        Csr::from_triplets(self.nrows, self.ncols, e)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let t: Vec<_> = self.triplets().into_iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| Error::SingularLinearization(format!("matrix assembly failed: {e:?}")))
    }
}

fn col_from(b: &[f64]) -> Col<f64> {
    Col::from_fn(b.len(), |i| b[i])
}

fn finite_or_singular(x: Col<f64>, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = (0..x.nrows()).map(|i| x[i]).collect();
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::SingularLinearization(format!("{what} produced non-finite values")))
    }
}

/// Solves the square system `a x = b` by sparse LU with partial pivoting.
pub fn solve(a: &Csr, b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.nrows, a.ncols);
    let m = a.to_faer()?;
    let lu = m.sp_lu().map_err(|e| Error::SingularLinearization(format!("LU failed: {e:?}")))?;
    let x = lu.solve(&col_from(b));
    let x = finite_or_singular(x, "LU solve")?;
    // One step of iterative refinement guards against pivot growth.
    let r: Vec<f64> = a.matvec(&x).iter().zip(b).map(|(ax, bi)| bi - ax).collect();
    let dx = finite_or_singular(lu.solve(&col_from(&r)), "LU refinement")?;
    Ok(x.iter().zip(dx).map(|(a, b)| a + b).collect())
}

/// Least-squares solution of the tall system `a x ≈ b` by sparse QR.
pub fn lstsq(a: &Csr, b: &[f64]) -> Result<Vec<f64>> {
    assert!(a.nrows >= a.ncols);
    let m = a.to_faer()?;
    let qr = m.sp_qr().map_err(|e| Error::SingularLinearization(format!("QR failed: {e:?}")))?;
    let x = qr.solve_lstsq(&col_from(b));
    finite_or_singular(x, "QR solve")
}

/// Stacks matrices with equal column counts.
pub fn vstack(blocks: &[&Csr]) -> Csr {
    let ncols = blocks[0].ncols;
    let mut entries = Vec::new();
    let mut off = 0;
    for b in blocks {
        assert_eq!(b.ncols, ncols);
        entries.extend(b.triplets().into_iter().map(|(i, j, v)| (i + off, j, v)));
        off += b.nrows;
    }
    Csr::from_triplets(off, ncols, entries)
}

/// Bordered matrix `[[a, col], [row^T, 0]]`.
pub fn bordered(a: &Csr, col: &[f64], row: &[f64]) -> Csr {
    let n = a.nrows;
    let mut e = a.triplets();
    e.extend(col.iter().enumerate().map(|(i, &v)| (i, n, v)));
    e.extend(row.iter().enumerate().map(|(j, &v)| (n, j, v)));
    Csr::from_triplets(n + 1, a.ncols + 1, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Csr {
        Csr::from_triplets(3, 3, vec![(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0), (2, 2, 2.0), (2, 2, 0.5)])
    }

    #[test]
    fn duplicates_are_summed() {
        let a = small();
        assert_eq!(a.to_dense()[2][2], 2.5);
        assert_eq!(a.nnz(), 5);
    }

    #[test]
    fn matvec_and_matmul_agree() {
        let a = small();
        let x = [1.0, -2.0, 0.5];
        let ax = a.matvec(&x);
        let aax = a.matvec(&ax);
        assert_eq!(a.matmul(&a).matvec(&x), aax);
    }

    #[test]
    fn lu_solves_system() {
        let a = small();
        let b = [1.0, 2.0, 3.0];
        let x = solve(&a, &b).unwrap();
        let r = a.matvec(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn lstsq_of_consistent_tall_system() {
        let a = vstack(&[&small(), &Csr::identity(3)]);
        let x0 = [0.3, -0.1, 2.0];
        let b = a.matvec(&x0);
        let x = lstsq(&a, &b).unwrap();
        for i in 0..3 {
            assert!((x[i] - x0[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn centered_matvec_kills_constants() {
        let d = Csr::from_triplets(2, 2, vec![(0, 0, -0.1), (0, 1, 0.1), (1, 0, 0.3), (1, 1, -0.3)]);
        assert_eq!(d.matvec_centered(&[1.7, 1.7]), vec![0.0, 0.0]);
        let x = [0.25, -1.0];
        let (a, b) = (d.matvec(&x), d.matvec_centered(&x));
        assert!((a[0] - b[0]).abs() < 1e-16 && (a[1] - b[1]).abs() < 1e-16);
    }

    #[test]
    fn weighted_sum_scales_rows() {
        let a = small();
        let c = [2.0, 0.0, 1.0];
        let s = Csr::weighted_sum(3, 3, &[(&c, &a)]);
        assert_eq!(s.to_dense()[0][1], 2.0);
        assert_eq!(s.to_dense()[1][1], 0.0);
    }
}
