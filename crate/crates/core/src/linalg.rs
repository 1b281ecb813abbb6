//! Thin sparse/dense linear algebra layer over `faer`.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Coordinate-format accumulator. Duplicate entries are summed on `build`.
#[derive(Clone, Debug)]
pub struct Coo {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, C64)>,
}

impl Coo {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Coo { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Coo { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn push(&mut self, r: usize, c: usize, v: C64) {
        debug_assert!(r < self.nrows && c < self.ncols);
        if v != ZERO {
            self.entries.push((r, c, v));
        }
    }

    pub fn build(mut self) -> Csr {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<C64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { nrows: self.nrows, ncols: self.ncols, row_ptr, cols, vals }
    }
}

/// Compressed sparse row matrix used for assembly and matrix-vector products.
#[derive(Clone, Debug)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<C64>,
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// y = A^H x
    pub fn matvec_adjoint(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![ZERO; self.ncols];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                y[j] += v.conj() * x[i];
            }
        }
        y
    }

    /// Hermitian form x^H A y.
    pub fn form(&self, x: &[C64], y: &[C64]) -> C64 {
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn to_faer(&self) -> Result<SparseColMat<usize, C64>> {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                trip.push(Triplet::new(i, j, v));
            }
        }
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &trip)
            .map_err(|e| Error::Solver(format!("sparse construction: {e:?}")))
    }

    pub fn to_dense(&self) -> Mat<C64> {
        let mut m = Mat::<C64>::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Sub-matrix with the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Csr {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            map[c] = k;
        }
        let mut coo = Coo::new(rows.len(), cols.len());
        for (ri, &r) in rows.iter().enumerate() {
            for (j, v) in self.row(r) {
                if map[j] != usize::MAX {
                    coo.push(ri, map[j], v);
                }
            }
        }
        coo.build()
    }

    pub fn scale(&self, s: C64) -> Csr {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Maximum absolute entry, used for relative tolerances.
    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Factorized sparse square matrix.
pub struct SparseLu {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, C64>,
}

impl SparseLu {
    pub fn new(a: &Csr) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::Solver("LU of a non-square matrix".into()));
        }
        let lu = a
            .to_faer()?
            .sp_lu()
            .map_err(|e| Error::Solver(format!("sparse LU failed: {e:?}")))?;
        Ok(SparseLu { n: a.nrows, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut m = Mat::<C64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(m.as_mut());
        (0..self.n).map(|i| m[(i, 0)]).collect()
    }

    pub fn solve_many(&self, b: &Mat<C64>) -> Mat<C64> {
        let mut m = b.clone();
        self.lu.solve_in_place(m.as_mut());
        m
    }
}

/// Solve `a x = b` and refuse non-finite or poorly satisfied results.
pub fn solve_checked(a: &Csr, b: &[C64], what: &str) -> Result<Vec<C64>> {
    let lu = SparseLu::new(a)?;
    let x = lu.solve(b);
    check_residual(a, &x, b, what)?;
    Ok(x)
}

pub fn check_residual(a: &Csr, x: &[C64], b: &[C64], what: &str) -> Result<f64> {
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Solver(format!("{what}: non-finite solution")));
    }
    let r = a.matvec(x);
    let rn = norm2(&r.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
    let scale = a.max_abs() * norm2(x) + norm2(b);
    let rel = if scale > 0.0 { rn / scale } else { 0.0 };
    if rel > 1e-8 {
        return Err(Error::Solver(format!(
            "{what}: relative residual {rel:.3e}, system is close to singular"
        )));
    }
    Ok(rel)
}

pub fn norm2(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dot(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Largest eigenvalue of the Hermitian pencil `A x = lambda B x`, with `B` positive definite.
pub fn max_generalized_eig(a: &Mat<C64>, b: &Mat<C64>) -> Result<f64> {
    let n = a.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let llt = b
        .llt(faer::Side::Lower)
        .map_err(|_| Error::Solver("Gram matrix is not positive definite".into()))?;
    let l = llt.L().to_owned();
    // C = L^{-1} A L^{-H}
    let mut t = a.clone();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(
        l.as_ref(),
        t.as_mut(),
        faer::Par::Seq,
    );
    let mut c = t.adjoint().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(
        l.as_ref(),
        c.as_mut(),
        faer::Par::Seq,
    );
    let herm = Mat::<C64>::from_fn(n, n, |i, j| (c[(i, j)] + c[(j, i)].conj()) * 0.5);
    let ev = herm
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Solver(format!("eigensolver: {e:?}")))?;
    Ok(ev.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Eigenvalues of a real symmetric dense matrix in ascending order.
pub fn symmetric_eigenvalues(a: &Mat<f64>) -> Result<Vec<f64>> {
    let mut ev = a
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Solver(format!("eigensolver: {e:?}")))?;
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let mut c = Coo::new(2, 2);
        c.push(0, 0, ONE);
        c.push(0, 0, ONE);
        c.push(1, 1, ONE * 3.0);
        let a = c.build();
        assert_eq!(a.nnz(), 2);
        let x = a.matvec(&[ONE, ONE]);
        assert_eq!(x, vec![ONE * 2.0, ONE * 3.0]);
    }

    #[test]
    fn lu_solves_small_system() {
        let mut c = Coo::new(3, 3);
        for i in 0..3 {
            c.push(i, i, C64::new(4.0, 1.0));
            if i > 0 {
                c.push(i, i - 1, C64::new(-1.0, 0.0));
                c.push(i - 1, i, C64::new(-1.0, 0.5));
            }
        }
        let a = c.build();
        let b = vec![ONE, I, ONE * 2.0];
        let x = solve_checked(&a, &b, "test").unwrap();
        let r = a.matvec(&x);
        for (p, q) in r.iter().zip(&b) {
            assert!((p - q).norm() < 1e-13);
        }
    }

    #[test]
    fn generalized_eig_matches_diagonal_case() {
        let a = Mat::<C64>::from_fn(3, 3, |i, j| if i == j { ONE * (i as f64 + 1.0) } else { ZERO });
        let b = Mat::<C64>::from_fn(3, 3, |i, j| if i == j { ONE * 2.0 } else { ZERO });
        let m = max_generalized_eig(&a, &b).unwrap();
        assert!((m - 1.5).abs() < 1e-13);
    }
}
