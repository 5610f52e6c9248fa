//! Thin wrappers around nalgebra's dense factorizations.
//!
//! Data lives in `ndarray` containers everywhere else in the crate; this
//! module converts at the boundary and keeps the factorization objects for
//! repeated solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

fn to_dmatrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().cloned())
}

fn to_dvector(v: ArrayView1<'_, f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().cloned())
}

/// Cholesky factor of a symmetric positive-definite matrix, reusable across
/// many right-hand sides.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl SpdFactor {
    /// Factorize `a`. Fails if `a` is not positive definite.
    pub fn new(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix must be square, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let chol = Cholesky::new(to_dmatrix(a)).ok_or_else(|| {
            Error::Numerical("Cholesky factorization failed (matrix not positive definite)".into())
        })?;
        Ok(Self { chol, dim: n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_vec(&self, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if b.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "rhs length {} does not match factor dimension {}",
                b.len(),
                self.dim
            )));
        }
        let x = self.chol.solve(&to_dvector(b));
        Ok(Array1::from_iter(x.iter().cloned()))
    }

    /// Solve with a matrix right-hand side, column by column.
    pub fn solve_mat(&self, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if b.nrows() != self.dim {
            return Err(Error::InvalidInput(format!(
                "rhs rows {} do not match factor dimension {}",
                b.nrows(),
                self.dim
            )));
        }
        let x = self.chol.solve(&to_dmatrix(b.view()));
        let mut out = Array2::zeros((b.nrows(), b.ncols()));
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                out[[i, j]] = x[(i, j)];
            }
        }
        Ok(out)
    }
}

/// One-shot symmetric positive-definite solve.
pub fn spd_solve(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    SpdFactor::new(a)?.solve_vec(b)
}

/// Eigendecomposition of a symmetric matrix; returns (eigenvalues, column eigenvectors).
pub fn sym_eigen(a: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidInput("matrix must be square".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(to_dmatrix(a));
    let values = Array1::from_iter(eig.eigenvalues.iter().cloned());
    let mut vectors = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            vectors[[i, j]] = eig.eigenvectors[(i, j)];
        }
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let x = spd_solve(a.view(), b.view()).unwrap();
        // residual check
        let r0 = 4.0 * x[0] + 1.0 * x[1] - 1.0;
        let r1 = 1.0 * x[0] + 3.0 * x[1] - 2.0;
        assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, -1
        assert!(SpdFactor::new(a.view()).is_err());
    }

    #[test]
    fn eigen_recovers_diagonal() {
        let a = array![[2.0, 0.0], [0.0, 5.0]];
        let (vals, _) = sym_eigen(a.view()).unwrap();
        let mut v: Vec<f64> = vals.to_vec();
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!((v[1] - 5.0).abs() < 1e-12);
    }
}
