//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (Cholesky failed)")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Result of a generalized symmetric eigendecomposition `K phi = w^2 M phi`.
///
/// Eigenvalues are ascending. `vectors.column(j)` is the eigenvector for
/// `eigenvalues[j]`, normalized so that `Phi^T M Phi = I`.
#[derive(Debug, Clone)]
pub struct GeneralizedEigen {
    /// `w^2` values, ascending.
    pub eigenvalues: DVector<f64>,
    /// M-orthonormal eigenvectors, one per column.
    pub vectors: DMatrix<f64>,
}

impl GeneralizedEigen {
    /// Angular frequencies `w_j = sqrt(max(lambda_j, 0))`.
    pub fn frequencies(&self) -> DVector<f64> {
        self.eigenvalues.map(|l| l.max(0.0).sqrt())
    }
}

/// Dense symmetric eigendecomposition with ascending eigenvalues.
///
/// Returns `(eigenvalues, vectors)` with orthonormal `vectors` columns.
pub fn symmetric_eigen_ascending(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("NaN eigenvalue")
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Generalized symmetric eigendecomposition `K phi = lambda M phi` with
/// symmetric `K` and symmetric positive definite `M`.
///
/// Reduces to a standard symmetric problem through the Cholesky factor
/// `M = L L^T`: the matrix `L^-1 K L^-T` has the same eigenvalues, and its
/// eigenvectors `y` map back through `phi = L^-T y`, which makes the
/// returned columns M-orthonormal.
pub fn generalized_symmetric_eigen(
    k: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<GeneralizedEigen, LinalgError> {
    let n = k.nrows();
    if k.ncols() != n || m.nrows() != n || m.ncols() != n {
        return Err(LinalgError::Dimension(format!(
            "K is {}x{}, M is {}x{}",
            k.nrows(),
            k.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    let chol = Cholesky::new(m.clone()).ok_or(LinalgError::NotPositiveDefinite)?;
    let l = chol.l();
    // B = L^-1 K L^-T by two triangular solves.
    let mut b = k.clone();
    l.solve_lower_triangular_mut(&mut b);
    b.transpose_mut();
    l.solve_lower_triangular_mut(&mut b);
    // Re-symmetrize to wash out round-off before the symmetric solver.
    let b = (&b + b.transpose()) * 0.5;
    let (values, y) = symmetric_eigen_ascending(&b);
    let mut vectors = y;
    l.transpose().solve_upper_triangular_mut(&mut vectors);
    Ok(GeneralizedEigen {
        eigenvalues: values,
        vectors,
    })
}
