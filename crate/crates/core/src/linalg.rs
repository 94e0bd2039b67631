//! Dense symmetric positive-definite linear algebra.
//!
//! Matrices are `nalgebra` dense matrices. The Cholesky factorization is
//! written out here so that failures report the offending pivot; triangular
//! solves and the symmetric eigensolver come from `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking symmetry of inputs.
const SYMMETRY_TOL: f64 = 1e-10;

/// Lower Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CholFactor {
    #[serde(with = "matrix_rows")]
    lower: DMatrix<f64>,
}

/// Returns true when `a` is square and symmetric to `SYMMETRY_TOL` (relative to its largest entry).
pub fn is_symmetric(a: &DMatrix<f64>) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return false;
            }
        }
    }
    true
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read. A pivot that is not strictly
/// positive (relative to the original diagonal entry) yields
/// [`Error::NotPositiveDefinite`] carrying the 1-based pivot index.
pub fn cholesky(a: &DMatrix<f64>) -> Result<CholFactor> {
    if !is_symmetric(a) {
        return Err(Error::NotSymmetric);
    }
    cholesky_unchecked(a)
}

/// Same as [`cholesky`] without the O(n²) symmetry check; used on matrices
/// that are symmetric by construction.
pub(crate) fn cholesky_unchecked(a: &DMatrix<f64>) -> Result<CholFactor> {
    let n = a.nrows();
    // column-major storage: column k occupies data[k*n..(k+1)*n]
    let mut data = vec![0.0; n * n];
    for j in 0..n {
        let (done, rest) = data.split_at_mut(j * n);
        let col = &mut rest[..n];
        for i in j..n {
            col[i] = a[(i, j)];
        }
        for k in 0..j {
            let prev = &done[k * n..(k + 1) * n];
            let ljk = prev[j];
            if ljk == 0.0 {
                continue;
            }
            for (c, p) in col[j..].iter_mut().zip(&prev[j..]) {
                *c -= ljk * p;
            }
        }
        let pivot = col[j];
        let threshold = f64::EPSILON * a[(j, j)].abs();
        if !pivot.is_finite() || pivot <= threshold {
            return Err(Error::NotPositiveDefinite { pivot: j + 1 });
        }
        let d = pivot.sqrt();
        col[j] = d;
        for c in col[(j + 1)..].iter_mut() {
            *c /= d;
        }
    }
    Ok(CholFactor {
        lower: DMatrix::from_vec(n, n, data),
    })
}

impl CholFactor {
    /// Size of the factorized matrix.
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: rows,
            });
        }
        Ok(())
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(b.len())?;
        let y = self.solve_lower(b)?;
        Ok(self
            .lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky diagonal is strictly positive"))
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(b.nrows())?;
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive");
        Ok(self
            .lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky diagonal is strictly positive"))
    }

    /// Solves `L y = b` (half solve, used for quadratic forms `bᵀ A⁻¹ b = ‖y‖²`).
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(b.len())?;
        Ok(self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive"))
    }

    /// `log |A| = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solves `A x = b` through a Cholesky factor.
pub fn solve_spd(factor: &CholFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    factor.solve(b)
}

pub fn logdet(factor: &CholFactor) -> f64 {
    factor.logdet()
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending and the
/// eigenvectors as the matching columns of the returned matrix.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !is_symmetric(a) {
        return Err(Error::NotSymmetric);
    }
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Serializes a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}
