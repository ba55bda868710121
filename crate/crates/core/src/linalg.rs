//! Dense symmetric-matrix helpers shared by the back-end modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue floor for whitening and symmetric matrix roots.
pub const ROOT_FLOOR_REL: f64 = 1e-10;

/// Replaces `a` by `(a + a^T) / 2`. The result is exactly symmetric.
pub fn symmetrize(a: &mut Matrix) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut a: Matrix) -> Matrix {
    symmetrize(&mut a);
    a
}

pub fn mean_diag(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.trace() / a.nrows() as f64
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
///
/// Eigenvector signs are fixed so the largest-magnitude entry of each column is
/// positive, which makes the output independent of solver sign conventions.
pub fn sym_eigen(a: &Matrix) -> (Vector, Matrix) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrized(a.clone()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// `U diag(f(λ)) U^T` for symmetric `a`.
pub fn sym_map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let (values, vectors) = sym_eigen(a);
    let scaled = Matrix::from_fn(a.nrows(), a.ncols(), |i, j| vectors[(i, j)] * f(values[j]));
    symmetrized(&scaled * vectors.transpose())
}

fn check_spd_floor(a: &Matrix, what: &str) -> Result<(Vector, Matrix, f64)> {
    let (values, vectors) = sym_eigen(a);
    let floor = ROOT_FLOOR_REL * mean_diag(a).abs();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > floor) || !min.is_finite() {
        return Err(Error::Numerical(format!(
            "{what} is not positive definite: smallest eigenvalue {min:.3e} <= floor {floor:.3e}"
        )));
    }
    Ok((values, vectors, floor))
}

/// Symmetric square root `A^{1/2}` of an SPD matrix.
pub fn spd_sqrt(a: &Matrix) -> Result<Matrix> {
    let (values, vectors, _) = check_spd_floor(a, "matrix")?;
    Ok(reassemble(&values, &vectors, f64::sqrt))
}

/// Symmetric inverse square root `A^{-1/2}` of an SPD matrix.
pub fn spd_inv_sqrt(a: &Matrix) -> Result<Matrix> {
    let (values, vectors, _) = check_spd_floor(a, "matrix")?;
    Ok(reassemble(&values, &vectors, |v| 1.0 / v.sqrt()))
}

fn reassemble(values: &Vector, vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = values.len();
    let scaled = Matrix::from_fn(n, n, |i, j| vectors[(i, j)] * f(values[j]));
    symmetrized(&scaled * vectors.transpose())
}

/// Adds `rel * trace/d` to the diagonal when the smallest eigenvalue falls below it.
/// Returns true if the floor was applied.
pub fn floor_spd(a: &mut Matrix, rel: f64) -> bool {
    symmetrize(a);
    let floor = rel * mean_diag(a).abs().max(f64::MIN_POSITIVE);
    let (values, _) = sym_eigen(a);
    if values.iter().any(|&v| v < floor) {
        for i in 0..a.nrows() {
            a[(i, i)] += floor;
        }
        true
    } else {
        false
    }
}

/// Inverse of an SPD matrix through Cholesky, symmetrized.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Cholesky factorization failed".into()))?;
    Ok(symmetrized(chol.inverse()))
}

/// Log-determinant of an SPD matrix.
pub fn spd_logdet(a: &Matrix) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Cholesky factorization failed".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖_F / ‖b‖_F` (absolute when `b` is zero).
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = frobenius(&(a - b));
    let denom = frobenius(b);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// True when every eigenvalue is at least `-tol_rel * |trace|/d`.
pub fn is_psd(a: &Matrix, tol_rel: f64) -> bool {
    let tol = tol_rel * mean_diag(a).abs();
    sym_eigen(a).0.iter().all(|&v| v >= -tol)
}

pub fn is_exactly_symmetric(a: &Matrix) -> bool {
    a.is_square() && (0..a.nrows()).all(|i| (0..i).all(|j| a[(i, j)] == a[(j, i)]))
}

/// Unbiased sample mean and covariance of the rows of `rows`.
pub fn mean_and_cov<'a, I>(rows: I, dim: usize) -> (Vector, Matrix, usize)
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut mean = Vector::zeros(dim);
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        n += 1;
    }
    if n > 0 {
        mean /= n as f64;
    }
    let mut cov = Matrix::zeros(dim, dim);
    let mut c = Vector::zeros(dim);
    for r in rows {
        for k in 0..dim {
            c[k] = r[k] - mean[k];
        }
        cov.ger(1.0, &c, &c, 1.0);
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    symmetrize(&mut cov);
    (mean, cov, n)
}


/// Serde adapter storing a square matrix as a flat row-major array.
pub mod serde_row_major {
    use super::Matrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        let n = (flat.len() as f64).sqrt().round() as usize;
        if n * n != flat.len() {
            return Err(D::Error::custom(format!("{} entries is not a square matrix", flat.len())));
        }
        Ok(Matrix::from_row_slice(n, n, &flat))
    }
}
