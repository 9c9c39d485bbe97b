//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// `(J + Jᵀ) / 2`.
pub fn symmetric_part(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !j.is_square() {
        return Err(Error::NonSquare {
            rows: j.nrows(),
            cols: j.ncols(),
        });
    }
    Ok((j + j.transpose()) * 0.5)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// ascending and eigenvector columns permuted to match.
pub fn sorted_symmetric_eigen(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s.clone());
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Largest singular value.
pub fn spectral_norm(j: &DMatrix<f64>) -> f64 {
    if j.nrows() == 2 && j.ncols() == 2 {
        // closed form avoids the iterative SVD on the hot path
        let (a, b, c, d) = (j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)]);
        let fro2 = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
        return ((fro2 + disc) * 0.5).sqrt();
    }
    j.clone().singular_values().max()
}

/// Orthonormal basis of the orthogonal complement of `v`, as the columns of
/// an `n × (n-1)` matrix. In the plane this is `v` rotated by +90°.
pub fn complement_basis(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let norm = v.norm();
    let u = v / norm;
    if n == 2 {
        return DMatrix::from_column_slice(2, 1, &[-u[1], u[0]]);
    }
    // Householder reflector mapping e_1 to ±u; its remaining columns span u⊥.
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = u.clone();
    w[0] += sign;
    let wn2 = w.norm_squared();
    let h = DMatrix::<f64>::identity(n, n) - (&w * w.transpose()) * (2.0 / wn2);
    h.columns(1, n - 1).into_owned()
}

/// Component of `v` orthogonal to `n` (which need not be normalised).
pub fn reject(v: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
    let nn = n.norm_squared();
    if nn == 0.0 {
        return v.clone();
    }
    v - n * (v.dot(n) / nn)
}
