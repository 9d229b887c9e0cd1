//! Small dense helpers over row-major `f64` slices, backed by nalgebra.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn to_matrix(a: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, a)
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `(A + Aᵀ)/2` in place.
pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
}

/// `A·B` for `A: r×k`, `B: k×c`.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let ail = a[i * k + l];
            for j in 0..c {
                out[i * c + j] += ail * b[l * c + j];
            }
        }
    }
    out
}

/// `A·Aᵀ` for `A: r×c`.
pub fn outer_self(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            out[i * r + j] = (0..c).map(|l| a[i * c + l] * a[j * c + l]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn mat_vec(a: &[f64], x: &[f64], r: usize, c: usize) -> Vec<f64> {
    (0..r).map(|i| (0..c).map(|j| a[i * c + j] * x[j]).sum()).collect()
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(a: &[f64], n: usize) -> (f64, f64) {
    if n == 1 {
        return (a[0], a[0]);
    }
    let e = to_matrix(a, n, n).symmetric_eigenvalues();
    (e.min(), e.max())
}

/// Spectral inverse square root of an SPD matrix.
pub fn inv_sqrt_spd(a: &[f64], n: usize, node: usize) -> Result<Vec<f64>> {
    if n == 1 {
        return if a[0] > 0.0 {
            Ok(vec![1.0 / libm::sqrt(a[0])])
        } else {
            Err(Error::NotPositiveDefinite { node, min_eigenvalue: a[0] })
        };
    }
    let eig = to_matrix(a, n, n).symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite { node, min_eigenvalue: min });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / libm::sqrt(l)));
    let v = &eig.eigenvectors;
    Ok(to_rows(&(v * d * v.transpose())))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn inv_spd(a: &[f64], n: usize, node: usize) -> Result<Vec<f64>> {
    if n == 1 {
        return if a[0] > 0.0 {
            Ok(vec![1.0 / a[0]])
        } else {
            Err(Error::NotPositiveDefinite { node, min_eigenvalue: a[0] })
        };
    }
    match to_matrix(a, n, n).cholesky() {
        Some(c) => Ok(to_rows(&c.inverse())),
        None => Err(Error::NotPositiveDefinite {
            node,
            min_eigenvalue: eigen_range(a, n).0,
        }),
    }
}

/// Solves `A x = b` for SPD `A`; `None` if the factorization fails.
pub fn solve_spd(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let c = to_matrix(a, n, n).cholesky()?;
    Some(c.solve(&DVector::from_column_slice(b)).as_slice().to_vec())
}

/// Moore–Penrose pseudo-inverse of an `r×c` matrix.
pub fn pseudo_inverse(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let m = to_matrix(a, r, c);
    match m.clone().pseudo_inverse(1e-12) {
        Ok(p) => to_rows(&p),
        Err(_) => vec![0.0; r * c],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_square_root_whitens() {
        let q = [2.0, 0.5, 0.5, 1.0];
        let s = inv_sqrt_spd(&q, 2, 0).unwrap();
        let w = matmul(&matmul(&s, &q, 2, 2, 2), &transpose(&s, 2, 2), 2, 2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((w[i * 2 + j] - id).abs() < 1e-12);
            }
        }
        let inv = inv_spd(&q, 2, 0).unwrap();
        let id = matmul(&inv, &q, 2, 2, 2);
        assert!((id[0] - 1.0).abs() < 1e-12 && id[1].abs() < 1e-12);
    }

    #[test]
    fn indefinite_is_reported() {
        match inv_sqrt_spd(&[1.0, 2.0, 2.0, 1.0], 2, 7) {
            Err(Error::NotPositiveDefinite { node: 7, min_eigenvalue }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        assert!(solve_spd(&[0.0], 1, &[1.0]).is_none());
    }

    #[test]
    fn eigen_range_of_diagonal() {
        assert_eq!(eigen_range(&[3.0], 1), (3.0, 3.0));
        let (lo, hi) = eigen_range(&[1.0, 0.0, 0.0, 4.0], 2);
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 4.0).abs() < 1e-12);
    }
}
