//! Small dense helpers: symmetric matrix functions on top of nalgebra, and
//! allocation-free Cholesky kernels on row-major slices for the inner loops.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Applies `f` to the eigenvalues of the symmetric part of `a`.
pub fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let vals = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Principal square root of a PSD matrix; negative eigenvalues (rounding) are clipped to zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |x| x.max(0.0).sqrt())
}

pub fn sym_inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lo = min_eigenvalue(a);
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "inverse square root needs a PD matrix (min eigenvalue {lo:.3e})"
        )));
    }
    Ok(sym_apply(a, |x| 1.0 / x.sqrt()))
}

pub fn sym_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(a)).eigenvalues
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).min()
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).max()
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Projects a symmetric matrix onto `{X : X ⪰ floor·I}`.
pub fn clip_psd(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(a, |x| x.max(floor))
}

/// Row-major k×k slice view to nalgebra.
pub fn from_row_major(k: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, k, data)
}

pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// In-place Cholesky of a row-major n×n SPD matrix; the lower factor
/// overwrites the lower triangle. Returns false if a pivot is not positive.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= a[j * n + p] * a[j * n + p];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves L x = b in place (L lower, row-major).
pub fn forward_subst(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves Lᵀ x = b in place.
pub fn backward_subst_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in (i + 1)..n {
            s -= l[p * n + i] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
}

/// y = L x for lower-triangular row-major L.
pub fn lower_mul(l: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for p in 0..=i {
            s += l[i * n + p] * x[p];
        }
        y[i] = s;
    }
}

/// y = Lᵀ x for lower-triangular row-major L.
pub fn lower_t_mul(l: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for p in i..n {
            s += l[p * n + i] * x[p];
        }
        y[i] = s;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
