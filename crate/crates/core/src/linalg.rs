//! Dense kernels shared by the solver, the rounding stages and the tests.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Eigenvalues (ascending) and eigenvectors of a symmetric matrix. Only the lower
/// triangle is read.
pub fn sym_eig(a: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("symmetric eigendecomposition failed: {e:?}")))?;
    let vals: Vec<f64> = evd.S().column_vector().iter().copied().collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue".into()));
    }
    Ok((vals, evd.U().to_owned()))
}

/// Symmetric part `(A + A^T)/2`.
pub fn symmetrize(a: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Projects the symmetric part of `a` onto the PSD cone, writing the result into `a`.
pub fn project_psd_in_place(mut a: MatMut<'_, f64>) -> Result<()> {
    let n = a.nrows();
    let sym = symmetrize(a.as_ref());
    let (vals, vecs) = sym_eig(sym.as_ref())?;
    let positive = vals.iter().filter(|&&v| v > 0.0).count();
    if positive == n {
        a.copy_from(&sym);
        return Ok(());
    }
    if positive == 0 {
        a.fill(0.0);
        return Ok(());
    }
    // Rebuild from whichever side of the spectrum is smaller.
    if positive <= n - positive {
        let mut b = Mat::<f64>::zeros(n, positive);
        for (c, col) in (n - positive..n).enumerate() {
            let s = vals[col].sqrt();
            for i in 0..n {
                b[(i, c)] = vecs[(i, col)] * s;
            }
        }
        matmul(
            a.as_mut(),
            Accum::Replace,
            b.as_ref(),
            b.transpose(),
            1.0,
            Par::Seq,
        );
    } else {
        let neg = n - positive;
        let mut b = Mat::<f64>::zeros(n, neg);
        for col in 0..neg {
            let s = (-vals[col]).sqrt();
            for i in 0..n {
                b[(i, col)] = vecs[(i, col)] * s;
            }
        }
        a.copy_from(&sym);
        matmul(
            a.as_mut(),
            Accum::Add,
            b.as_ref(),
            b.transpose(),
            1.0,
            Par::Seq,
        );
    }
    // Exact symmetry of the output.
    for j in 0..n {
        for i in j + 1..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    Ok(())
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix. Eigenvalues below
/// `rel_tol * max_eigenvalue` are treated as zero. Returns the inverse and the rank.
pub fn pinv_psd(a: MatRef<'_, f64>, rel_tol: f64) -> Result<(Mat<f64>, usize)> {
    let n = a.nrows();
    let (vals, vecs) = sym_eig(a)?;
    let top = vals.iter().copied().fold(0.0_f64, f64::max);
    let cut = rel_tol * top;
    let keep: Vec<usize> = (0..n).filter(|&k| vals[k] > cut && vals[k] > 0.0).collect();
    let mut b = Mat::<f64>::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let s = 1.0 / vals[k].sqrt();
        for i in 0..n {
            b[(i, c)] = vecs[(i, k)] * s;
        }
    }
    let mut out = Mat::<f64>::zeros(n, n);
    matmul(
        out.as_mut(),
        Accum::Replace,
        b.as_ref(),
        b.transpose(),
        1.0,
        Par::Seq,
    );
    Ok((out, keep.len()))
}

/// `out = a * x` for a dense matrix and slices.
pub fn matvec(out: &mut [f64], a: MatRef<'_, f64>, x: &[f64]) {
    let xm = MatRef::from_column_major_slice(x, x.len(), 1);
    let om = MatMut::from_column_major_slice_mut(out, a.nrows(), 1);
    matmul(om, Accum::Replace, a, xm, 1.0, Par::Seq);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Frobenius distance between two equally shaped matrices.
pub fn frob_dist(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let d = a[(i, j)] - b[(i, j)];
            s += d * d;
        }
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_deficient_matrix() {
        // [[1,1],[1,1]] has pseudo-inverse [[1,1],[1,1]]/4.
        let a = Mat::from_fn(2, 2, |_, _| 1.0);
        let (p, rank) = pinv_psd(a.as_ref(), 1e-12).unwrap();
        assert_eq!(rank, 1);
        for j in 0..2 {
            for i in 0..2 {
                assert!((p[(i, j)] - 0.25).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matvec_matches_manual_product() {
        let a = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let mut out = vec![0.0; 3];
        matvec(&mut out, a.as_ref(), &[1.0, -1.0]);
        assert_eq!(out, vec![-1.0, -1.0, -1.0]);
    }
}
