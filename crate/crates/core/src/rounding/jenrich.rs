//! Simultaneous diagonalization of two random contractions of a symmetric tensor.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::sym_eig;
use crate::relaxations::TripleMoment;

/// Eigenvalues of the pair moment below this fraction of the largest are treated as
/// outside the tensor's range.
const RANGE_TOL: f64 = 1e-9;
/// Whitening keeps directions of the second contraction above this fraction.
const WHITEN_TOL: f64 = 1e-12;
const MAX_ATTEMPTS: usize = 5;

/// Recovers the components of `theta = sum a_i l_i (x) l_i (x) l_i` for linearly
/// independent `l_i`. Each returned vector has 2-norm `1/sqrt(N)` and a nonnegative
/// entry sum.
///
/// The eigenvectors of `W1 W2^+` are computed as a symmetric-definite pencil: both
/// contractions are restricted to the range of `sum_k T(:,:,k)`, `W2` is whitened and
/// the whitened `W1` is diagonalized.
pub fn jenrich(theta: &TripleMoment, electrons: usize, rng_seed: u64) -> Result<Vec<Vec<f64>>> {
    let t = &theta.tensor;
    let n = t.n;
    if electrons == 0 {
        return Err(Error::InvalidProblem(
            "electron count must be positive".into(),
        ));
    }
    let pair = t.contract_last();
    let pair = Mat::from_fn(n, n, |i, j| 0.5 * (pair[(i, j)] + pair[(j, i)]));
    let (vals, vecs) = sym_eig(pair.as_ref())?;
    let top = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return Err(Error::Rounding("zero tensor has no components".into()));
    }
    let keep: Vec<usize> = (0..n).filter(|&k| vals[k] > RANGE_TOL * top).collect();
    let r = keep.len();
    let basis = Mat::from_fn(n, r, |i, c| vecs[(i, keep[c])]);

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for attempt in 0..MAX_ATTEMPTS {
        let w1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let c1 = project(&contract(t, &w1), &basis);
        let c2 = project(&contract(t, &w2), &basis);

        let (s2, v2) = sym_eig(c2.as_ref())?;
        let s_top = s2.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let live: Vec<usize> = (0..r).filter(|&k| s2[k] > WHITEN_TOL * s_top).collect();
        if live.len() < r {
            debug!(
                "jenrich attempt {attempt}: whitening rank {} of {r}",
                live.len()
            );
            continue;
        }
        // whiten = V S^{-1/2}, lift = V S^{1/2}
        let whiten = Mat::from_fn(r, r, |i, c| v2[(i, live[c])] / s2[live[c]].sqrt());
        let lift = Mat::from_fn(r, r, |i, c| v2[(i, live[c])] * s2[live[c]].sqrt());
        let mut tmp = Mat::<f64>::zeros(r, r);
        matmul(
            tmp.as_mut(),
            Accum::Replace,
            c1.as_ref(),
            whiten.as_ref(),
            1.0,
            Par::Seq,
        );
        let mut m = Mat::<f64>::zeros(r, r);
        matmul(
            m.as_mut(),
            Accum::Replace,
            whiten.transpose(),
            tmp.as_ref(),
            1.0,
            Par::Seq,
        );
        let m = Mat::from_fn(r, r, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
        let (_, y) = sym_eig(m.as_ref())?;

        let mut coords = Mat::<f64>::zeros(r, r);
        matmul(
            coords.as_mut(),
            Accum::Replace,
            lift.as_ref(),
            y.as_ref(),
            1.0,
            Par::Seq,
        );
        let mut comps = Mat::<f64>::zeros(n, r);
        matmul(
            comps.as_mut(),
            Accum::Replace,
            basis.as_ref(),
            coords.as_ref(),
            1.0,
            Par::Seq,
        );

        let target = 1.0 / (electrons as f64).sqrt();
        let mut out = Vec::with_capacity(r);
        for c in 0..r {
            let mut v: Vec<f64> = (0..n).map(|i| comps[(i, c)]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numerical("degenerate component".into()));
            }
            let sign = if v.iter().sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
            v.iter_mut().for_each(|x| *x *= sign * target / norm);
            out.push(v);
        }
        return Ok(out);
    }
    Err(Error::Rounding(format!(
        "random contraction collapsed in rank on {MAX_ATTEMPTS} attempts"
    )))
}

/// `sum_k w(k) T(:,:,k)`, symmetrized.
fn contract(t: &crate::relaxations::Tensor3, w: &[f64]) -> Mat<f64> {
    let n = t.n;
    let mut out = Mat::<f64>::zeros(n, n);
    for (k, &wk) in w.iter().enumerate() {
        let s = t.slice(k);
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] += wk * s[(i, j)];
            }
        }
    }
    Mat::from_fn(n, n, |i, j| 0.5 * (out[(i, j)] + out[(j, i)]))
}

/// `B^T M B`.
fn project(m: &Mat<f64>, basis: &Mat<f64>) -> Mat<f64> {
    let (n, r) = (basis.nrows(), basis.ncols());
    let mut tmp = Mat::<f64>::zeros(n, r);
    matmul(
        tmp.as_mut(),
        Accum::Replace,
        m.as_ref(),
        basis.as_ref(),
        1.0,
        Par::Seq,
    );
    let mut out = Mat::<f64>::zeros(r, r);
    matmul(
        out.as_mut(),
        Accum::Replace,
        basis.transpose(),
        tmp.as_ref(),
        1.0,
        Par::Seq,
    );
    Mat::from_fn(r, r, |i, j| 0.5 * (out[(i, j)] + out[(j, i)]))
}
