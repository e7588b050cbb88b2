//! Alternating least squares with progressive magnitude snapping, followed by
//! enumeration of quantized candidates from the large entries of each factor.

use std::collections::BTreeSet;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use itertools::Itertools;
use log::debug;

use crate::error::{Error, Result};
use crate::linalg::pinv_psd;
use crate::relaxations::{Tensor3, TripleMoment};

use super::{CandidateSet, CandidateSource, QuantizedDensity, RoundingSettings};

/// Outcome of the factor refinement, kept for inspection and testing.
#[derive(Debug, Clone)]
pub struct AlsTrace {
    /// Fit objective at the end of every sweep, grouped by outer round.
    pub objectives: Vec<Vec<f64>>,
    pub factor: Mat<f64>,
}

/// `M(a,i) = sum_{b,c} T(a,b,c) Q(b,i) R(c,i)`.
fn mttkrp_first(t: &Tensor3, q: &Mat<f64>, r: &Mat<f64>) -> Mat<f64> {
    let n = t.n;
    let rank = q.ncols();
    let mut out = Mat::<f64>::zeros(n, rank);
    let mut sq = Mat::<f64>::zeros(n, rank);
    for c in 0..n {
        matmul(
            sq.as_mut(),
            Accum::Replace,
            t.slice(c),
            q.as_ref(),
            1.0,
            Par::Seq,
        );
        for i in 0..rank {
            let w = r[(c, i)];
            if w != 0.0 {
                for a in 0..n {
                    out[(a, i)] += w * sq[(a, i)];
                }
            }
        }
    }
    out
}

/// `M(b,i) = sum_{a,c} T(a,b,c) P(a,i) R(c,i)`.
fn mttkrp_second(t: &Tensor3, p: &Mat<f64>, r: &Mat<f64>) -> Mat<f64> {
    let n = t.n;
    let rank = p.ncols();
    let mut out = Mat::<f64>::zeros(n, rank);
    let mut sp = Mat::<f64>::zeros(n, rank);
    for c in 0..n {
        matmul(
            sp.as_mut(),
            Accum::Replace,
            t.slice(c).transpose(),
            p.as_ref(),
            1.0,
            Par::Seq,
        );
        for i in 0..rank {
            let w = r[(c, i)];
            if w != 0.0 {
                for b in 0..n {
                    out[(b, i)] += w * sp[(b, i)];
                }
            }
        }
    }
    out
}

/// `M(c,i) = sum_{a,b} T(a,b,c) P(a,i) Q(b,i)`.
fn mttkrp_third(t: &Tensor3, p: &Mat<f64>, q: &Mat<f64>) -> Mat<f64> {
    let n = t.n;
    let rank = p.ncols();
    let mut out = Mat::<f64>::zeros(n, rank);
    let mut sq = Mat::<f64>::zeros(n, rank);
    for c in 0..n {
        matmul(
            sq.as_mut(),
            Accum::Replace,
            t.slice(c),
            q.as_ref(),
            1.0,
            Par::Seq,
        );
        for i in 0..rank {
            out[(c, i)] = (0..n).map(|a| p[(a, i)] * sq[(a, i)]).sum();
        }
    }
    out
}

fn gram(a: &Mat<f64>) -> Mat<f64> {
    let r = a.ncols();
    let mut g = Mat::<f64>::zeros(r, r);
    matmul(
        g.as_mut(),
        Accum::Replace,
        a.transpose(),
        a.as_ref(),
        1.0,
        Par::Seq,
    );
    g
}

fn hadamard(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * b[(i, j)])
}

/// Least-squares factor `M V^+` for the normal matrix `V`.
fn solve_factor(m: &Mat<f64>, v: &Mat<f64>) -> Result<Mat<f64>> {
    let (vinv, _) = pinv_psd(v.as_ref(), 1e-13)?;
    let mut out = Mat::<f64>::zeros(m.nrows(), m.ncols());
    matmul(
        out.as_mut(),
        Accum::Replace,
        m.as_ref(),
        vinv.as_ref(),
        1.0,
        Par::Seq,
    );
    Ok(out)
}

/// `||[[P,Q,R]] - T||_F^2`, using the third-mode contraction.
fn fit_objective(t_norm2: f64, t: &Tensor3, p: &Mat<f64>, q: &Mat<f64>, r: &Mat<f64>) -> f64 {
    let m3 = mttkrp_third(t, p, q);
    let rank = p.ncols();
    let cross: f64 = (0..rank)
        .map(|i| (0..t.n).map(|c| m3[(c, i)] * r[(c, i)]).sum::<f64>())
        .sum();
    let h = hadamard(&hadamard(&gram(p), &gram(q)), &gram(r));
    let model: f64 = (0..rank)
        .map(|i| (0..rank).map(|j| h[(i, j)]).sum::<f64>())
        .sum();
    (t_norm2 - 2.0 * cross + model).max(0.0)
}

/// Sets the `k` largest magnitudes of each column to `1/N`, keeping signs.
fn snap(r: &mut Mat<f64>, k: usize, electrons: usize) {
    let level = 1.0 / electrons as f64;
    for c in 0..r.ncols() {
        let order: Vec<usize> = (0..r.nrows())
            .sorted_by(|&a, &b| r[(b, c)].abs().total_cmp(&r[(a, c)].abs()).then(a.cmp(&b)))
            .collect();
        for &j in order.iter().take(k) {
            let s = if r[(j, c)] < 0.0 { -1.0 } else { 1.0 };
            r[(j, c)] = s * level;
        }
    }
}

/// Runs the snapped ALS and returns the final snapped factor with its history.
pub fn als_factor(
    theta: &TripleMoment,
    init: &[Vec<f64>],
    electrons: usize,
    settings: &RoundingSettings,
) -> Result<AlsTrace> {
    let t = &theta.tensor;
    let n = t.n;
    if init.is_empty() {
        return Err(Error::Rounding(
            "ALS needs at least one initial component".into(),
        ));
    }
    if init.iter().any(|v| v.len() != n) {
        return Err(Error::Rounding(
            "initial components do not match the tensor size".into(),
        ));
    }
    let rank = init.len();
    let norm_target = 1.0 / (electrons as f64).sqrt();
    let t_norm2: f64 = t.data.iter().map(|v| v * v).sum();

    let mut q = Mat::from_fn(n, rank, |i, c| init[c][i]);
    let mut r = q.clone();
    let mut p: Mat<f64>;
    let mut objectives = Vec::with_capacity(electrons);

    for k in 1..=electrons.min(n) {
        let mut round = Vec::new();
        let mut prev = f64::INFINITY;
        for sweep in 0..settings.als_max_sweeps {
            p = solve_factor(&mttkrp_first(t, &q, &r), &hadamard(&gram(&r), &gram(&q)))?;
            q = solve_factor(&mttkrp_second(t, &p, &r), &hadamard(&gram(&r), &gram(&p)))?;
            for c in 0..rank {
                let norm = (0..n).map(|i| q[(i, c)] * q[(i, c)]).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let s = norm_target / norm;
                    for i in 0..n {
                        q[(i, c)] *= s;
                        p[(i, c)] /= s;
                    }
                }
            }
            let before_r = fit_objective(t_norm2, t, &p, &q, &r);
            let mut r_new =
                solve_factor(&mttkrp_third(t, &p, &q), &hadamard(&gram(&p), &gram(&q)))?;
            snap(&mut r_new, k, electrons);
            let after = fit_objective(t_norm2, t, &p, &q, &r_new);
            // A snap that worsens the fit is discarded for this sweep.
            let obj = if after <= before_r {
                r = r_new;
                after
            } else {
                before_r
            };
            round.push(obj);
            let change = (prev - obj).abs() / prev.max(f64::MIN_POSITIVE);
            prev = obj;
            if change < settings.als_tol || obj <= 1e-28 * t_norm2.max(1.0) {
                debug!(
                    "ALS round {k}: converged after {} sweeps, fit {obj:.3e}",
                    sweep + 1
                );
                break;
            }
        }
        // Entering the next round the previous snap level must hold.
        snap(&mut r, k, electrons);
        objectives.push(round);
    }
    Ok(AlsTrace {
        objectives,
        factor: r,
    })
}

/// Refines `init` by snapped ALS and enumerates quantized candidates from the
/// large-magnitude entries of every factor column.
pub fn als_refine(
    theta: &TripleMoment,
    init: &[Vec<f64>],
    electrons: usize,
    settings: &RoundingSettings,
) -> Result<CandidateSet> {
    let trace = als_factor(theta, init, electrons, settings)?;
    Ok(enumerate_candidates(&trace.factor, electrons, settings))
}

/// N-subsets of each column's index set `{j : |R(j,i)| > delta/N}`, capped to the
/// `N + width` largest magnitudes.
pub fn enumerate_candidates(
    r: &Mat<f64>,
    electrons: usize,
    settings: &RoundingSettings,
) -> CandidateSet {
    let n = r.nrows();
    let cut = settings.delta / electrons as f64;
    let mut set = CandidateSet::default();
    let mut seen = BTreeSet::new();
    for c in 0..r.ncols() {
        let mut large: Vec<usize> = (0..n).filter(|&j| r[(j, c)].abs() > cut).collect();
        if large.len() < electrons {
            continue;
        }
        let cap = electrons + settings.width;
        if large.len() > cap {
            large.sort_by(|&a, &b| r[(b, c)].abs().total_cmp(&r[(a, c)].abs()).then(a.cmp(&b)));
            large.truncate(cap);
        }
        large.sort_unstable();
        for subset in large.iter().copied().combinations(electrons) {
            if seen.insert(subset.clone()) {
                if let Ok(q) = QuantizedDensity::new(subset, n) {
                    set.push(q, CandidateSource::AlsEnumeration);
                }
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relaxations::theta_pure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quantized(n: usize, electrons: usize, support: &[usize]) -> Vec<f64> {
        let mut l = vec![0.0; n];
        for &s in support {
            l[s] = 1.0 / electrons as f64;
        }
        l
    }

    #[test]
    fn exact_rank_one_is_a_fixed_point() {
        let l = quantized(6, 3, &[0, 2, 5]);
        let theta = theta_pure(&l);
        let set = als_refine(&theta, &[l.clone()], 3, &RoundingSettings::default()).unwrap();
        assert!(set.candidates.iter().any(|c| c.support() == [0, 2, 5]));
        let trace = als_factor(&theta, &[l], 3, &RoundingSettings::default()).unwrap();
        assert!(trace.objectives[0].len() <= 3);
        assert!(*trace.objectives.last().unwrap().last().unwrap() < 1e-20);
    }

    #[test]
    fn enumeration_counts() {
        let s = RoundingSettings::default();
        // Exactly N large entries per column: one subset per column.
        let r = Mat::from_fn(5, 2, |j, c| if j < 2 + c { 0.5 } else { 0.01 });
        let set = enumerate_candidates(&r, 2, &s);
        // Column 0 gives {0,1}; column 1 has three large entries and gives 3 subsets.
        assert_eq!(set.len(), 3);
        let only_first = enumerate_candidates(
            &Mat::from_fn(5, 1, |j, _| if j < 2 { 0.5 } else { 0.0 }),
            2,
            &s,
        );
        assert_eq!(only_first.len(), 1);
        let wide = enumerate_candidates(
            &Mat::from_fn(5, 1, |j, _| if j < 3 { 0.5 } else { 0.0 }),
            2,
            &s,
        );
        assert_eq!(wide.len(), 3);
    }

    #[test]
    fn enumeration_width_is_capped() {
        let s = RoundingSettings {
            width: 1,
            ..Default::default()
        };
        let r = Mat::from_fn(8, 1, |j, _| 0.5 - 0.01 * j as f64);
        let set = enumerate_candidates(&r, 2, &s);
        // Capped to the 3 largest magnitudes: C(3,2) subsets.
        assert_eq!(set.len(), 3);
        assert!(set
            .candidates
            .iter()
            .all(|c| c.support().iter().all(|&j| j < 3)));
    }

    #[test]
    fn sweeps_never_increase_the_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let n = 7;
            let electrons = 3;
            let comps: Vec<Vec<f64>> = (0..3)
                .map(|k| quantized(n, electrons, &[k, k + 1 + trial % 2, 6 - k]))
                .collect();
            let mut theta = theta_pure(&comps[0]);
            for c in &comps[1..] {
                let extra = theta_pure(c);
                for (a, b) in theta.tensor.data.iter_mut().zip(&extra.tensor.data) {
                    *a += b;
                }
            }
            for v in theta.tensor.data.iter_mut() {
                *v = *v / 3.0 + 1e-4 * rng.random::<f64>();
            }
            let init: Vec<Vec<f64>> = comps
                .iter()
                .map(|c| c.iter().map(|v| v + 0.05 * rng.random::<f64>()).collect())
                .collect();
            let trace = als_factor(&theta, &init, electrons, &RoundingSettings::default()).unwrap();
            for round in &trace.objectives {
                for w in round.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "trial {trial}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }
}
