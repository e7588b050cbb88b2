//! Constrained regression of a relaxed moment onto mixtures of quantized candidates.
//!
//! Both fits reduce to the quadratic program
//! `min 1/2 a'Ha - g'a  s.t.  a >= 0, sum a = 1, sum a_i lambda_i = rho`,
//! solved by an operator-splitting method and then polished on the active set.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::Mat;
use log::debug;

use crate::error::{Error, Result};
use crate::grid::{CostMatrix, Marginal};
use crate::oracle::{simplex_lp, LpOutcome};
use crate::relaxations::{energy, PairMarginal, Tensor3, TripleMoment};

use super::{CandidateSet, CandidateSource, QuantizedDensity, RoundedSolution};

/// Feasibility required of an accepted fit: marginal error (max norm).
pub const MARGINAL_TOL: f64 = 1e-8;
/// Feasibility required of an accepted fit: deviation of the weight sum from 1.
pub const SUM_TOL: f64 = 1e-9;
const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct QpResult {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub marginal_error: f64,
    pub sum_error: f64,
    pub min_weight: f64,
}

impl QpResult {
    pub fn feasible(&self) -> bool {
        self.marginal_error <= MARGINAL_TOL
            && self.sum_error <= SUM_TOL
            && self.min_weight >= -NEG_TOL
    }
}

fn errors(eq: &Mat<f64>, rhs: &[f64], a: &[f64]) -> (f64, f64, f64) {
    let m = eq.nrows();
    let mut marg = 0.0_f64;
    for r in 0..m {
        let lhs: f64 = (0..a.len()).map(|j| eq[(r, j)] * a[j]).sum();
        marg = marg.max((lhs - rhs[r]).abs());
    }
    let sum_err = (a.iter().sum::<f64>() - 1.0).abs();
    let min_w = a.iter().copied().fold(f64::INFINITY, f64::min);
    (marg, sum_err, min_w)
}

fn qp_objective(h: &Mat<f64>, g: &[f64], a: &[f64]) -> f64 {
    let p = a.len();
    let mut v = 0.0;
    for i in 0..p {
        let hi: f64 = (0..p).map(|j| h[(i, j)] * a[j]).sum();
        v += 0.5 * a[i] * hi - g[i] * a[i];
    }
    v
}

/// Solves the simplex-constrained QP. `eq` holds the marginal rows only; the unit
/// sum row is added here.
pub(crate) fn simplex_qp(h: &Mat<f64>, g: &[f64], eq: &Mat<f64>, rhs: &[f64]) -> Result<QpResult> {
    let p = g.len();
    if p == 0 {
        return Err(Error::Rounding("no candidates to fit".into()));
    }
    let m = eq.nrows() + 1;
    let e = Mat::from_fn(m, p, |r, j| if r + 1 == m { 1.0 } else { eq[(r, j)] });
    let b: Vec<f64> = rhs.iter().copied().chain(std::iter::once(1.0)).collect();

    let scale = (0..p)
        .map(|i| h[(i, i)])
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let hs = Mat::from_fn(p, p, |i, j| h[(i, j)] / scale);
    let q: Vec<f64> = g.iter().map(|v| -v / scale).collect();

    let sigma = 1e-6;
    let rho_eq = 1e2;
    let rho_box = 1e-1;
    let alpha = 1.6;
    let k = Mat::from_fn(p, p, |i, j| {
        let ete: f64 = (0..m).map(|r| e[(r, i)] * e[(r, j)]).sum();
        hs[(i, j)] + rho_eq * ete + if i == j { sigma + rho_box } else { 0.0 }
    });
    let chol = k
        .as_ref()
        .llt(faer::Side::Lower)
        .map_err(|_| Error::Numerical("fit system is not positive definite".into()))?;

    let mut x = vec![1.0 / p as f64; p];
    let mut z_eq: Vec<f64> = b.clone();
    let mut z_box = x.clone();
    let mut y_eq = vec![0.0; m];
    let mut y_box = vec![0.0; p];
    let mut rhs_vec = Mat::<f64>::zeros(p, 1);
    let max_iter = 20_000;
    let mut iters = 0;
    for it in 0..max_iter {
        iters = it + 1;
        for i in 0..p {
            let mut v = sigma * x[i] - q[i] + (rho_box * z_box[i] - y_box[i]);
            for r in 0..m {
                v += e[(r, i)] * (rho_eq * z_eq[r] - y_eq[r]);
            }
            rhs_vec[(i, 0)] = v;
        }
        let xt = chol.solve(&rhs_vec);
        let mut prim: f64 = 0.0;
        let mut dual: f64 = 0.0;
        for r in 0..m {
            let zt: f64 = (0..p).map(|j| e[(r, j)] * xt[(j, 0)]).sum();
            let zr = alpha * zt + (1.0 - alpha) * z_eq[r];
            let znew = b[r];
            y_eq[r] += rho_eq * (zr - znew);
            dual = dual.max((rho_eq * (znew - z_eq[r])).abs());
            z_eq[r] = znew;
            prim = prim.max((zt - b[r]).abs());
        }
        for i in 0..p {
            let xr = alpha * xt[(i, 0)] + (1.0 - alpha) * x[i];
            x[i] = xr;
            let zr = alpha * xt[(i, 0)] + (1.0 - alpha) * z_box[i];
            let znew = (zr + y_box[i] / rho_box).max(0.0);
            y_box[i] += rho_box * (zr - znew);
            dual = dual.max((rho_box * (znew - z_box[i])).abs());
            z_box[i] = znew;
            prim = prim.max((xt[(i, 0)] - znew).abs());
        }
        if prim < 1e-11 && dual < 1e-11 {
            break;
        }
    }
    debug!("simplex fit: {p} candidates, {iters} iterations");

    let mut best = z_box.clone();
    if let Some(polished) = polish(&hs, &q, &e, &b, &z_box) {
        best = polished;
    } else {
        correct(&e, &b, &mut best);
    }
    let (marginal_error, sum_error, min_weight) = errors(eq, rhs, &best);
    let objective = qp_objective(h, g, &best);
    Ok(QpResult {
        weights: best,
        objective,
        marginal_error,
        sum_error,
        min_weight,
    })
}

/// Equality-constrained solve on the support of `a`, accepted only if it stays
/// nonnegative.
fn polish(h: &Mat<f64>, q: &[f64], e: &Mat<f64>, b: &[f64], a: &[f64]) -> Option<Vec<f64>> {
    let top = a.iter().copied().fold(0.0_f64, f64::max);
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 1e-7 * top).collect();
    let s = support.len();
    let m = e.nrows();
    let delta = 1e-10;
    let kkt = Mat::from_fn(s + m, s + m, |i, j| match (i < s, j < s) {
        (true, true) => h[(support[i], support[j])] + if i == j { delta } else { 0.0 },
        (true, false) => e[(j - s, support[i])],
        (false, true) => e[(i - s, support[j])],
        (false, false) => {
            if i == j {
                -delta
            } else {
                0.0
            }
        }
    });
    let rhs = Mat::from_fn(
        s + m,
        1,
        |i, _| if i < s { -q[support[i]] } else { b[i - s] },
    );
    let lu = kkt.as_ref().partial_piv_lu();
    // Iterative refinement against the unregularized system.
    let exact = Mat::from_fn(s + m, s + m, |i, j| match (i < s, j < s) {
        (true, true) => h[(support[i], support[j])],
        (false, false) => 0.0,
        _ => kkt[(i, j)],
    });
    let mut sol = lu.solve(&rhs);
    for _ in 0..10 {
        let mut res = rhs.clone();
        for i in 0..s + m {
            let v: f64 = (0..s + m).map(|j| exact[(i, j)] * sol[(j, 0)]).sum();
            res[(i, 0)] -= v;
        }
        let dx = lu.solve(&res);
        for i in 0..s + m {
            sol[(i, 0)] += dx[(i, 0)];
        }
    }
    let mut out = vec![0.0; a.len()];
    for (k, &i) in support.iter().enumerate() {
        let v = sol[(k, 0)];
        if !v.is_finite() || v < -NEG_TOL {
            return None;
        }
        out[i] = v.max(0.0);
    }
    let _ = lu.inverse();
    Some(out)
}

/// Minimum-norm correction of the equality residual on the support, then clipping.
fn correct(e: &Mat<f64>, b: &[f64], a: &mut [f64]) {
    for _ in 0..5 {
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
        let m = e.nrows();
        let r: Vec<f64> = (0..m)
            .map(|row| support.iter().map(|&j| e[(row, j)] * a[j]).sum::<f64>() - b[row])
            .collect();
        let gram = Mat::from_fn(m, m, |i, j| {
            support.iter().map(|&k| e[(i, k)] * e[(j, k)]).sum()
        });
        let Ok((ginv, _)) = crate::linalg::pinv_psd(gram.as_ref(), 1e-12) else {
            return;
        };
        let mu: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| ginv[(i, j)] * r[j]).sum())
            .collect();
        for &j in &support {
            a[j] -= (0..m).map(|row| e[(row, j)] * mu[row]).sum::<f64>();
        }
        if a.iter().all(|&v| v >= -NEG_TOL) {
            return;
        }
    }
}

fn marginal_rows(candidates: &CandidateSet, n: usize) -> Mat<f64> {
    let p = candidates.len();
    let mut eq = Mat::<f64>::zeros(n, p);
    for (j, c) in candidates.candidates.iter().enumerate() {
        let w = 1.0 / c.electrons() as f64;
        for &s in c.support() {
            eq[(s, j)] = w;
        }
    }
    eq
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                k += 1;
                i += 1;
                j += 1;
            }
        }
    }
    k
}

/// Pair marginal of a weighted mixture of quantized densities.
pub fn mixture_gamma(
    candidates: &[QuantizedDensity],
    weights: &[f64],
    sites: usize,
) -> PairMarginal {
    let mut g = Mat::<f64>::zeros(sites, sites);
    for (c, &a) in candidates.iter().zip(weights) {
        if a == 0.0 {
            continue;
        }
        let nf = c.electrons() as f64;
        let v = a / (nf * (nf - 1.0));
        for &i in c.support() {
            for &j in c.support() {
                if i != j {
                    g[(i, j)] += v;
                }
            }
        }
    }
    PairMarginal { matrix: g }
}

/// Three-body moment `sum a_i l_i (x) l_i (x) l_i` of a mixture.
pub fn mixture_theta(
    candidates: &[QuantizedDensity],
    weights: &[f64],
    sites: usize,
) -> TripleMoment {
    let mut t = Tensor3::zeros(sites);
    for (c, &a) in candidates.iter().zip(weights) {
        if a == 0.0 {
            continue;
        }
        let nf = c.electrons() as f64;
        let v = a / (nf * nf * nf);
        for &k in c.support() {
            for &j in c.support() {
                for &i in c.support() {
                    let idx = t.index(i, j, k);
                    t.data[idx] += v;
                }
            }
        }
    }
    TripleMoment { tensor: t }
}

fn check_inputs(candidates: &CandidateSet, rho: &Marginal, sites: usize) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Rounding("candidate set is empty".into()));
    }
    if rho.len() != sites {
        return Err(Error::InvalidMarginal(format!(
            "marginal has {} entries for {sites} sites",
            rho.len()
        )));
    }
    let electrons = candidates.candidates[0].electrons();
    if candidates
        .candidates
        .iter()
        .any(|c| c.electrons() != electrons || c.sites() != sites)
    {
        return Err(Error::Rounding(
            "candidates disagree in electron count or grid size".into(),
        ));
    }
    Ok(electrons)
}

fn finish(
    candidates: &CandidateSet,
    qp: QpResult,
    sites: usize,
    electrons: usize,
    cost: &CostMatrix,
    potential: Option<&[f64]>,
    theta: Option<TripleMoment>,
) -> RoundedSolution {
    let gamma = mixture_gamma(&candidates.candidates, &qp.weights, sites);
    let upper_energy = energy(&gamma, cost, electrons, potential);
    RoundedSolution {
        feasible: qp.feasible(),
        weights: qp.weights,
        candidates: candidates.clone(),
        theta,
        gamma,
        upper_energy,
        regression_energy: upper_energy,
        marginal_error: qp.marginal_error,
        sum_error: qp.sum_error,
        fit_objective: qp.objective,
    }
}

/// Energy of a single configuration: `sum_{i<j in S} C(i,j) + (1/N) sum_{i in S} c_i`.
fn configuration_energy(q: &QuantizedDensity, cost: &CostMatrix, potential: Option<&[f64]>) -> f64 {
    let s = q.support();
    let mut e = 0.0;
    for (a, &i) in s.iter().enumerate() {
        for &j in &s[a + 1..] {
            e += cost.get(i, j);
        }
    }
    if let Some(c) = potential {
        e += s.iter().map(|&i| c[i]).sum::<f64>() / s.len() as f64;
    }
    e
}

/// Nearest sites of each site under the cost (largest `C(i,j)`, ties included).
fn nearest_sites(cost: &CostMatrix, sites: usize) -> Vec<Vec<usize>> {
    (0..sites)
        .map(|i| {
            let top = (0..sites)
                .filter(|&j| j != i)
                .map(|j| cost.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            (0..sites)
                .filter(|&j| j != i && cost.get(i, j) >= top - 1e-9 * top.abs())
                .collect()
        })
        .collect()
}

/// Re-optimizes the weights of a feasible fit for energy:
/// `min sum a_k E(lambda_k)  s.t.  a >= 0, sum a_k lambda_k = rho`.
///
/// Each of up to `shift_rounds` further rounds adds the configurations obtained by
/// moving one electron of an active configuration to a nearest site, then solves
/// again. The fitted weights are kept when no round lowers the energy. A fit that
/// misses the marginal is replaced whenever the candidates can reproduce it.
/// `regression_energy` always holds the energy of the fitted weights.
pub fn energy_reweight(
    fit: RoundedSolution,
    rho: &Marginal,
    cost: &CostMatrix,
    potential: Option<&[f64]>,
    shift_rounds: usize,
) -> Result<RoundedSolution> {
    if fit.candidates.is_empty() {
        return Ok(fit);
    }
    let n = rho.len();
    let electrons = check_inputs(&fit.candidates, rho, n)?;
    let near = nearest_sites(cost, n);
    let mut set = fit.candidates.clone();
    let mut weights = fit.weights.clone();
    let mut best = if fit.feasible {
        fit.upper_energy
    } else {
        f64::INFINITY
    };
    let mut improved = false;
    for round in 0..=shift_rounds {
        if round > 0 {
            let active: Vec<Vec<usize>> = set
                .candidates
                .iter()
                .zip(&weights)
                .filter(|(_, &a)| a > 0.0)
                .map(|(q, _)| q.support().to_vec())
                .collect();
            let before = set.len();
            for s in &active {
                for (e, &i) in s.iter().enumerate() {
                    for &j in &near[i] {
                        if s.binary_search(&j).is_ok() {
                            continue;
                        }
                        let mut moved = s.clone();
                        moved[e] = j;
                        set.push(
                            QuantizedDensity::new(moved, n)?,
                            CandidateSource::LocalShift,
                        );
                    }
                }
            }
            if set.len() == before {
                break;
            }
            weights.resize(set.len(), 0.0);
        }
        let costs: Vec<f64> = set
            .candidates
            .iter()
            .map(|q| configuration_energy(q, cost, potential))
            .collect();
        let eq = marginal_rows(&set, n);
        let x = match simplex_lp(&eq, rho.weights(), &costs) {
            LpOutcome::Optimal { x, .. } => x,
            other => {
                debug!("energy reweighting stopped: {other:?}");
                break;
            }
        };
        let (marg, sum_err, min_w) = errors(&eq, rho.weights(), &x);
        let value = energy(
            &mixture_gamma(&set.candidates, &x, n),
            cost,
            electrons,
            potential,
        );
        if marg > MARGINAL_TOL || sum_err > SUM_TOL || min_w < -NEG_TOL {
            debug!("energy reweighting stopped: marginal error {marg:e}");
            break;
        }
        if best.is_finite() && value >= best - 1e-12 * best.abs() {
            if round > 0 {
                break;
            }
            continue;
        }
        debug!(
            "energy reweighting round {round}: {best} -> {value}, {} candidates",
            set.len()
        );
        best = value;
        weights = x;
        improved = true;
    }
    if !improved {
        return Ok(fit);
    }
    weights.resize(set.len(), 0.0);
    let eq = marginal_rows(&set, n);
    let (marginal_error, sum_error, _) = errors(&eq, rho.weights(), &weights);
    let gamma = mixture_gamma(&set.candidates, &weights, n);
    let upper_energy = energy(&gamma, cost, electrons, potential);
    let theta = fit
        .theta
        .as_ref()
        .map(|_| mixture_theta(&set.candidates, &weights, n));
    Ok(RoundedSolution {
        weights,
        candidates: set,
        theta,
        gamma,
        upper_energy,
        marginal_error,
        sum_error,
        feasible: true,
        ..fit
    })
}

/// Fits the three-body moment by a mixture of candidate cubes with marginal `rho`.
pub fn simplex_fit(
    theta: &TripleMoment,
    candidates: &CandidateSet,
    rho: &Marginal,
    cost: &CostMatrix,
    potential: Option<&[f64]>,
) -> Result<RoundedSolution> {
    let n = theta.tensor.n;
    let electrons = check_inputs(candidates, rho, n)?;
    let p = candidates.len();
    let cube = |k: usize| (k as f64 / (electrons * electrons) as f64).powi(3);
    let h = Mat::from_fn(p, p, |i, j| {
        cube(intersection(
            candidates.candidates[i].support(),
            candidates.candidates[j].support(),
        ))
    });
    let t = &theta.tensor;
    let inv = 1.0 / (electrons as f64).powi(3);
    let g: Vec<f64> = candidates
        .candidates
        .iter()
        .map(|c| {
            let s = c.support();
            let mut acc = 0.0;
            for &k in s {
                for &j in s {
                    for &i in s {
                        acc += t.get(i, j, k);
                    }
                }
            }
            acc * inv
        })
        .collect();
    let qp = simplex_qp(&h, &g, &marginal_rows(candidates, n), rho.weights())?;
    let rebuilt = mixture_theta(&candidates.candidates, &qp.weights, n);
    Ok(finish(
        candidates,
        qp,
        n,
        electrons,
        cost,
        potential,
        Some(rebuilt),
    ))
}

/// Fits a pair marginal by a mixture of candidate extreme pair marginals with
/// marginal `rho`.
pub fn pair_fit(
    gamma: &PairMarginal,
    candidates: &CandidateSet,
    rho: &Marginal,
    cost: &CostMatrix,
    potential: Option<&[f64]>,
) -> Result<RoundedSolution> {
    let n = gamma.matrix.nrows();
    let electrons = check_inputs(candidates, rho, n)?;
    if electrons < 2 {
        return Err(Error::TooFewElectrons {
            n: electrons,
            min: 2,
        });
    }
    let p = candidates.len();
    let nf = electrons as f64;
    let unit = 1.0 / (nf * (nf - 1.0));
    let h = Mat::from_fn(p, p, |i, j| {
        let k = intersection(
            candidates.candidates[i].support(),
            candidates.candidates[j].support(),
        ) as f64;
        unit * unit * k * (k - 1.0)
    });
    let g: Vec<f64> = candidates
        .candidates
        .iter()
        .map(|c| {
            let s = c.support();
            let mut acc = 0.0;
            for &i in s {
                for &j in s {
                    if i != j {
                        acc += gamma.matrix[(i, j)];
                    }
                }
            }
            acc * unit
        })
        .collect();
    let qp = simplex_qp(&h, &g, &marginal_rows(candidates, n), rho.weights())?;
    Ok(finish(candidates, qp, n, electrons, cost, potential, None))
}
