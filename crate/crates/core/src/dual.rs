//! Approximate Kantorovich potentials from the dual of the pairwise relaxation, and
//! the one-dimensional comotion ground truth they are compared against.

use log::debug;

use crate::conic::{solve, SdpSolution, SolveStatus, SolverSettings};
use crate::error::{Error, Result};
use crate::grid::{Grid, Marginal, MarginalKind};
use crate::relaxations::{build_sdp_coulomb, ProblemSpec};

/// Multipliers of the marginal and quantization rows of a solved pairwise relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    /// Potential on the grid: marginal multipliers with the total-mass multiplier
    /// folded in.
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub dual_objective: f64,
    pub primal_objective: f64,
}

impl DualCertificate {
    /// `w . rho`.
    pub fn value(&self, rho: &Marginal) -> f64 {
        self.w.iter().zip(rho.weights()).map(|(a, b)| a * b).sum()
    }
}

/// Reads the potential out of a pairwise solve with a marginal constraint.
pub fn extract_kantorovich(solution: &SdpSolution, sites: usize) -> Result<DualCertificate> {
    if solution.status == SolveStatus::InfeasibleGuess {
        return Err(Error::InvalidProblem(
            "solution carries no valid multipliers".into(),
        ));
    }
    let total = solution.multiplier("total").ok_or_else(|| {
        Error::InvalidProblem("solution is not from the pairwise relaxation".into())
    })?;
    let mut w = Vec::with_capacity(sites);
    let mut u = Vec::with_capacity(sites);
    for i in 0..sites {
        let m = solution
            .multiplier(&format!("marginal[{i}]"))
            .ok_or_else(|| Error::InvalidProblem("solve lacked a marginal constraint".into()))?;
        w.push(m + total);
        let q = solution
            .multiplier(&format!("quant[{i}]"))
            .ok_or_else(|| Error::InvalidProblem(format!("missing quantization row {i}")))?;
        u.push(q);
    }
    Ok(DualCertificate {
        w,
        u,
        dual_objective: solution.dual_objective,
        primal_objective: solution.primal_objective,
    })
}

/// Comotion maps and the potential they induce on a one-dimensional grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComotionSet {
    pub points: Vec<f64>,
    /// Cumulative electron count at each grid point.
    pub cumulative: Vec<f64>,
    /// `maps[i][k]` is `f_{i+1}` at grid point `k`.
    pub maps: Vec<Vec<f64>>,
    /// Potential, gauged to zero at the left end.
    pub potential: Vec<f64>,
}

/// Piecewise-linear cumulative electron count: the density of site `k` is spread
/// uniformly over its cell `[x_k - h/2, x_k + h/2]`.
struct Cumulative {
    edges: Vec<f64>,
    counts: Vec<f64>,
}

impl Cumulative {
    fn new(points: &[f64], rho: &[f64], electrons: f64) -> Self {
        let n = points.len();
        let h = if n > 1 { points[1] - points[0] } else { 1.0 };
        let mut edges = Vec::with_capacity(n + 1);
        let mut counts = Vec::with_capacity(n + 1);
        edges.push(points[0] - 0.5 * h);
        counts.push(0.0);
        let mut acc = 0.0;
        for k in 0..n {
            acc += rho[k];
            edges.push(points[k] + 0.5 * h);
            counts.push(electrons * acc);
        }
        // Remove rounding drift so the count ends exactly at N.
        let last = counts[n];
        counts.iter_mut().for_each(|c| *c *= electrons / last);
        Self { edges, counts }
    }

    fn eval(&self, x: f64) -> f64 {
        interp(&self.edges, &self.counts, x)
    }

    fn inverse(&self, y: f64) -> f64 {
        interp(&self.counts, &self.edges, y)
    }
}

/// Linear interpolation in an increasing table, clamped at the ends.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let t = (x - x0) / (x1 - x0);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

/// Builds the comotion maps of `rho` and integrates the potential gradient
/// `-prefactor * sum_i (x - f_i(x)) / |x - f_i(x)|^3`, skipping `f_i(x) = x`.
/// `prefactor` defaults to `N`.
pub fn comotion_potential(
    rho: &Marginal,
    electrons: usize,
    grid: &Grid,
    prefactor: Option<f64>,
) -> Result<ComotionSet> {
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid(
            "comotion ground truth needs a one-dimensional grid".into(),
        ));
    }
    let n = grid.len();
    if rho.len() != n {
        return Err(Error::InvalidMarginal(format!(
            "marginal has {} entries for {n} points",
            rho.len()
        )));
    }
    if rho.weights().iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidMarginal(
            "comotion maps need a strictly positive marginal".into(),
        ));
    }
    if electrons < 2 {
        return Err(Error::TooFewElectrons {
            n: electrons,
            min: 2,
        });
    }
    let nf = electrons as f64;
    let prefactor = prefactor.unwrap_or(nf);
    let points: Vec<f64> = grid.points().map(|p| p[0]).collect();
    let cum = Cumulative::new(&points, rho.weights(), nf);
    let cumulative: Vec<f64> = points.iter().map(|&x| cum.eval(x)).collect();

    let mut maps = Vec::with_capacity(electrons);
    for i in 1..=electrons {
        let shift = (i - 1) as f64;
        let branch = cum.inverse(nf + 1.0 - i as f64);
        let f: Vec<f64> = points
            .iter()
            .zip(&cumulative)
            .map(|(&x, &ne)| {
                if i == 1 {
                    x
                } else if x <= branch {
                    cum.inverse(ne + shift)
                } else {
                    cum.inverse(ne + shift - nf)
                }
            })
            .collect();
        maps.push(f);
    }

    let gradient: Vec<f64> = (0..n)
        .map(|k| {
            let x = points[k];
            let mut g = 0.0;
            for f in &maps {
                let d = x - f[k];
                if d != 0.0 {
                    g += d / d.abs().powi(3);
                }
            }
            -prefactor * g
        })
        .collect();
    let mut potential = vec![0.0; n];
    for k in 1..n {
        let h = points[k] - points[k - 1];
        potential[k] = potential[k - 1] + 0.5 * h * (gradient[k - 1] + gradient[k]);
    }
    debug!(
        "comotion potential over {n} points, range {:.4}..{:.4}",
        potential[0],
        potential[n - 1]
    );
    Ok(ComotionSet {
        points,
        cumulative,
        maps,
        potential,
    })
}

/// Shifts `v` by a constant so that `v . rho = reference . rho`.
pub fn align_potential(v: &[f64], reference: &[f64], rho: &Marginal) -> Result<Vec<f64>> {
    let r = rho.weights();
    if v.len() != r.len() || reference.len() != r.len() {
        return Err(Error::InvalidProblem(
            "potentials and marginal differ in length".into(),
        ));
    }
    let mass: f64 = r.iter().sum();
    let target: f64 = reference.iter().zip(r).map(|(a, b)| a * b).sum();
    let current: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
    let shift = (target - current) / mass;
    Ok(v.iter().map(|x| x + shift).collect())
}

/// `||v - w||_2 / ||v||_2`.
pub fn potential_error(v_true: &[f64], w: &[f64]) -> Result<f64> {
    if v_true.len() != w.len() {
        return Err(Error::InvalidProblem("potentials differ in length".into()));
    }
    let den = v_true.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::InvalidProblem("reference potential is zero".into()));
    }
    let num = v_true
        .iter()
        .zip(w)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Predicted and observed change of the relaxed energy under a marginal perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradientCheck {
    /// `w . delta`.
    pub predicted: f64,
    /// `V(rho + delta) - V(rho)`.
    pub actual: f64,
    pub base_value: f64,
}

/// Solves the pairwise relaxation at `rho` and at `rho + delta` and compares the
/// change with the potential's prediction.
pub fn dual_subgradient_check(
    spec: &ProblemSpec,
    delta: &[f64],
    settings: &SolverSettings,
) -> Result<SubgradientCheck> {
    let rho = spec.marginal.as_ref().ok_or_else(|| {
        Error::InvalidProblem("subgradient check needs a marginal constraint".into())
    })?;
    let n = spec.sites();
    if delta.len() != n {
        return Err(Error::InvalidProblem(
            "perturbation length differs from the grid".into(),
        ));
    }
    let shifted: Vec<f64> = rho
        .weights()
        .iter()
        .zip(delta)
        .map(|(a, b)| a + b)
        .collect();
    if shifted.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidMarginal(
            "perturbed marginal has negative entries".into(),
        ));
    }
    if delta.iter().sum::<f64>().abs() > 1e-12 {
        return Err(Error::InvalidMarginal(
            "perturbation must sum to zero".into(),
        ));
    }
    let base = solve(&build_sdp_coulomb(spec)?, settings)?;
    let cert = extract_kantorovich(&base, n)?;
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(SubgradientCheck {
            predicted: 0.0,
            actual: 0.0,
            base_value: base.primal_objective,
        });
    }
    let moved = spec
        .clone()
        .with_marginal(Marginal::from_weights(shifted, MarginalKind::Custom)?);
    let other = solve(&build_sdp_coulomb(&moved)?, settings)?;
    let predicted = cert.w.iter().zip(delta).map(|(a, b)| a * b).sum();
    Ok(SubgradientCheck {
        predicted,
        actual: other.primal_objective - base.primal_objective,
        base_value: base.primal_objective,
    })
}
