//! Rounding of relaxed solutions to physical mixtures of quantized densities,
//! giving upper bounds on the transport energy.

mod als;
mod fit;
mod jenrich;

use std::collections::BTreeSet;

use faer::Mat;
use log::{debug, warn};

use crate::conic::{solve_with_start, SdpSolution, SolveStatus, SolverSettings, WarmStart};
use crate::error::{Error, Result};
use crate::grid::Marginal;
use crate::linalg::sym_eig;
use crate::relaxations::{
    build_sdp_coulomb_pinned, energy, gamma_ext, lambda_from_solution, lambda_from_theta,
    PairMarginal, PairwiseMoment, ProblemSpec, TripleMoment,
};

pub use als::{als_factor, als_refine, enumerate_candidates, AlsTrace};
pub use fit::{
    energy_reweight, mixture_gamma, mixture_theta, pair_fit, simplex_fit, MARGINAL_TOL, SUM_TOL,
};
pub use jenrich::jenrich;

/// Uniform density `1/N` on `N` distinct sites.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantizedDensity {
    support: Vec<usize>,
    sites: usize,
}

impl QuantizedDensity {
    pub fn new(mut support: Vec<usize>, sites: usize) -> Result<Self> {
        support.sort_unstable();
        if support.is_empty() {
            return Err(Error::InvalidProblem(
                "quantized density needs a nonempty support".into(),
            ));
        }
        if support.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidProblem(
                "support sites must be distinct".into(),
            ));
        }
        if support[support.len() - 1] >= sites {
            return Err(Error::InvalidProblem(format!(
                "support site outside {sites} sites"
            )));
        }
        Ok(Self { support, sites })
    }

    /// The `N` largest entries of `v`, ties to the lowest index.
    pub fn top_entries(v: &[f64], electrons: usize) -> Result<Self> {
        if electrons == 0 || electrons > v.len() {
            return Err(Error::InvalidProblem(format!(
                "cannot place {electrons} electrons on {} sites",
                v.len()
            )));
        }
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        order.truncate(electrons);
        Self::new(order, v.len())
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn electrons(&self) -> usize {
        self.support.len()
    }

    pub fn density(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.sites];
        let w = 1.0 / self.electrons() as f64;
        for &i in &self.support {
            v[i] = w;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateSource {
    Jenrich,
    AlsEnumeration,
    /// Large entries of a column of the pairwise moment.
    PairColumn,
    /// Configurations of a mixture that reproduces the marginal exactly.
    MarginalSplit,
    /// One electron of an active configuration moved to a nearest site.
    LocalShift,
}

impl CandidateSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateSource::Jenrich => "jenrich",
            CandidateSource::AlsEnumeration => "als-enumeration",
            CandidateSource::PairColumn => "pair-column",
            CandidateSource::MarginalSplit => "marginal-split",
            CandidateSource::LocalShift => "local-shift",
        }
    }
}

/// Distinct quantized densities with the stage that produced each.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub candidates: Vec<QuantizedDensity>,
    pub sources: Vec<CandidateSource>,
    seen: BTreeSet<Vec<usize>>,
}

impl CandidateSet {
    /// Adds `q` unless already present. Returns whether it was new.
    pub fn push(&mut self, q: QuantizedDensity, source: CandidateSource) -> bool {
        if !self.seen.insert(q.support.clone()) {
            return false;
        }
        self.candidates.push(q);
        self.sources.push(source);
        true
    }

    pub fn extend(&mut self, other: CandidateSet) {
        for (q, s) in other.candidates.into_iter().zip(other.sources) {
            self.push(q, s);
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundingSettings {
    /// Entries with `|R(j,i)| > delta/N` enter the enumeration.
    pub delta: f64,
    /// `lambda_2 / lambda_1` below this counts as rank one.
    pub rank_tol: f64,
    /// Relative fit change that ends an ALS round.
    pub als_tol: f64,
    /// Enumeration keeps at most `N + width` sites per column.
    pub width: usize,
    pub als_max_sweeps: usize,
    pub seed: u64,
    /// Re-optimize the fitted mixture weights for energy.
    pub reweight: bool,
    /// Rounds of nearest-site moves during energy reweighting.
    pub shift_rounds: usize,
}

impl Default for RoundingSettings {
    fn default() -> Self {
        Self {
            delta: 0.5,
            rank_tol: 1e-6,
            als_tol: 1e-8,
            width: 3,
            als_max_sweeps: 500,
            seed: 0,
            reweight: true,
            shift_rounds: 8,
        }
    }
}

impl RoundingSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delta > 0.0
            && self.rank_tol > 0.0
            && self.als_tol > 0.0
            && self.width > 0
            && self.als_max_sweeps > 0;
        if !ok {
            return Err(Error::InvalidProblem(
                "rounding settings must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A mixture `sum a_i lambda_i` of candidates fitted to a relaxed solution.
#[derive(Debug, Clone)]
pub struct RoundedSolution {
    pub weights: Vec<f64>,
    pub candidates: CandidateSet,
    /// Rebuilt three-body moment, present when fitting a three-body moment.
    pub theta: Option<TripleMoment>,
    pub gamma: PairMarginal,
    pub upper_energy: f64,
    /// Energy of the regression weights, before any energy reweighting.
    pub regression_energy: f64,
    /// `max_i |sum_k a_k lambda_k(i) - rho(i)|`.
    pub marginal_error: f64,
    pub sum_error: f64,
    pub fit_objective: f64,
    /// Whether the mixture meets the marginal within tolerance, so that its energy
    /// is a valid upper bound.
    pub feasible: bool,
}

impl RoundedSolution {
    /// Candidates carrying weight above `tol`, with their weights.
    pub fn active(&self, tol: f64) -> Vec<(&QuantizedDensity, f64)> {
        self.candidates
            .candidates
            .iter()
            .zip(&self.weights)
            .filter(|(_, &a)| a > tol)
            .map(|(q, &a)| (q, a))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinStatus {
    /// The pairwise moment became numerically rank one.
    RankOne,
    /// All `N` sites were pinned before a rank-one moment appeared; the best
    /// quantization seen is returned.
    PinLimit,
}

#[derive(Debug, Clone)]
pub struct UnconstrainedRounding {
    pub density: QuantizedDensity,
    pub gamma: PairMarginal,
    pub upper_energy: f64,
    /// Optimum of the unpinned relaxation.
    pub lower_energy: f64,
    pub pins: Vec<usize>,
    pub solves: usize,
    pub status: PinStatus,
    /// Solution of the unpinned relaxation.
    pub relaxed: SdpSolution,
}

fn rank_ratio(moment: &PairwiseMoment) -> Result<f64> {
    let (vals, _) = sym_eig(moment.matrix.as_ref())?;
    let n = vals.len();
    let top = vals[n - 1];
    if top <= 0.0 {
        return Err(Error::Numerical(
            "pairwise moment has no positive eigenvalue".into(),
        ));
    }
    Ok(if n > 1 {
        vals[n - 2].max(0.0) / top
    } else {
        0.0
    })
}

fn check_solution(sol: &SdpSolution) -> Result<()> {
    match sol.status {
        SolveStatus::Solved => Ok(()),
        SolveStatus::MaxIter => {
            warn!(
                "relaxation stopped at the iteration limit, residual {:.2e}",
                sol.residuals.max()
            );
            Ok(())
        }
        SolveStatus::InfeasibleGuess => Err(Error::Numerical(
            "relaxation constraints are inconsistent".into(),
        )),
    }
}

/// Rounding without a marginal constraint: repeatedly pins the largest unpinned
/// diagonal entry of the pairwise moment until the moment is rank one.
pub fn round_unconstrained(
    spec: &ProblemSpec,
    settings: &RoundingSettings,
    solver: &SolverSettings,
) -> Result<UnconstrainedRounding> {
    settings.validate()?;
    if spec.marginal.is_some() {
        return Err(Error::InvalidProblem(
            "pinning rounding applies only without a marginal constraint".into(),
        ));
    }
    let n = spec.sites();
    let electrons = spec.electrons;
    let potential = spec.potential.as_deref();
    let mut pins: Vec<usize> = Vec::new();
    let mut warm: Option<WarmStart> = None;
    let mut relaxed: Option<SdpSolution> = None;
    let mut best: Option<(QuantizedDensity, f64)> = None;
    let mut solves = 0;
    loop {
        let problem = build_sdp_coulomb_pinned(spec, &pins)?;
        let sol = solve_with_start(&problem, solver, warm.as_ref())?;
        check_solution(&sol)?;
        solves += 1;
        let moment = lambda_from_solution(&sol, n)?;
        let diag: Vec<f64> = (0..n).map(|i| moment.matrix[(i, i)]).collect();
        let q = QuantizedDensity::top_entries(&diag, electrons)?;
        let e = energy(
            &gamma_ext(&q.density(), electrons)?,
            &spec.cost,
            electrons,
            potential,
        );
        if best.as_ref().is_none_or(|(_, b)| e < *b) {
            best = Some((q.clone(), e));
        }
        let ratio = rank_ratio(&moment)?;
        debug!(
            "pinning pass {solves}: pins {pins:?}, rank ratio {ratio:.2e}, candidate energy {e:.8}"
        );
        warm = Some(sol.warm.clone());
        if relaxed.is_none() {
            relaxed = Some(sol);
        }
        let rank_one = ratio < settings.rank_tol;
        if !rank_one {
            // Entries within the solver accuracy of each other count as tied.
            let top = diag.iter().copied().fold(0.0_f64, f64::max);
            let tie = 10.0 * solver.tol * top;
            let next = (0..n)
                .filter(|i| !pins.contains(i))
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(j) if diag[j] + tie >= diag[i] => Some(j),
                    _ => Some(i),
                })
                .expect("fewer pins than sites");
            pins.push(next);
            if pins.len() < electrons {
                continue;
            }
            // A full set of pins fixes the support.
            let pinned = QuantizedDensity::new(pins.clone(), n)?;
            let e = energy(
                &gamma_ext(&pinned.density(), electrons)?,
                &spec.cost,
                electrons,
                potential,
            );
            if best.as_ref().is_none_or(|(_, b)| e < *b) {
                best = Some((pinned, e));
            }
            warn!("no rank-one moment before pinning all {electrons} sites; keeping the best quantization");
        }
        let (density, upper) = if rank_one {
            (q, e)
        } else {
            best.expect("at least one pass ran")
        };
        let relaxed = relaxed.expect("at least one pass ran");
        return Ok(UnconstrainedRounding {
            gamma: gamma_ext(&density.density(), electrons)?,
            density,
            upper_energy: upper,
            lower_energy: relaxed.primal_objective,
            pins,
            solves,
            status: if rank_one {
                PinStatus::RankOne
            } else {
                PinStatus::PinLimit
            },
            relaxed,
        });
    }
}

fn warn_small_marginal(rho: &Marginal) {
    let n = rho.len();
    let floor = 1e-3 / n as f64;
    let min = rho.weights().iter().copied().fold(f64::INFINITY, f64::min);
    if min < floor {
        warn!("marginal minimum {min:.3e} is below {floor:.3e}; rounding may be unreliable");
    }
}

/// Rounding with a marginal constraint from a three-body moment: Jenrich components
/// seed the snapped ALS, whose enumerated candidates are fitted on the simplex.
pub fn round_constrained(
    theta: &TripleMoment,
    rho: &Marginal,
    spec: &ProblemSpec,
    settings: &RoundingSettings,
) -> Result<RoundedSolution> {
    let fit = round_constrained_fit(theta, rho, spec, settings)?;
    if !settings.reweight {
        return Ok(fit);
    }
    energy_reweight(
        fit,
        rho,
        &spec.cost,
        spec.potential.as_deref(),
        settings.shift_rounds,
    )
}

fn round_constrained_fit(
    theta: &TripleMoment,
    rho: &Marginal,
    spec: &ProblemSpec,
    settings: &RoundingSettings,
) -> Result<RoundedSolution> {
    settings.validate()?;
    let n = theta.tensor.n;
    if rho.len() != n || spec.sites() != n {
        return Err(Error::InvalidProblem(
            "moment, marginal and problem disagree in size".into(),
        ));
    }
    warn_small_marginal(rho);
    let electrons = spec.electrons;
    let components = jenrich(theta, electrons, settings.seed)?;
    let mut set = CandidateSet::default();
    for v in &components {
        set.push(
            QuantizedDensity::top_entries(v, electrons)?,
            CandidateSource::Jenrich,
        );
    }
    set.extend(als_refine(theta, &components, electrons, settings)?);
    debug!(
        "constrained rounding: {} components, {} candidates",
        components.len(),
        set.len()
    );
    let potential = spec.potential.as_deref();
    let fit = simplex_fit(theta, &set, rho, &spec.cost, potential)?;
    if fit.feasible {
        return Ok(fit);
    }
    // Widen the candidate pool with pair-column candidates of the implied pairwise moment.
    let before = set.len();
    set.extend(pair_column_candidates(
        &lambda_from_theta(theta),
        electrons,
        settings,
    )?);
    if set.len() > before {
        debug!(
            "constrained rounding: refitting with {} candidates",
            set.len()
        );
        let fit = simplex_fit(theta, &set, rho, &spec.cost, potential)?;
        if fit.feasible {
            return Ok(fit);
        }
    }
    set.extend(split_candidates(rho, electrons)?);
    simplex_fit(theta, &set, rho, &spec.cost, potential)
}

/// Writes `rho` as a mixture of quantized densities. Needs `rho_i <= 1/N`.
///
/// Each step removes as much of the `N` largest remaining entries as possible; an
/// entry either empties or becomes saturated, so there are at most `|X| + 1` steps.
pub fn marginal_split(rho: &Marginal, electrons: usize) -> Result<Vec<(QuantizedDensity, f64)>> {
    let n = rho.len();
    if electrons == 0 || electrons > n {
        return Err(Error::InvalidProblem(format!(
            "cannot place {electrons} electrons on {n} sites"
        )));
    }
    let nf = electrons as f64;
    let mut x: Vec<f64> = rho.weights().iter().map(|r| nf * r).collect();
    if let Some(i) = (0..n).find(|&i| x[i] > 1.0 + 1e-12) {
        return Err(Error::InvalidMarginal(format!(
            "site {i} carries more than 1/N of the density"
        )));
    }
    // Remaining mixture weight; every entry stays at most `left`.
    let mut left = 1.0_f64;
    let mut out = Vec::new();
    for _ in 0..=n + 1 {
        if left <= 1e-15 {
            break;
        }
        let q = QuantizedDensity::top_entries(&x, electrons)?;
        let inside = q.support();
        let low = inside.iter().map(|&i| x[i]).fold(f64::INFINITY, f64::min);
        let high = (0..n)
            .filter(|i| inside.binary_search(i).is_err())
            .map(|i| x[i])
            .fold(0.0_f64, f64::max);
        let step = low.min(left - high).min(left).max(0.0);
        if step <= 1e-15 {
            break;
        }
        for &i in inside {
            x[i] = (x[i] - step).max(0.0);
        }
        left -= step;
        out.push((q, step));
    }
    Ok(out)
}

fn split_candidates(rho: &Marginal, electrons: usize) -> Result<CandidateSet> {
    let mut set = CandidateSet::default();
    for (q, _) in marginal_split(rho, electrons)? {
        set.push(q, CandidateSource::MarginalSplit);
    }
    Ok(set)
}

/// Candidates from each column `Lambda(:,i) / (N Lambda(i,i))`, which for a mixture
/// is the average of the components containing site `i`.
pub fn pair_column_candidates(
    moment: &PairwiseMoment,
    electrons: usize,
    settings: &RoundingSettings,
) -> Result<CandidateSet> {
    let n = moment.matrix.nrows();
    if electrons == 0 || electrons > n {
        return Err(Error::InvalidProblem(format!(
            "cannot place {electrons} electrons on {n} sites"
        )));
    }
    let top = (0..n)
        .map(|i| moment.matrix[(i, i)])
        .fold(0.0_f64, f64::max);
    let nf = electrons as f64;
    let cols: Vec<usize> = (0..n)
        .filter(|&i| moment.matrix[(i, i)] > 1e-9 * top)
        .collect();
    let r = Mat::from_fn(n, cols.len(), |j, c| {
        let i = cols[c];
        moment.matrix[(j, i)] / (nf * moment.matrix[(i, i)])
    });
    let mut set = CandidateSet::default();
    for c in 0..cols.len() {
        let col: Vec<f64> = (0..n).map(|j| r[(j, c)]).collect();
        set.push(
            QuantizedDensity::top_entries(&col, electrons)?,
            CandidateSource::PairColumn,
        );
    }
    let enumerated = enumerate_candidates(&r, electrons, settings);
    for (q, _) in enumerated.candidates.into_iter().zip(enumerated.sources) {
        set.push(q, CandidateSource::PairColumn);
    }
    Ok(set)
}

/// Rounding with a marginal constraint from the pairwise relaxation alone: fits the
/// pair marginal by candidates read from the columns of the pairwise moment. For
/// two electrons every pair of sites is a candidate.
pub fn round_pairwise(
    moment: &PairwiseMoment,
    rho: &Marginal,
    spec: &ProblemSpec,
    settings: &RoundingSettings,
) -> Result<RoundedSolution> {
    let fit = round_pairwise_fit(moment, rho, spec, settings)?;
    if !settings.reweight {
        return Ok(fit);
    }
    energy_reweight(
        fit,
        rho,
        &spec.cost,
        spec.potential.as_deref(),
        settings.shift_rounds,
    )
}

fn round_pairwise_fit(
    moment: &PairwiseMoment,
    rho: &Marginal,
    spec: &ProblemSpec,
    settings: &RoundingSettings,
) -> Result<RoundedSolution> {
    settings.validate()?;
    let n = moment.matrix.nrows();
    if rho.len() != n || spec.sites() != n {
        return Err(Error::InvalidProblem(
            "moment, marginal and problem disagree in size".into(),
        ));
    }
    warn_small_marginal(rho);
    let electrons = spec.electrons;
    let set = if electrons == 2 {
        let mut set = CandidateSet::default();
        for j in 0..n {
            for i in 0..j {
                set.push(
                    QuantizedDensity::new(vec![i, j], n)?,
                    CandidateSource::PairColumn,
                );
            }
        }
        set
    } else {
        pair_column_candidates(moment, electrons, settings)?
    };
    let gamma = crate::relaxations::gamma_from_lambda(moment, electrons)?;
    let potential = spec.potential.as_deref();
    let fit = pair_fit(&gamma, &set, rho, &spec.cost, potential)?;
    if fit.feasible || electrons == 2 {
        return Ok(fit);
    }
    let mut set = set;
    set.extend(split_candidates(rho, electrons)?);
    pair_fit(&gamma, &set, rho, &spec.cost, potential)
}

/// `(upper - lower) / lower`.
pub fn energy_gap(lower: f64, upper: f64) -> Result<f64> {
    if !(lower > 0.0) {
        return Err(Error::InvalidProblem(format!(
            "energy gap needs a positive lower bound, got {lower}"
        )));
    }
    Ok((upper - lower) / lower)
}
