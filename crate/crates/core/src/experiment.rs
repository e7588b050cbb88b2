//! Experiment pipelines shared by the command-line tool, benchmarks and tests:
//! instance construction, seeded random potentials and per-command runs producing
//! [`EnergyReport`]s.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conic::{solve, SdpSolution, SolveStatus, SolverSettings};
use crate::dual::{align_potential, comotion_potential, extract_kantorovich, potential_error};
use crate::error::{Error, Result};
use crate::grid::{
    build_grid, coulomb_cost, make_marginal, CostMatrix, Grid, Marginal, MarginalKind,
};
use crate::oracle::{exact_min_marginal, exact_min_unconstrained, MarginalOptimum};
use crate::relaxations::{
    build_sdp_coulomb, build_sdp_coulomb2, gamma_from_lambda, kappa_from_theta,
    lambda_from_solution, marginalize3to2, theta_from_solution, PairMarginal, ProblemSpec,
    TripleMoment,
};
use crate::rounding::{
    energy_gap, round_constrained, round_pairwise, round_unconstrained, RoundingSettings,
};

/// Grids above this many points need an explicit opt-in.
pub const LARGE_GRID: usize = 1000;

/// Run configuration. Every field has a default so partial config files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub points_per_dim: usize,
    pub half_width: f64,
    pub electrons: usize,
    /// `uniform`, `gaussian`, `sine`, `gaussian2d`, `file:PATH` or `none`.
    pub marginal: String,
    /// Scale of the random one-body potential in units of the smallest pair cost.
    pub sigma: f64,
    pub realizations: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub delta: f64,
    /// Re-optimize rounded mixture weights for energy.
    pub reweight: bool,
    /// Rounds of nearest-site moves during reweighting.
    pub shift_rounds: usize,
    pub out: Option<PathBuf>,
    pub large: bool,
    pub compare_truth: bool,
    /// Electron counts of a table run.
    pub table_electrons: Vec<usize>,
    /// Potential scales of a table run.
    pub table_sigmas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            points_per_dim: 16,
            half_width: 2.0,
            electrons: 3,
            marginal: "none".into(),
            sigma: 0.0,
            realizations: 1,
            seed: 0,
            tol: 1e-6,
            max_iter: 50_000,
            delta: 0.5,
            reweight: true,
            shift_rounds: 8,
            out: None,
            large: false,
            compare_truth: false,
            table_electrons: vec![5, 9, 13],
            table_sigmas: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::InvalidProblem(
                "realizations must be at least 1".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.table_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidProblem(
                "table sigmas must be nonnegative".into(),
            ));
        }
        let size = self
            .points_per_dim
            .checked_pow(self.dim as u32)
            .unwrap_or(usize::MAX);
        if size > LARGE_GRID && !self.large {
            return Err(Error::Guard(format!(
                "grid of {size} points exceeds {LARGE_GRID}; pass the large-run flag to proceed"
            )));
        }
        if size > LARGE_GRID {
            warn!("large run: {size} grid points, expect long run times and heavy memory use");
        }
        self.solver_settings().validate()?;
        self.rounding_settings().validate()
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            rng_seed: self.seed,
            ..SolverSettings::default()
        }
    }

    pub fn rounding_settings(&self) -> RoundingSettings {
        RoundingSettings {
            delta: self.delta,
            seed: self.seed,
            reweight: self.reweight,
            shift_rounds: self.shift_rounds,
            ..RoundingSettings::default()
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        build_grid(self.dim, self.points_per_dim, self.half_width)
    }

    /// The configured marginal, or `None` for an unconstrained run.
    pub fn load_marginal(&self, grid: &Grid) -> Result<Option<Marginal>> {
        let m = self.marginal.trim();
        if m.is_empty() || m == "none" {
            return Ok(None);
        }
        if let Some(path) = m.strip_prefix("file:") {
            return Marginal::from_file(Path::new(path), grid).map(Some);
        }
        let kind: MarginalKind = m.parse()?;
        make_marginal(kind, grid).map(Some)
    }

    /// Problem for realization `k` of the random potential.
    pub fn instance(&self, realization: u64) -> Result<Instance> {
        self.validate()?;
        let grid = self.grid()?;
        let cost = coulomb_cost(&grid);
        let mut spec = ProblemSpec::new(self.electrons, cost);
        if let Some(m) = self.load_marginal(&grid)? {
            spec = spec.with_marginal(m);
        }
        if self.sigma > 0.0 {
            let c = random_potential(&spec.cost, self.sigma, self.seed, realization);
            spec = spec.with_potential(c);
        }
        spec.validate()?;
        Ok(Instance { grid, spec })
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub grid: Grid,
    pub spec: ProblemSpec,
}

/// `c = sigma * min_{i != j} C(i,j) * g` with standard normal `g`, drawn from stream
/// `realization` of the generator seeded with `seed`.
pub fn random_potential(cost: &CostMatrix, sigma: f64, seed: u64, realization: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(realization);
    let scale = sigma * cost.min_off_diagonal();
    (0..cost.len())
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            scale * g
        })
        .collect()
}

/// Where a bound comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SdpCoulomb,
    SdpCoulomb2,
    Oracle,
    Rounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub status: String,
    pub iterations: usize,
    pub residual: f64,
    pub seconds: f64,
}

impl StageStats {
    fn from_solution(stage: &str, sol: &SdpSolution) -> Self {
        Self {
            stage: stage.into(),
            status: format!("{:?}", sol.status),
            iterations: sol.iterations,
            residual: sol.residuals.max(),
            seconds: sol.seconds,
        }
    }

    fn timed(stage: &str, status: &str, seconds: f64) -> Self {
        Self {
            stage: stage.into(),
            status: status.into(),
            iterations: 0,
            residual: 0.0,
            seconds,
        }
    }
}

/// Result of one run, serialized as the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub command: String,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub e_gap: Option<f64>,
    pub lower_source: Option<Provenance>,
    pub upper_source: Option<Provenance>,
    pub stages: Vec<StageStats>,
    pub wall_seconds: f64,
    /// Named secondary quantities, such as the pairwise gap of a three-body run
    /// or the potential error.
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
}

impl EnergyReport {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            lower_bound: None,
            upper_bound: None,
            e_gap: None,
            lower_source: None,
            upper_source: None,
            stages: Vec::new(),
            wall_seconds: 0.0,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
            config: config.clone(),
        }
    }

    fn set_lower(&mut self, value: f64, source: Provenance) {
        self.lower_bound = Some(value);
        self.lower_source = Some(source);
        self.refresh_gap();
    }

    fn set_upper(&mut self, value: f64, source: Provenance) {
        self.upper_bound = Some(value);
        self.upper_source = Some(source);
        self.refresh_gap();
    }

    fn refresh_gap(&mut self) {
        self.e_gap = match (self.lower_bound, self.upper_bound) {
            (Some(l), Some(u)) => energy_gap(l, u).ok(),
            _ => None,
        };
    }

    /// Whether every conic solve reached its tolerance.
    pub fn converged(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.status != format!("{:?}", SolveStatus::MaxIter))
    }
}

fn require_solved(sol: &SdpSolution, stage: &str) -> Result<()> {
    match sol.status {
        SolveStatus::Solved => Ok(()),
        SolveStatus::MaxIter => {
            warn!(
                "{stage}: iteration limit reached with residual {:.2e}",
                sol.residuals.max()
            );
            Ok(())
        }
        SolveStatus::InfeasibleGuess => Err(Error::Numerical(format!(
            "{stage}: constraints are inconsistent"
        ))),
    }
}

/// Output of the pairwise solve.
#[derive(Debug, Clone)]
pub struct PairwiseRun {
    pub report: EnergyReport,
    pub solution: SdpSolution,
    pub gamma: PairMarginal,
    pub instance: Instance,
}

pub fn run_solve2(config: &ExperimentConfig) -> Result<PairwiseRun> {
    let start = Instant::now();
    let instance = config.instance(0)?;
    let spec = &instance.spec;
    let sol = solve(&build_sdp_coulomb(spec)?, &config.solver_settings())?;
    require_solved(&sol, "pairwise relaxation")?;
    let moment = lambda_from_solution(&sol, spec.sites())?;
    let gamma = gamma_from_lambda(&moment, spec.electrons)?;
    let mut report = EnergyReport::new("solve2", config);
    report
        .stages
        .push(StageStats::from_solution("sdp-coulomb", &sol));
    report.set_lower(sol.primal_objective, Provenance::SdpCoulomb);
    report
        .metrics
        .insert("dual_objective".into(), sol.dual_objective);
    report.wall_seconds = start.elapsed().as_secs_f64();
    info!(
        "pairwise lower bound {:.10} in {:.1}s",
        sol.primal_objective, report.wall_seconds
    );
    Ok(PairwiseRun {
        report,
        solution: sol,
        gamma,
        instance,
    })
}

/// Output of the three-body solve.
#[derive(Debug, Clone)]
pub struct TripleRun {
    pub report: EnergyReport,
    pub solution: SdpSolution,
    pub theta: TripleMoment,
    pub gamma: PairMarginal,
    pub instance: Instance,
}

pub fn run_solve3(config: &ExperimentConfig) -> Result<TripleRun> {
    let start = Instant::now();
    let instance = config.instance(0)?;
    let spec = &instance.spec;
    if spec.electrons < 3 {
        return Err(Error::TooFewElectrons {
            n: spec.electrons,
            min: 3,
        });
    }
    let sol = solve(&build_sdp_coulomb2(spec)?, &config.solver_settings())?;
    require_solved(&sol, "three-body relaxation")?;
    let theta = theta_from_solution(&sol, spec.sites())?;
    let gamma = marginalize3to2(&kappa_from_theta(&theta, spec.electrons)?);
    let mut report = EnergyReport::new("solve3", config);
    report
        .stages
        .push(StageStats::from_solution("sdp-coulomb2", &sol));
    report.set_lower(sol.primal_objective, Provenance::SdpCoulomb2);
    report
        .metrics
        .insert("dual_objective".into(), sol.dual_objective);
    report.wall_seconds = start.elapsed().as_secs_f64();
    info!(
        "three-body lower bound {:.10} in {:.1}s",
        sol.primal_objective, report.wall_seconds
    );
    Ok(TripleRun {
        report,
        solution: sol,
        theta,
        gamma,
        instance,
    })
}

/// Output of a rounding run; `gamma` is the rounded pair marginal when one exists.
#[derive(Debug, Clone)]
pub struct RoundRun {
    pub report: EnergyReport,
    pub gamma: Option<PairMarginal>,
    /// Lower-bound pair marginal of the relaxation the upper bound was rounded from.
    pub relaxed_gamma: PairMarginal,
}

/// Rounds without a marginal by pinning, or with a marginal by fitting both the
/// pairwise moment and (for `N >= 3`) the three-body moment.
pub fn run_round(config: &ExperimentConfig) -> Result<RoundRun> {
    let start = Instant::now();
    let instance = config.instance(0)?;
    let spec = instance.spec.clone();
    let rounding = config.rounding_settings();
    let solver = config.solver_settings();
    let mut report = EnergyReport::new("round", config);

    let Some(rho) = spec.marginal.clone() else {
        let t = Instant::now();
        let out = round_unconstrained(&spec, &rounding, &solver)?;
        report
            .stages
            .push(StageStats::from_solution("sdp-coulomb", &out.relaxed));
        report.stages.push(StageStats::timed(
            "pinning",
            &format!("{:?}", out.status),
            t.elapsed().as_secs_f64(),
        ));
        report
            .metrics
            .insert("pinning_solves".into(), out.solves as f64);
        report.set_lower(out.lower_energy, Provenance::SdpCoulomb);
        report.set_upper(out.upper_energy, Provenance::Rounded);
        report.wall_seconds = start.elapsed().as_secs_f64();
        let relaxed_gamma = gamma_from_lambda(
            &lambda_from_solution(&out.relaxed, spec.sites())?,
            spec.electrons,
        )?;
        return Ok(RoundRun {
            report,
            gamma: Some(out.gamma),
            relaxed_gamma,
        });
    };

    let pair = run_solve2(config)?;
    report.stages.extend(pair.report.stages.iter().cloned());
    let lower1 = pair.solution.primal_objective;
    let t = Instant::now();
    let moment = lambda_from_solution(&pair.solution, spec.sites())?;
    let rounded1 = round_pairwise(&moment, &rho, &spec, &rounding)?;
    report.stages.push(StageStats::timed(
        "pairwise-rounding",
        feasibility(rounded1.feasible),
        t.elapsed().as_secs_f64(),
    ));
    report.metrics.insert("lower_pairwise".into(), lower1);
    report
        .metrics
        .insert("marginal_error_pairwise".into(), rounded1.marginal_error);
    if rounded1.feasible {
        report
            .metrics
            .insert("upper_pairwise".into(), rounded1.upper_energy);
        report.metrics.insert(
            "regression_energy_pairwise".into(),
            rounded1.regression_energy,
        );
        report.metrics.insert(
            "e_gap_pairwise".into(),
            energy_gap(lower1, rounded1.upper_energy)?,
        );
    } else {
        report
            .notes
            .push("pairwise rounding missed the marginal; no pairwise upper bound".into());
    }

    if spec.electrons < 3 {
        report.set_lower(lower1, Provenance::SdpCoulomb);
        if rounded1.feasible {
            report.set_upper(rounded1.upper_energy, Provenance::Rounded);
        }
        report.wall_seconds = start.elapsed().as_secs_f64();
        let gamma = rounded1.feasible.then_some(rounded1.gamma);
        return Ok(RoundRun {
            report,
            gamma,
            relaxed_gamma: pair.gamma,
        });
    }

    let triple = run_solve3(config)?;
    report.stages.extend(triple.report.stages.iter().cloned());
    let lower2 = triple.solution.primal_objective;
    report.metrics.insert("lower_three_body".into(), lower2);
    report.set_lower(lower2, Provenance::SdpCoulomb2);
    let t = Instant::now();
    let rounded2 = round_constrained(&triple.theta, &rho, &spec, &rounding)?;
    report.stages.push(StageStats::timed(
        "three-body-rounding",
        feasibility(rounded2.feasible),
        t.elapsed().as_secs_f64(),
    ));
    report
        .metrics
        .insert("marginal_error_three_body".into(), rounded2.marginal_error);
    report
        .metrics
        .insert("candidates".into(), rounded2.candidates.len() as f64);
    let mut gamma = None;
    if rounded2.feasible {
        report.set_upper(rounded2.upper_energy, Provenance::Rounded);
        report
            .metrics
            .insert("upper_three_body".into(), rounded2.upper_energy);
        report.metrics.insert(
            "regression_energy_three_body".into(),
            rounded2.regression_energy,
        );
        gamma = Some(rounded2.gamma);
    } else {
        report
            .notes
            .push("three-body rounding missed the marginal; no upper bound".into());
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(RoundRun {
        report,
        gamma,
        relaxed_gamma: triple.gamma,
    })
}

fn feasibility(ok: bool) -> &'static str {
    if ok {
        "feasible"
    } else {
        "infeasible"
    }
}

/// Potential comparison on a one-dimensional grid.
#[derive(Debug, Clone)]
pub struct DualRun {
    pub report: EnergyReport,
    pub points: Vec<f64>,
    /// Potential read from the relaxation's multipliers.
    pub w: Vec<f64>,
    /// Comotion reference aligned to `w`, when computed.
    pub v_true: Option<Vec<f64>>,
}

pub fn run_dual(config: &ExperimentConfig) -> Result<DualRun> {
    let start = Instant::now();
    let pair = run_solve2(config)?;
    let spec = &pair.instance.spec;
    let rho = spec
        .marginal
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem("the dual potential needs a marginal".into()))?;
    let cert = extract_kantorovich(&pair.solution, spec.sites())?;
    let mut report = pair.report.clone();
    report.command = "dual".into();
    report.metrics.insert("w_dot_rho".into(), cert.value(rho));
    let points: Vec<f64> = pair.instance.grid.points().map(|p| p[0]).collect();
    let mut v_true = None;
    if config.compare_truth {
        if pair.instance.grid.dim() != 1 {
            return Err(Error::InvalidGrid(
                "ground-truth comparison needs a one-dimensional grid".into(),
            ));
        }
        let set = comotion_potential(rho, spec.electrons, &pair.instance.grid, None)?;
        let aligned = align_potential(&set.potential, &cert.w, rho)?;
        let err = potential_error(&aligned, &cert.w)?;
        report.metrics.insert("error_v".into(), err);
        info!("potential error {err:.3e}");
        v_true = Some(aligned);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(DualRun {
        report,
        points,
        w: cert.w,
        v_true,
    })
}

/// Exact solution by enumeration, with optional comparison against the relaxation.
pub fn run_oracle(config: &ExperimentConfig) -> Result<EnergyReport> {
    let start = Instant::now();
    let instance = config.instance(0)?;
    let spec = &instance.spec;
    let potential = spec.potential.as_deref();
    let mut report = EnergyReport::new("oracle", config);
    let value = match &spec.marginal {
        None => {
            let (atom, value) = exact_min_unconstrained(&spec.cost, spec.electrons, potential)?;
            report.notes.push(format!("optimal sites {:?}", atom.sites));
            value
        }
        Some(rho) => match exact_min_marginal(&spec.cost, spec.electrons, rho, potential)? {
            MarginalOptimum::Optimal { measure, value } => {
                report
                    .metrics
                    .insert("active_atoms".into(), measure.atoms.len() as f64);
                value
            }
            MarginalOptimum::Infeasible { residual } => {
                return Err(Error::InvalidMarginal(format!(
                    "no mixture of configurations has this marginal (residual {residual:.2e})"
                )))
            }
        },
    };
    report.stages.push(StageStats::timed(
        "enumeration",
        "exact",
        start.elapsed().as_secs_f64(),
    ));
    report.metrics.insert("exact".into(), value);
    if config.compare_truth {
        let pair = run_solve2(config)?;
        let lower = pair.solution.primal_objective;
        let scale = 1.0 + value.abs();
        report.stages.extend(pair.report.stages.iter().cloned());
        report.set_lower(lower, Provenance::SdpCoulomb);
        report.set_upper(value, Provenance::Oracle);
        let ok = lower <= value + 10.0 * config.tol * scale;
        report.notes.push(format!(
            "sandwich lower <= exact: {}",
            if ok { "PASS" } else { "FAIL" }
        ));
        report
            .metrics
            .insert("sandwich_pass".into(), if ok { 1.0 } else { 0.0 });
    } else {
        report.upper_bound = Some(value);
        report.upper_source = Some(Provenance::Oracle);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One cell of a gap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub electrons: usize,
    pub sigma: f64,
    pub gaps: Vec<f64>,
    pub mean_gap: Option<f64>,
    pub failures: Vec<String>,
}

/// Mean pinning-rounding gap over random potentials for each electron count and
/// potential scale. Failures are recorded per realization.
pub fn run_bench_table(config: &ExperimentConfig) -> Result<Vec<TableCell>> {
    config.validate()?;
    let mut cells = Vec::new();
    for &electrons in &config.table_electrons {
        for &sigma in &config.table_sigmas {
            let cell_config = ExperimentConfig {
                electrons,
                sigma,
                marginal: "none".into(),
                ..config.clone()
            };
            let mut gaps = Vec::new();
            let mut failures = Vec::new();
            for k in 0..config.realizations {
                let outcome = cell_config.instance(k as u64).and_then(|inst| {
                    round_unconstrained(
                        &inst.spec,
                        &cell_config.rounding_settings(),
                        &cell_config.solver_settings(),
                    )
                    .and_then(|r| energy_gap(r.lower_energy, r.upper_energy))
                });
                match outcome {
                    Ok(g) => gaps.push(g),
                    Err(e) => failures.push(format!("realization {k}: {e}")),
                }
            }
            let mean_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
            info!("table cell N={electrons} sigma={sigma}: mean gap {mean_gap:?}");
            cells.push(TableCell {
                electrons,
                sigma,
                gaps,
                mean_gap,
                failures,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_zero_potential() {
        let cost = coulomb_cost(&build_grid(1, 5, 2.0).unwrap());
        for k in 0..3 {
            assert!(random_potential(&cost, 0.0, 9, k).iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn potential_streams_are_reproducible_and_distinct() {
        let cost = coulomb_cost(&build_grid(1, 6, 2.0).unwrap());
        let a = random_potential(&cost, 0.5, 3, 1);
        assert_eq!(a, random_potential(&cost, 0.5, 3, 1));
        assert_ne!(a, random_potential(&cost, 0.5, 3, 2));
        assert_ne!(a, random_potential(&cost, 0.5, 4, 1));
        let big = random_potential(&cost, 1.0, 0, 0);
        let n = big.len() as f64;
        assert!(big.iter().map(|v| v.abs()).sum::<f64>() / n < 5.0 * cost.min_off_diagonal());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig {
            realizations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            sigma: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let big = ExperimentConfig {
            points_per_dim: 1600,
            ..Default::default()
        };
        assert!(matches!(big.validate(), Err(Error::Guard(_))));
        assert!(ExperimentConfig { large: true, ..big }.validate().is_ok());
    }

    #[test]
    fn solve2_three_sites() {
        let cfg = ExperimentConfig {
            points_per_dim: 3,
            electrons: 3,
            marginal: "uniform".into(),
            tol: 1e-8,
            ..Default::default()
        };
        let run = run_solve2(&cfg).unwrap();
        assert!((run.report.lower_bound.unwrap() - 1.25).abs() < 10.0 * 1e-8 * 2.25);
    }

    #[test]
    fn round_unconstrained_three_sites() {
        let cfg = ExperimentConfig {
            points_per_dim: 3,
            electrons: 3,
            tol: 1e-9,
            ..Default::default()
        };
        let run = run_round(&cfg).unwrap();
        assert!(run.report.e_gap.unwrap().abs() < 1e-8);
        let (l, u) = (
            run.report.lower_bound.unwrap(),
            run.report.upper_bound.unwrap(),
        );
        assert_eq!(run.report.e_gap.unwrap(), (u - l) / l);
    }

    #[test]
    fn oracle_four_points() {
        let cfg = ExperimentConfig {
            points_per_dim: 4,
            electrons: 2,
            ..Default::default()
        };
        let rep = run_oracle(&cfg).unwrap();
        assert!((rep.metrics["exact"] - 0.25).abs() < 1e-15);
        let cfg = ExperimentConfig {
            points_per_dim: 4,
            electrons: 3,
            ..Default::default()
        };
        assert!((run_oracle(&cfg).unwrap().metrics["exact"] - 11.0 / 8.0).abs() < 1e-14);
    }

    #[test]
    fn solve3_needs_three_electrons() {
        let cfg = ExperimentConfig {
            points_per_dim: 4,
            electrons: 2,
            ..Default::default()
        };
        assert!(matches!(
            run_solve3(&cfg),
            Err(Error::TooFewElectrons { .. })
        ));
    }

    #[test]
    fn report_roundtrips_through_json() {
        let cfg = ExperimentConfig {
            points_per_dim: 4,
            electrons: 2,
            ..Default::default()
        };
        let rep = run_oracle(&cfg).unwrap();
        let text = serde_json::to_string(&rep).unwrap();
        let back: EnergyReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn zero_sigma_table_has_no_spread() {
        let cfg = ExperimentConfig {
            points_per_dim: 6,
            realizations: 3,
            seed: 5,
            tol: 1e-7,
            table_electrons: vec![3],
            table_sigmas: vec![0.0],
            ..Default::default()
        };
        let cells = run_bench_table(&cfg).unwrap();
        assert_eq!(cells.len(), 1);
        let g = &cells[0].gaps;
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|&x| x == g[0]));
    }
}
