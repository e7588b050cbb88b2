use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use sdpcoulomb::{
    run_bench_table, run_dual, run_oracle, run_round, run_solve2, run_solve3, EnergyReport,
    Error as CoreError, ExperimentConfig, PairMarginal, TableCell, TripleMoment,
};

#[derive(Debug, Parser)]
#[command(
    name = "sdpcoulomb",
    version,
    about = "Convex relaxations for Coulomb multimarginal transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lower bound from the pairwise relaxation.
    Solve2(RunArgs),
    /// Lower bound from the three-body relaxation (needs at least 3 electrons).
    Solve3(RunArgs),
    /// Solve, round to a transport plan and report the energy gap.
    Round(RunArgs),
    /// Kantorovich potential from the pairwise relaxation.
    Dual(RunArgs),
    /// Exact value by enumerating configurations (small instances only).
    Oracle(RunArgs),
    /// Gap table over electron counts and potential scales.
    BenchTable(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file with any of the run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Points per dimension.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    electrons: Option<usize>,
    /// uniform, gaussian, sine, gaussian2d, file:PATH or none.
    #[arg(long)]
    marginal: Option<String>,
    /// Random potential scale in units of the smallest pair cost.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Pinning threshold for unconstrained rounding.
    #[arg(long)]
    delta: Option<f64>,
    /// Rounds of nearest-site moves when reweighting a marginal-constrained rounding.
    #[arg(long)]
    shift_rounds: Option<usize>,
    /// Keep the regression weights of a marginal-constrained rounding.
    #[arg(long)]
    no_reweight: bool,
    /// Directory for the JSON report and CSV outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow grids above the default size limit.
    #[arg(long)]
    large: bool,
    /// Compare against a reference: the comotion potential for `dual`, the relaxation for `oracle`.
    #[arg(long)]
    compare_truth: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .map_err(|e| Usage(format!("config {}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(dim <- dim, points_per_dim <- grid, electrons <- electrons, marginal <- marginal,
             sigma <- sigma, realizations <- realizations, seed <- seed, tol <- tol,
             max_iter <- max_iter, delta <- delta, shift_rounds <- shift_rounds);
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        cfg.large |= self.large;
        cfg.compare_truth |= self.compare_truth;
        if self.no_reweight {
            cfg.reweight = false;
        }
        Ok(cfg)
    }
}

/// Bad input from the command line or config file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

/// Run finished and wrote its outputs, but must exit with a failure code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
struct Incomplete {
    code: u8,
    message: String,
}

const EXIT_USAGE: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_ROUNDING: u8 = 3;
const EXIT_GUARD: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(inc) = e.downcast_ref::<Incomplete>() {
        return inc.code;
    }
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::Guard(_)) => EXIT_GUARD,
        Some(CoreError::Rounding(_)) => EXIT_ROUNDING,
        Some(CoreError::Numerical(_)) | Some(CoreError::Io(_)) => EXIT_SOLVER,
        Some(
            CoreError::InvalidGrid(_)
            | CoreError::InvalidMarginal(_)
            | CoreError::InvalidProblem(_)
            | CoreError::TooFewElectrons { .. },
        ) => EXIT_USAGE,
        None => EXIT_SOLVER,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Solve2(args) => {
            let cfg = args.config()?;
            let run = run_solve2(&cfg)?;
            let out = Output::new(&cfg)?;
            out.gamma("gamma.csv", &run.gamma)?;
            out.report(&run.report)?;
            require_converged(&run.report)
        }
        Command::Solve3(args) => {
            let cfg = args.config()?;
            let run = run_solve3(&cfg)?;
            let out = Output::new(&cfg)?;
            out.gamma("gamma.csv", &run.gamma)?;
            out.theta("theta.csv", &run.theta)?;
            out.report(&run.report)?;
            require_converged(&run.report)
        }
        Command::Round(args) => {
            let cfg = args.config()?;
            let run = run_round(&cfg)?;
            let out = Output::new(&cfg)?;
            out.gamma("gamma_relaxed.csv", &run.relaxed_gamma)?;
            if let Some(g) = &run.gamma {
                out.gamma("gamma_rounded.csv", g)?;
            }
            out.report(&run.report)?;
            require_converged(&run.report)?;
            if run.report.upper_bound.is_none() {
                return Err(Incomplete {
                    code: EXIT_ROUNDING,
                    message: "rounding produced no feasible plan".into(),
                }
                .into());
            }
            Ok(())
        }
        Command::Dual(args) => {
            let cfg = args.config()?;
            let run = run_dual(&cfg)?;
            let out = Output::new(&cfg)?;
            out.potential("potential.csv", &run.points, run.v_true.as_deref(), &run.w)?;
            out.report(&run.report)?;
            require_converged(&run.report)
        }
        Command::Oracle(args) => {
            let cfg = args.config()?;
            let report = run_oracle(&cfg)?;
            let out = Output::new(&cfg)?;
            out.report(&report)?;
            if report.metrics.get("sandwich_pass") == Some(&0.0) {
                return Err(Incomplete {
                    code: EXIT_SOLVER,
                    message: "relaxation value exceeds the exact value".into(),
                }
                .into());
            }
            Ok(())
        }
        Command::BenchTable(args) => {
            let cfg = args.config()?;
            let cells = run_bench_table(&cfg)?;
            let out = Output::new(&cfg)?;
            out.table(&cfg, &cells)?;
            let failures: usize = cells.iter().map(|c| c.failures.len()).sum();
            if failures > 0 {
                warn!("{failures} realizations failed; see table_runs.csv");
            }
            Ok(())
        }
    }
}

fn require_converged(report: &EnergyReport) -> Result<()> {
    if report.converged() {
        Ok(())
    } else {
        Err(Incomplete {
            code: EXIT_SOLVER,
            message: "a conic solve stopped at the iteration limit".into(),
        }
        .into())
    }
}

/// Writes results to the output directory, or the report to stdout without one.
struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        if let Some(dir) = &cfg.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Self {
            dir: cfg.out.clone(),
        })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn report(&self, report: &EnergyReport) -> Result<()> {
        let json = serde_json::to_string_pretty(report)?;
        match self.path("report.json") {
            Some(path) => {
                fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
                info!("wrote {}", path.display());
            }
            None => println!("{json}"),
        }
        Ok(())
    }

    fn gamma(&self, name: &str, gamma: &PairMarginal) -> Result<()> {
        let Some(path) = self.path(name) else {
            return Ok(());
        };
        let m = &gamma.matrix;
        let mut w = csv_writer(&path)?;
        for i in 0..m.nrows() {
            w.write_record((0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])))?;
        }
        w.flush()?;
        Ok(())
    }

    fn theta(&self, name: &str, theta: &TripleMoment) -> Result<()> {
        let Some(path) = self.path(name) else {
            return Ok(());
        };
        let t = &theta.tensor;
        let mut w = csv_writer(&path)?;
        w.write_record(["i", "j", "k", "value"])?;
        for k in 0..t.n {
            for j in 0..t.n {
                for i in 0..t.n {
                    let v = t.get(i, j, k);
                    if v != 0.0 {
                        w.write_record([
                            i.to_string(),
                            j.to_string(),
                            k.to_string(),
                            format!("{v:e}"),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    fn potential(
        &self,
        name: &str,
        x: &[f64],
        v_true: Option<&[f64]>,
        w_dual: &[f64],
    ) -> Result<()> {
        let Some(path) = self.path(name) else {
            return Ok(());
        };
        let mut w = csv_writer(&path)?;
        w.write_record(["x", "v_true", "w"])?;
        for (k, (&xk, &wk)) in x.iter().zip(w_dual).enumerate() {
            let v = v_true.map(|v| format!("{:e}", v[k])).unwrap_or_default();
            w.write_record([format!("{xk:e}"), v, format!("{wk:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean gaps laid out with one row per electron count and one column per scale,
    /// plus the per-realization values.
    fn table(&self, cfg: &ExperimentConfig, cells: &[TableCell]) -> Result<()> {
        let mean = |cell: &TableCell| {
            cell.mean_gap
                .map(|g| format!("{g:e}"))
                .unwrap_or_else(|| "NA".into())
        };
        let mut header = vec!["electrons".to_string()];
        header.extend(cfg.table_sigmas.iter().map(|s| format!("sigma={s}")));
        let mut rows = Vec::new();
        for &n in &cfg.table_electrons {
            let mut row = vec![n.to_string()];
            row.extend(cells.iter().filter(|c| c.electrons == n).map(mean));
            rows.push(row);
        }
        match self.path("table.csv") {
            Some(path) => {
                let mut w = csv_writer(&path)?;
                w.write_record(&header)?;
                for row in &rows {
                    w.write_record(row)?;
                }
                w.flush()?;
                let mut w = csv_writer(&self.path("table_runs.csv").expect("output directory"))?;
                w.write_record(["electrons", "sigma", "realization", "e_gap", "failure"])?;
                for cell in cells {
                    for (k, g) in cell.gaps.iter().enumerate() {
                        w.write_record([
                            cell.electrons.to_string(),
                            cell.sigma.to_string(),
                            k.to_string(),
                            format!("{g:e}"),
                            String::new(),
                        ])?;
                    }
                    for f in &cell.failures {
                        w.write_record([
                            cell.electrons.to_string(),
                            cell.sigma.to_string(),
                            String::new(),
                            String::new(),
                            f.clone(),
                        ])?;
                    }
                }
                w.flush()?;
            }
            None => {
                let mut w = csv::Writer::from_writer(std::io::stdout());
                w.write_record(&header)?;
                for row in &rows {
                    w.write_record(row)?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}
