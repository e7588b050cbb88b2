//! First-order primal-dual solver for linear conic programs over products of PSD
//! cones and the nonnegative orthant.
//!
//! The decision variable is one flat vector. Cone blocks are views into that vector
//! and may overlap, which is how a doubly-nonnegative matrix variable is expressed:
//! the same entries appear in a PSD view and in a nonnegative view. Orbits of
//! entries that must be equal (for instance `X[i,j] = X[j,i]`) are declared as tie
//! groups and handled exactly by the affine projection rather than as extra rows.
//!
//! The scheme is a relaxed ADMM on the consensus form
//! `min c.x  s.t.  x in {tied, Ax = b},  x = y in K_psd,  x = z in K_nn`.

use std::collections::{HashMap, VecDeque};
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::{Mat, MatMut, MatRef};
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConeKind {
    Psd,
    Nonneg,
}

/// A view of `dim x dim` (PSD, column-major) or `dim` (nonneg) consecutive entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConeBlock {
    pub kind: ConeKind,
    pub offset: usize,
    pub dim: usize,
}

impl ConeBlock {
    pub fn psd(offset: usize, dim: usize) -> Self {
        Self {
            kind: ConeKind::Psd,
            offset,
            dim,
        }
    }

    pub fn nonneg(offset: usize, len: usize) -> Self {
        Self {
            kind: ConeKind::Nonneg,
            offset,
            dim: len,
        }
    }

    /// Number of scalar entries covered.
    pub fn len(&self) -> usize {
        match self.kind {
            ConeKind::Psd => self.dim * self.dim,
            ConeKind::Nonneg => self.dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Sparse linear equality `sum coeff * x[var] = rhs` with a stable label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub label: String,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub num_vars: usize,
    pub blocks: Vec<ConeBlock>,
    pub objective: Vec<f64>,
    /// Constant added to the reported objectives.
    pub objective_offset: f64,
    pub constraints: Vec<LinearConstraint>,
    /// Groups of variable indices constrained to be equal.
    pub ties: Vec<Vec<usize>>,
}

impl SdpProblem {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    pub fn add_constraint(&mut self, label: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) {
        self.constraints.push(LinearConstraint {
            label: label.into(),
            terms,
            rhs,
        });
    }

    pub fn constraint_index(&self, label: &str) -> Option<usize> {
        self.constraints.iter().position(|c| c.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        if self.objective.len() != n {
            return Err(Error::InvalidProblem(format!(
                "objective has {} entries for {n} variables",
                self.objective.len()
            )));
        }
        let mut covered = vec![false; n];
        for b in &self.blocks {
            if b.offset + b.len() > n {
                return Err(Error::InvalidProblem(format!(
                    "cone block {b:?} exceeds {n} variables"
                )));
            }
            covered[b.range()].iter_mut().for_each(|c| *c = true);
        }
        let mut labels = std::collections::HashSet::new();
        for c in &self.constraints {
            if !labels.insert(c.label.as_str()) {
                return Err(Error::InvalidProblem(format!(
                    "duplicate constraint label {}",
                    c.label
                )));
            }
            for &(v, a) in &c.terms {
                if v >= n || !covered[v] {
                    return Err(Error::InvalidProblem(format!(
                        "constraint {} touches undeclared variable {v}",
                        c.label
                    )));
                }
                if !a.is_finite() {
                    return Err(Error::InvalidProblem(format!(
                        "non-finite coefficient in {}",
                        c.label
                    )));
                }
            }
            if !c.rhs.is_finite() {
                return Err(Error::InvalidProblem(format!(
                    "non-finite rhs in {}",
                    c.label
                )));
            }
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem(
                "non-finite objective coefficient".into(),
            ));
        }
        let mut seen = vec![false; n];
        for g in &self.ties {
            for &v in g {
                if v >= n || seen[v] {
                    return Err(Error::InvalidProblem(format!(
                        "tie groups overlap or exceed range at {v}"
                    )));
                }
                seen[v] = true;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial penalty. `None` picks one from the problem scale.
    pub rho: Option<f64>,
    pub adaptive_rho: bool,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Residuals are evaluated every this many iterations.
    pub check_every: usize,
    /// Anderson acceleration memory; 0 runs the plain iteration.
    pub anderson_memory: usize,
    /// Seed for any randomized component; the iteration itself is deterministic.
    pub rng_seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 50_000,
            rho: None,
            adaptive_rho: true,
            relaxation: 1.6,
            check_every: 10,
            anderson_memory: 10,
            rng_seed: 0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidProblem("tolerance must be positive".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidProblem(
                "relaxation must lie in (0, 2)".into(),
            ));
        }
        if self.max_iter == 0 || self.check_every == 0 {
            return Err(Error::InvalidProblem(
                "iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    MaxIter,
    InfeasibleGuess,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

/// Internal iterate, reusable to warm-start a related problem with the same
/// variable layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    /// Pre-projection points of the PSD copy followed by the nonnegative copy.
    pub point: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    pub primal: Vec<f64>,
    /// Multiplier per equality constraint, in constraint order.
    pub dual: Vec<f64>,
    pub labels: Vec<String>,
    /// Dual slack for the PSD views (a PSD matrix per block).
    pub psd_dual: Vec<f64>,
    /// Dual slack for the nonnegative views (entrywise nonnegative).
    pub nonneg_dual: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub status: SolveStatus,
    pub seconds: f64,
    pub warm: WarmStart,
}

impl SdpSolution {
    pub fn multiplier(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|k| self.dual[k])
    }

    /// Primal entries of a block.
    pub fn block(&self, b: &ConeBlock) -> &[f64] {
        &self.primal[b.range()]
    }
}

/// Projection of a symmetric matrix onto the PSD cone.
pub fn project_psd(m: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidProblem(
            "project_psd needs a square matrix".into(),
        ));
    }
    let mut out = m.to_owned();
    linalg::project_psd_in_place(out.as_mut())?;
    Ok(out)
}

/// Exact projection onto `{x tied, Ax = b}`.
struct AffineProjector {
    orbits: Vec<Vec<u32>>,
    /// Rows of `A P` (projected onto the tie subspace), sparse.
    rows: Vec<Vec<(u32, f64)>>,
    rhs: Vec<f64>,
    gram_pinv: Mat<f64>,
    /// Kept row for each original constraint; duplicates share one row.
    row_of: Vec<usize>,
}

impl AffineProjector {
    fn new(p: &SdpProblem) -> Result<Self> {
        let n = p.num_vars;
        // Orbit id per variable, `u32::MAX` for untied variables.
        let mut orbit_of = vec![u32::MAX; n];
        let mut orbits = Vec::new();
        for g in p.ties.iter().filter(|g| g.len() > 1) {
            let id = orbits.len() as u32;
            for &v in g {
                orbit_of[v] = id;
            }
            orbits.push(g.iter().map(|&v| v as u32).collect::<Vec<_>>());
        }

        let mut scratch = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut rows = Vec::with_capacity(p.constraints.len());
        let mut rhs = Vec::with_capacity(p.constraints.len());
        let mut row_of = Vec::with_capacity(p.constraints.len());
        let mut seen: HashMap<(Vec<(u32, u64)>, u64), usize> = HashMap::new();
        for c in &p.constraints {
            for &(v, a) in &c.terms {
                let id = orbit_of[v];
                if id == u32::MAX {
                    if scratch[v] == 0.0 {
                        touched.push(v);
                    }
                    scratch[v] += a;
                } else {
                    let orbit = &orbits[id as usize];
                    let share = a / orbit.len() as f64;
                    for &w in orbit {
                        if scratch[w as usize] == 0.0 {
                            touched.push(w as usize);
                        }
                        scratch[w as usize] += share;
                    }
                }
                // A coefficient may cancel back to zero and get pushed twice; dedup below.
            }
            touched.sort_unstable();
            touched.dedup();
            let row: Vec<(u32, f64)> = touched
                .iter()
                .filter(|&&v| scratch[v] != 0.0)
                .map(|&v| (v as u32, scratch[v]))
                .collect();
            for &v in &touched {
                scratch[v] = 0.0;
            }
            touched.clear();
            let key = (
                row.iter().map(|&(v, a)| (v, a.to_bits())).collect(),
                c.rhs.to_bits(),
            );
            let next = rows.len();
            let r = *seen.entry(key).or_insert(next);
            if r == next {
                rows.push(row);
                rhs.push(c.rhs);
            }
            row_of.push(r);
        }

        let m = rows.len();
        // Gram matrix of the projected rows via a variable -> row incidence list.
        let mut incidence: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (r, row) in rows.iter().enumerate() {
            for &(v, a) in row {
                incidence[v as usize].push((r as u32, a));
            }
        }
        let mut gram = Mat::<f64>::zeros(m, m);
        for inc in &incidence {
            for &(r, a) in inc {
                for &(s, b) in inc {
                    gram[(r as usize, s as usize)] += a * b;
                }
            }
        }
        let (gram_pinv, rank) = if m == 0 {
            (Mat::zeros(0, 0), 0)
        } else {
            linalg::pinv_psd(gram.as_ref(), 1e-11)?
        };
        debug!("affine projector: {n} variables, {m} rows, rank {rank}");
        Ok(Self {
            orbits,
            rows,
            rhs,
            gram_pinv,
            row_of,
        })
    }

    /// Per-constraint multipliers; a shared row's multiplier goes to its first constraint.
    fn expand(&self, mult: &[f64]) -> Vec<f64> {
        let mut taken = vec![false; mult.len()];
        self.row_of
            .iter()
            .map(|&r| {
                if std::mem::replace(&mut taken[r], true) {
                    0.0
                } else {
                    mult[r]
                }
            })
            .collect()
    }

    fn average_ties(&self, x: &mut [f64]) {
        for orbit in &self.orbits {
            let mean = orbit.iter().map(|&v| x[v as usize]).sum::<f64>() / orbit.len() as f64;
            for &v in orbit {
                x[v as usize] = mean;
            }
        }
    }

    fn row_apply(&self, s: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(v, a)| a * s[v as usize]).sum();
        }
    }

    /// Projects `t` in place and returns the multiplier `mu` with
    /// `x = P t - (AP)^T mu`.
    fn project(&self, t: &mut [f64], resid: &mut [f64], mu: &mut [f64]) {
        self.average_ties(t);
        self.row_apply(t, resid);
        for (r, b) in resid.iter_mut().zip(&self.rhs) {
            *r -= b;
        }
        linalg::matvec(mu, self.gram_pinv.as_ref(), resid);
        for (row, &m) in self.rows.iter().zip(mu.iter()) {
            if m != 0.0 {
                for &(v, a) in row {
                    t[v as usize] -= a * m;
                }
            }
        }
    }

    /// `(AP)^T y` accumulated into `out`.
    fn transpose_apply_add(&self, y: &[f64], out: &mut [f64]) {
        for (row, &m) in self.rows.iter().zip(y) {
            for &(v, a) in row {
                out[v as usize] += a * m;
            }
        }
    }
}

fn project_cones(blocks: &[ConeBlock], kind: ConeKind, x: &mut [f64]) -> Result<()> {
    for b in blocks.iter().filter(|b| b.kind == kind) {
        let slice = &mut x[b.range()];
        match kind {
            ConeKind::Nonneg => slice.iter_mut().for_each(|v| *v = v.max(0.0)),
            ConeKind::Psd => {
                let m = MatMut::from_column_major_slice_mut(slice, b.dim, b.dim);
                linalg::project_psd_in_place(m)?;
            }
        }
    }
    Ok(())
}

pub fn solve(problem: &SdpProblem, settings: &SolverSettings) -> Result<SdpSolution> {
    solve_with_start(problem, settings, None)
}

pub fn solve_with_start(
    problem: &SdpProblem,
    settings: &SolverSettings,
    start: Option<&WarmStart>,
) -> Result<SdpSolution> {
    problem.validate()?;
    settings.validate()?;
    let started = Instant::now();
    let n = problem.num_vars;
    let proj = AffineProjector::new(problem)?;
    let m = proj.rows.len();

    let c = &problem.objective;
    let c_norm = norm2(c);
    let b_norm = problem
        .constraints
        .iter()
        .map(|c| c.rhs * c.rhs)
        .sum::<f64>()
        .sqrt();
    let mut work = Workspace::new(n, m);

    // Feasibility of the affine part alone.
    let mut x0 = vec![0.0; n];
    proj.project(&mut x0, &mut work.resid, &mut work.mu);
    proj.row_apply(&x0, &mut work.resid);
    let affine_err = work
        .resid
        .iter()
        .zip(&proj.rhs)
        .map(|(r, b)| (r - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let affine_infeasible = affine_err > 1e-8 * (1.0 + b_norm);

    let mut rho = match (start, settings.rho) {
        (Some(w), _) => w.rho,
        (None, Some(r)) => r,
        (None, None) => {
            let x0_norm = norm2(&x0);
            if c_norm > 0.0 && x0_norm > 0.0 {
                AUTO_RHO_SCALE * c_norm / x0_norm
            } else {
                1.0
            }
        }
    };
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidProblem(format!("invalid penalty {rho}")));
    }

    // State: pre-projection points for the PSD copy and the nonnegative copy.
    let mut state = match start {
        Some(w) if w.point.len() == 2 * n => w.point.clone(),
        Some(_) => {
            return Err(Error::InvalidProblem(
                "warm start does not match the variable layout".into(),
            ));
        }
        None => [x0.as_slice(), x0.as_slice()].concat(),
    };

    let mut accel = Anderson::new(settings.anderson_memory);
    let mut next = vec![0.0; 2 * n];
    let mut extrapolated = vec![0.0; 2 * n];
    // Plain iterate and its step norm, kept to undo a bad extrapolation.
    let mut fallback = vec![0.0; 2 * n];
    let mut fallback_norm: Option<f64> = None;

    let mut res = Residuals {
        primal: f64::INFINITY,
        dual: f64::INFINITY,
        gap: f64::INFINITY,
    };
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut last_adapt = 0;
    let mut primal_obj = f64::NAN;
    let mut dual_obj = f64::NAN;

    for it in 1..=settings.max_iter {
        iterations = it;
        work.apply(
            problem,
            &proj,
            c,
            rho,
            settings.relaxation,
            &state,
            &mut next,
        )?;
        let step_norm = next
            .iter()
            .zip(&state)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if !step_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite iterate at iteration {it}"
            )));
        }

        if let Some(plain_norm) = fallback_norm.take() {
            if step_norm > plain_norm {
                // The extrapolated point made things worse: resume from the plain iterate.
                std::mem::swap(&mut state, &mut fallback);
                accel.reset();
                continue;
            }
        }

        let check = it % settings.check_every == 0 || it == settings.max_iter;
        if check {
            res = work.residuals(&proj, c, c_norm, rho);
            primal_obj = work.primal_obj;
            dual_obj = work.dual_obj;
            if !(res.primal.is_finite() && res.dual.is_finite() && res.gap.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite residual at iteration {it}"
                )));
            }
            if res.max() <= settings.tol && !affine_infeasible {
                status = SolveStatus::Solved;
                break;
            }
            if it % (settings.check_every * 100) == 0 {
                debug!(
                    "iter {it}: primal {:.3e} dual {:.3e} gap {:.3e} rho {:.3e} obj {:.9}",
                    res.primal, res.dual, res.gap, rho, primal_obj
                );
            }
            if settings.adaptive_rho && it - last_adapt >= ADAPT_EVERY {
                let ratio = (res.primal / res.dual.max(1e-300)).sqrt();
                if !(1.0 / ADAPT_BAND..=ADAPT_BAND).contains(&ratio) {
                    let new_rho = (rho * ratio.clamp(0.01, 100.0)).clamp(1e-8, 1e12);
                    // Restart from the current point with the duals rescaled.
                    let scale = rho / new_rho;
                    let (py, pz) = state.split_at_mut(n);
                    for k in 0..n {
                        py[k] = work.y[k] + scale * work.u[k];
                        pz[k] = work.z[k] + scale * work.v[k];
                    }
                    rho = new_rho;
                    last_adapt = it;
                    accel.reset();
                    fallback_norm = None;
                    continue;
                }
            }
        }

        if accel.enabled() && accel.step(&state, &next, &mut extrapolated) {
            std::mem::swap(&mut state, &mut extrapolated);
            std::mem::swap(&mut fallback, &mut next);
            fallback_norm = Some(step_norm);
            continue;
        }
        std::mem::swap(&mut state, &mut next);
    }

    if affine_infeasible {
        status = SolveStatus::InfeasibleGuess;
    } else if status == SolveStatus::MaxIter {
        warn!(
            "conic solve hit the iteration limit ({iterations}); residuals {:.2e}/{:.2e}/{:.2e}",
            res.primal, res.dual, res.gap
        );
    }

    let offset = problem.objective_offset;
    Ok(SdpSolution {
        primal: work.x,
        dual: proj.expand(&work.mult),
        labels: problem
            .constraints
            .iter()
            .map(|c| c.label.clone())
            .collect(),
        psd_dual: work.u.iter().map(|e| -rho * e).collect(),
        nonneg_dual: work.v.iter().map(|e| -rho * e).collect(),
        primal_objective: primal_obj + offset,
        dual_objective: dual_obj + offset,
        residuals: res,
        iterations,
        status,
        seconds: started.elapsed().as_secs_f64(),
        warm: WarmStart { point: state, rho },
    })
}

const AUTO_RHO_SCALE: f64 = 0.1;
const ADAPT_EVERY: usize = 50;
const ADAPT_BAND: f64 = 5.0;

/// Scratch buffers and the decomposed iterate of the last map application.
struct Workspace {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    mu: Vec<f64>,
    mult: Vec<f64>,
    resid: Vec<f64>,
    scratch: Vec<f64>,
    primal_obj: f64,
    dual_obj: f64,
}

impl Workspace {
    fn new(n: usize, m: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
            z: vec![0.0; n],
            u: vec![0.0; n],
            v: vec![0.0; n],
            mu: vec![0.0; m],
            mult: vec![0.0; m],
            resid: vec![0.0; m],
            scratch: vec![0.0; n],
            primal_obj: f64::NAN,
            dual_obj: f64::NAN,
        }
    }

    /// One relaxed ADMM step as a map on the pre-projection points.
    #[allow(clippy::too_many_arguments)]
    fn apply(
        &mut self,
        problem: &SdpProblem,
        proj: &AffineProjector,
        c: &[f64],
        rho: f64,
        alpha: f64,
        state: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let n = self.x.len();
        let (sy, sz) = state.split_at(n);
        self.y.copy_from_slice(sy);
        self.z.copy_from_slice(sz);
        project_cones(&problem.blocks, ConeKind::Psd, &mut self.y)?;
        project_cones(&problem.blocks, ConeKind::Nonneg, &mut self.z)?;
        let half_inv_rho = 0.5 / rho;
        for k in 0..n {
            self.u[k] = sy[k] - self.y[k];
            self.v[k] = sz[k] - self.z[k];
            self.x[k] = 0.5 * (self.y[k] - self.u[k] + self.z[k] - self.v[k]) - c[k] * half_inv_rho;
        }
        proj.project(&mut self.x, &mut self.resid, &mut self.mu);
        let (oy, oz) = out.split_at_mut(n);
        for k in 0..n {
            let x = alpha * self.x[k];
            oy[k] = x + (1.0 - alpha) * self.y[k] + self.u[k];
            oz[k] = x + (1.0 - alpha) * self.z[k] + self.v[k];
        }
        Ok(())
    }

    fn residuals(&mut self, proj: &AffineProjector, c: &[f64], c_norm: f64, rho: f64) -> Residuals {
        let n = self.x.len();
        for (d, &mv) in self.mult.iter_mut().zip(&self.mu) {
            *d = -2.0 * rho * mv;
        }
        // Dual residual: P (c - A^T w - Y - Z) with Y = -rho u, Z = -rho v.
        for k in 0..n {
            self.scratch[k] = c[k] + rho * (self.u[k] + self.v[k]);
        }
        proj.average_ties(&mut self.scratch);
        for v in self.scratch.iter_mut() {
            *v = -*v;
        }
        proj.transpose_apply_add(&self.mult, &mut self.scratch);
        let dual = norm2(&self.scratch) / (1.0 + c_norm);

        let mut dxy = 0.0;
        let mut dxz = 0.0;
        for k in 0..n {
            dxy += (self.x[k] - self.y[k]).powi(2);
            dxz += (self.x[k] - self.z[k]).powi(2);
        }
        let scale = norm2(&self.x)
            .max(norm2(&self.y))
            .max(norm2(&self.z))
            .max(1e-12);
        let primal = dxy.sqrt().max(dxz.sqrt()) / scale;

        self.primal_obj = dot(c, &self.x);
        self.dual_obj = dot(&proj.rhs, &self.mult);
        let gap = (self.primal_obj - self.dual_obj).abs()
            / (1.0 + self.primal_obj.abs() + self.dual_obj.abs());
        Residuals { primal, dual, gap }
    }
}

/// Type-II Anderson acceleration with a short memory.
struct Anderson {
    memory: usize,
    prev_w: Vec<f64>,
    prev_g: Vec<f64>,
    has_prev: bool,
    df: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
    /// Inner products of the stored residual differences, same order as `df`.
    gram: VecDeque<VecDeque<f64>>,
    spare: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            prev_w: Vec::new(),
            prev_g: Vec::new(),
            has_prev: false,
            df: VecDeque::new(),
            dg: VecDeque::new(),
            gram: VecDeque::new(),
            spare: Vec::new(),
        }
    }

    fn enabled(&self) -> bool {
        self.memory > 0
    }

    fn reset(&mut self) {
        self.has_prev = false;
        self.spare.extend(self.df.drain(..));
        self.spare.extend(self.dg.drain(..));
        self.gram.clear();
    }

    fn buffer(&mut self, len: usize) -> Vec<f64> {
        let mut b = self.spare.pop().unwrap_or_default();
        b.resize(len, 0.0);
        b
    }

    /// Records the pair `(w, g(w))` and writes the extrapolated point. Returns false
    /// when there is no history to extrapolate from.
    fn step(&mut self, w: &[f64], g: &[f64], out: &mut [f64]) -> bool {
        let len = w.len();
        if self.has_prev {
            if self.df.len() == self.memory {
                self.spare.push(self.df.pop_front().unwrap());
                self.spare.push(self.dg.pop_front().unwrap());
                self.gram.pop_front();
                self.gram.iter_mut().for_each(|row| {
                    row.pop_front();
                });
            }
            let mut df = self.buffer(len);
            let mut dg = self.buffer(len);
            for k in 0..len {
                df[k] = (g[k] - w[k]) - (self.prev_g[k] - self.prev_w[k]);
                dg[k] = g[k] - self.prev_g[k];
            }
            let mut row: VecDeque<f64> = self.df.iter().map(|d| dot(d, &df)).collect();
            let diag = dot(&df, &df);
            for (r, &v) in self.gram.iter_mut().zip(row.iter()) {
                r.push_back(v);
            }
            row.push_back(diag);
            self.gram.push_back(row);
            self.df.push_back(df);
            self.dg.push_back(dg);
        }
        self.prev_w.clear();
        self.prev_w.extend_from_slice(w);
        self.prev_g.clear();
        self.prev_g.extend_from_slice(g);
        self.has_prev = true;

        let k = self.df.len();
        if k == 0 {
            return false;
        }
        let rhs: Vec<f64> = self
            .df
            .iter()
            .map(|d| {
                d.iter()
                    .zip(g.iter().zip(w))
                    .map(|(a, (p, q))| a * (p - q))
                    .sum()
            })
            .collect();
        let trace: f64 = (0..k).map(|i| self.gram[i][i]).sum();
        if !(trace > 0.0) {
            return false;
        }
        let mut gram = Mat::from_fn(k, k, |i, j| self.gram[i][j]);
        for i in 0..k {
            gram[(i, i)] += 1e-10 * trace;
        }
        let Ok(chol) = gram.as_ref().llt(faer::Side::Lower) else {
            return false;
        };
        let gamma = chol.solve(Mat::from_fn(k, 1, |i, _| rhs[i]));
        if (0..k).any(|i| !gamma[(i, 0)].is_finite()) {
            return false;
        }
        out.copy_from_slice(g);
        for i in 0..k {
            let gi = gamma[(i, 0)];
            for (o, d) in out.iter_mut().zip(&self.dg[i]) {
                *o -= gi * d;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigenvalue iteration, independent of the production kernels.
    fn jacobi_eig(a: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
        let n = a.nrows();
        let mut m = a.clone();
        let mut v = Mat::<f64>::identity(n, n);
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| m[(i, i)]).collect(), v)
    }

    fn oracle_psd(a: &Mat<f64>) -> Mat<f64> {
        let (vals, v) = jacobi_eig(a);
        let n = a.nrows();
        Mat::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| vals[k].max(0.0) * v[(i, k)] * v[(j, k)])
                .sum()
        })
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
        let g = Mat::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        Mat::from_fn(n, n, |i, j| g[(i, j)] + g[(j, i)])
    }

    fn settings(tol: f64) -> SolverSettings {
        SolverSettings {
            tol,
            ..Default::default()
        }
    }

    #[test]
    fn psd_projection_examples() {
        let d = Mat::from_fn(2, 2, |i, j| {
            if i != j {
                0.0
            } else if i == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let p = project_psd(d.as_ref()).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p[(1, 1)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p[(0, 1)], 0.0, epsilon = 1e-14);

        let x = Mat::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 });
        let p = project_psd(x.as_ref()).unwrap();
        for j in 0..2 {
            for i in 0..2 {
                assert_abs_diff_eq!(p[(i, j)], 0.5, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn psd_projection_fixes_psd_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Mat::from_fn(5, 5, |_, _| rng.random::<f64>());
        let a = Mat::from_fn(5, 5, |i, j| (0..5).map(|k| g[(i, k)] * g[(j, k)]).sum());
        let p = project_psd(a.as_ref()).unwrap();
        assert!(linalg::frob_dist(p.as_ref(), a.as_ref()) < 1e-12);
    }

    #[test]
    fn psd_projection_matches_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = 2 + trial % 7;
            let a = random_sym(&mut rng, n);
            let b = random_sym(&mut rng, n);
            let pa = project_psd(a.as_ref()).unwrap();
            let pb = project_psd(b.as_ref()).unwrap();
            let want = oracle_psd(&a);
            assert!(linalg::frob_dist(pa.as_ref(), want.as_ref()) < 1e-10);
            let again = project_psd(pa.as_ref()).unwrap();
            assert!(linalg::frob_dist(again.as_ref(), pa.as_ref()) < 1e-12);
            let d_in = linalg::frob_dist(a.as_ref(), b.as_ref());
            let d_out = linalg::frob_dist(pa.as_ref(), pb.as_ref());
            assert!(d_out <= d_in + 1e-12);
            let (vals, _) = jacobi_eig(&pa);
            assert!(vals.iter().all(|&v| v > -1e-12));
        }
    }

    #[test]
    fn two_by_two_completion() {
        // min X[1,1] s.t. X[0,0] = 1, X[1,0] = 1/2, X PSD.
        let mut p = SdpProblem::new(4);
        p.blocks.push(ConeBlock::psd(0, 2));
        p.objective[3] = 1.0;
        p.ties.push(vec![1, 2]);
        p.add_constraint("a", vec![(0, 1.0)], 1.0);
        p.add_constraint("b", vec![(1, 1.0)], 0.5);
        let sol = solve(&p, &settings(1e-9)).unwrap();
        assert_eq!(sol.status, SolveStatus::Solved);
        assert_abs_diff_eq!(sol.primal[3], 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.primal_objective, 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.dual_objective, 0.25, epsilon = 1e-6);
    }

    #[test]
    fn zero_objective_any_dimension() {
        for n in 1..5 {
            let mut p = SdpProblem::new(n * n);
            p.blocks.push(ConeBlock::psd(0, n));
            p.add_constraint("sum", (0..n * n).map(|v| (v, 1.0)).collect(), 1.0);
            let sol = solve(&p, &settings(1e-8)).unwrap();
            assert_eq!(sol.status, SolveStatus::Solved);
            assert_abs_diff_eq!(sol.primal_objective, 0.0, epsilon = 1e-12);
            let total: f64 = sol.primal.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
        }
    }

    fn simplex_lp(c: &[f64]) -> SdpProblem {
        let n = c.len();
        let mut p = SdpProblem::new(n);
        p.blocks.push(ConeBlock::nonneg(0, n));
        p.objective = c.to_vec();
        p.add_constraint("sum", (0..n).map(|v| (v, 1.0)).collect(), 1.0);
        p
    }

    fn trace_sdp(c: &Mat<f64>) -> SdpProblem {
        let n = c.nrows();
        let mut p = SdpProblem::new(n * n);
        p.blocks.push(ConeBlock::psd(0, n));
        for j in 0..n {
            for i in 0..n {
                p.objective[i + n * j] = c[(i, j)];
            }
            for i in 0..j {
                p.ties.push(vec![i + n * j, j + n * i]);
            }
        }
        p.add_constraint("trace", (0..n).map(|i| (i + n * i, 1.0)).collect(), 1.0);
        p
    }

    #[test]
    fn random_programs_with_known_optima() {
        let tol = 1e-7;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let (p, want) = if trial % 2 == 0 {
                let c: Vec<f64> = (0..3 + trial % 5)
                    .map(|_| rng.random::<f64>() * 4.0 - 1.0)
                    .collect();
                let want = c.iter().copied().fold(f64::INFINITY, f64::min);
                (simplex_lp(&c), want)
            } else {
                let c = random_sym(&mut rng, 2 + trial % 4);
                let (vals, _) = jacobi_eig(&c);
                let want = vals.iter().copied().fold(f64::INFINITY, f64::min);
                (trace_sdp(&c), want)
            };
            let sol = solve(&p, &settings(tol)).unwrap();
            assert_eq!(sol.status, SolveStatus::Solved, "trial {trial}");
            let rel = (sol.primal_objective - want).abs() / want.abs().max(1.0);
            assert!(
                rel <= 10.0 * tol,
                "trial {trial}: {} vs {want}",
                sol.primal_objective
            );
            let scale = 1.0 + sol.primal_objective.abs() + sol.dual_objective.abs();
            assert!(sol.dual_objective <= sol.primal_objective + tol * scale);
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = trace_sdp(&random_sym(&mut rng, 4));
        let a = solve(&p, &settings(1e-8)).unwrap();
        let b = solve(&p, &settings(1e-8)).unwrap();
        assert_eq!(a.primal, b.primal);
        assert_eq!(a.dual, b.dual);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn inconsistent_equalities_are_flagged() {
        let mut p = SdpProblem::new(2);
        p.blocks.push(ConeBlock::nonneg(0, 2));
        p.add_constraint("a", vec![(0, 1.0), (1, 1.0)], 1.0);
        p.add_constraint("b", vec![(0, 2.0), (1, 2.0)], 3.0);
        let sol = solve(
            &p,
            &SolverSettings {
                max_iter: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::InfeasibleGuess);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = trace_sdp(&random_sym(&mut rng, 6));
        let sol = solve(
            &p,
            &SolverSettings {
                max_iter: 3,
                check_every: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::MaxIter);
        assert_eq!(sol.iterations, 3);
    }

    #[test]
    fn malformed_problems_are_rejected() {
        let mut p = simplex_lp(&[1.0, 2.0]);
        p.add_constraint("sum", vec![(0, 1.0)], 0.5);
        assert!(solve(&p, &SolverSettings::default()).is_err());
        let mut q = SdpProblem::new(3);
        q.blocks.push(ConeBlock::nonneg(0, 2));
        q.add_constraint("x", vec![(2, 1.0)], 1.0);
        assert!(solve(&q, &SolverSettings::default()).is_err());
        let bad = SolverSettings {
            tol: 0.0,
            ..Default::default()
        };
        assert!(solve(&simplex_lp(&[1.0]), &bad).is_err());
    }

    #[test]
    fn warm_start_from_own_solution_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = trace_sdp(&random_sym(&mut rng, 5));
        let cold = solve(&p, &settings(1e-8)).unwrap();
        let warm = solve_with_start(&p, &settings(1e-8), Some(&cold.warm)).unwrap();
        assert_eq!(warm.status, SolveStatus::Solved);
        assert!(warm.iterations <= cold.iterations.min(20));
    }

    #[test]
    fn multipliers_are_labeled() {
        let sol = solve(&simplex_lp(&[3.0, 1.0, 2.0]), &settings(1e-9)).unwrap();
        assert_abs_diff_eq!(sol.multiplier("sum").unwrap(), 1.0, epsilon = 1e-6);
        assert!(sol.multiplier("missing").is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weak_duality_on_random_lps(c in proptest::collection::vec(-3.0f64..3.0, 2..8)) {
            let tol = 1e-7;
            let sol = solve(&simplex_lp(&c), &settings(tol)).unwrap();
            let scale = 1.0 + sol.primal_objective.abs() + sol.dual_objective.abs();
            prop_assert!(sol.dual_objective <= sol.primal_objective + tol * scale);
        }
    }
}
