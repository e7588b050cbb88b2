//! Exact solutions at small scale by enumerating every configuration of `N`
//! distinct sites.

use faer::Mat;
use itertools::Itertools;
use log::debug;

use crate::error::{Error, Result};
use crate::grid::{CostMatrix, Marginal};
use crate::relaxations::{PairMarginal, Tensor3, TripleMarginal};
use crate::rounding::QuantizedDensity;

/// Largest number of atoms the enumeration will produce.
pub const MAX_ATOMS: u64 = 1_000_000;

/// A configuration of `N` distinct sites.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetAtom {
    pub sites: Vec<usize>,
    /// `sum_{i<j} C(i,j)` over the sites.
    pub pair_cost: f64,
    grid_size: usize,
}

impl SubsetAtom {
    pub fn density(&self) -> QuantizedDensity {
        QuantizedDensity::new(self.sites.clone(), self.grid_size)
            .expect("atom sites are distinct and in range")
    }

    /// Energy with an optional one-body potential.
    pub fn value(&self, potential: Option<&[f64]>) -> f64 {
        let field = potential.map_or(0.0, |c| {
            self.sites.iter().map(|&i| c[i]).sum::<f64>() / self.sites.len() as f64
        });
        self.pair_cost + field
    }
}

/// A convex combination of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomMeasure {
    pub atoms: Vec<SubsetAtom>,
    pub weights: Vec<f64>,
}

impl AtomMeasure {
    /// One-body density `sum_a w_a lambda_a`.
    pub fn density(&self) -> Vec<f64> {
        let n = self.atoms.first().map_or(0, |a| a.grid_size);
        let mut rho = vec![0.0; n];
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            let share = w / a.sites.len() as f64;
            for &i in &a.sites {
                rho[i] += share;
            }
        }
        rho
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn check_guard(sites: usize, electrons: usize) -> Result<()> {
    if electrons == 0 || electrons > sites {
        return Err(Error::InvalidProblem(format!(
            "cannot place {electrons} electrons on {sites} sites"
        )));
    }
    let count = binomial(sites, electrons);
    if count > MAX_ATOMS {
        return Err(Error::Guard(format!(
            "{count} configurations of {electrons} electrons on {sites} sites exceed {MAX_ATOMS}"
        )));
    }
    Ok(())
}

/// All `N`-subsets in lexicographic order, with their pair costs.
pub fn enumerate_atoms(cost: &CostMatrix, electrons: usize) -> Result<Vec<SubsetAtom>> {
    let n = cost.len();
    check_guard(n, electrons)?;
    Ok((0..n)
        .combinations(electrons)
        .map(|sites| SubsetAtom {
            pair_cost: cost.pair_cost(&sites),
            sites,
            grid_size: n,
        })
        .collect())
}

/// Lowest-energy configuration, first in lexicographic order among ties.
pub fn exact_min_unconstrained(
    cost: &CostMatrix,
    electrons: usize,
    potential: Option<&[f64]>,
) -> Result<(SubsetAtom, f64)> {
    if let Some(c) = potential {
        if c.len() != cost.len() {
            return Err(Error::InvalidProblem(
                "potential length differs from the grid".into(),
            ));
        }
    }
    let atoms = enumerate_atoms(cost, electrons)?;
    let mut best: Option<(SubsetAtom, f64)> = None;
    for atom in atoms {
        let v = atom.value(potential);
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((atom, v));
        }
    }
    Ok(best.expect("at least one atom"))
}

/// Outcome of the marginal-constrained exact problem.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalOptimum {
    Optimal {
        measure: AtomMeasure,
        value: f64,
    },
    /// No mixture of atoms has the requested marginal.
    Infeasible {
        residual: f64,
    },
}

/// Lowest-energy mixture of atoms with one-body density `rho`, by a dense simplex
/// method over all atoms. The result keeps only atoms with positive weight.
pub fn exact_min_marginal(
    cost: &CostMatrix,
    electrons: usize,
    rho: &Marginal,
    potential: Option<&[f64]>,
) -> Result<MarginalOptimum> {
    let n = cost.len();
    if rho.len() != n {
        return Err(Error::InvalidMarginal(format!(
            "marginal has {} entries for {n} sites",
            rho.len()
        )));
    }
    let atoms = enumerate_atoms(cost, electrons)?;
    let p = atoms.len();
    let share = 1.0 / electrons as f64;
    let mut a = Mat::<f64>::zeros(n, p);
    for (j, atom) in atoms.iter().enumerate() {
        for &i in &atom.sites {
            a[(i, j)] = share;
        }
    }
    let objective: Vec<f64> = atoms.iter().map(|atom| atom.value(potential)).collect();
    match simplex_lp(&a, rho.weights(), &objective) {
        LpOutcome::Optimal { x, value } => {
            let mut measure = AtomMeasure {
                atoms: Vec::new(),
                weights: Vec::new(),
            };
            for (atom, w) in atoms.into_iter().zip(x) {
                if w > 0.0 {
                    measure.atoms.push(atom);
                    measure.weights.push(w);
                }
            }
            debug!(
                "exact marginal problem: {p} atoms, {} active, value {value:.12}",
                measure.atoms.len()
            );
            Ok(MarginalOptimum::Optimal { measure, value })
        }
        LpOutcome::Infeasible { residual } => Ok(MarginalOptimum::Infeasible { residual }),
        LpOutcome::Unbounded => Err(Error::Numerical(
            "bounded program reported unbounded".into(),
        )),
    }
}

/// Pair and (for `N >= 3`) triple marginals of a measure.
pub fn atom_to_marginals(measure: &AtomMeasure) -> Result<(PairMarginal, Option<TripleMarginal>)> {
    let first = measure
        .atoms
        .first()
        .ok_or_else(|| Error::InvalidProblem("empty atom measure".into()))?;
    let n = first.grid_size;
    let electrons = first.sites.len();
    if electrons < 2 {
        return Err(Error::TooFewElectrons {
            n: electrons,
            min: 2,
        });
    }
    let nf = electrons as f64;
    let mut gamma = Mat::<f64>::zeros(n, n);
    let mut kappa = (electrons >= 3).then(|| Tensor3::zeros(n));
    let pair_unit = 1.0 / (nf * (nf - 1.0));
    let triple_unit = 1.0 / (nf * (nf - 1.0) * (nf - 2.0));
    for (atom, &w) in measure.atoms.iter().zip(&measure.weights) {
        if atom.sites.len() != electrons {
            return Err(Error::InvalidProblem(
                "atoms disagree in electron count".into(),
            ));
        }
        for &i in &atom.sites {
            for &j in &atom.sites {
                if i == j {
                    continue;
                }
                gamma[(i, j)] += w * pair_unit;
                if let Some(t) = kappa.as_mut() {
                    for &k in &atom.sites {
                        if k != i && k != j {
                            let idx = t.index(i, j, k);
                            t.data[idx] += w * triple_unit;
                        }
                    }
                }
            }
        }
    }
    Ok((
        PairMarginal { matrix: gamma },
        kappa.map(|tensor| TripleMarginal { tensor }),
    ))
}

/// Measure with all weight on one atom.
pub fn single_atom(atom: SubsetAtom) -> AtomMeasure {
    AtomMeasure {
        atoms: vec![atom],
        weights: vec![1.0],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible { residual: f64 },
    Unbounded,
}

const PIVOT_TOL: f64 = 1e-11;

/// Dense tableau for `min c'x, Ax = b, x >= 0` with Bland's rule.
struct Tableau {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    t: Mat<f64>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.cols + 1;
        let pv = self.t[(row, col)];
        for j in 0..width {
            self.t[(row, j)] /= pv;
        }
        for r in 0..self.t.nrows() {
            if r == row {
                continue;
            }
            let f = self.t[(r, col)];
            if f != 0.0 {
                for j in 0..width {
                    let v = self.t[(row, j)];
                    self.t[(r, j)] -= f * v;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Runs the simplex method on cost `c` over the columns where `allowed` holds.
    /// Returns false when the objective is unbounded below.
    fn optimize(&mut self, c: &[f64], allowed: &dyn Fn(usize) -> bool) -> bool {
        let m = self.t.nrows();
        let rhs = self.cols;
        loop {
            // Reduced costs c_j - c_B' B^-1 A_j, read off the tableau.
            let mut entering = None;
            for j in 0..self.cols {
                if !allowed(j) || self.basis.contains(&j) {
                    continue;
                }
                let mut d = c[j];
                for r in 0..m {
                    d -= c[self.basis[r]] * self.t[(r, j)];
                }
                if d < -1e-12 {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else { return true };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..m {
                let a = self.t[(r, col)];
                if a > PIVOT_TOL {
                    let ratio = self.t[(r, rhs)] / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-14
                                || (ratio <= lratio + 1e-14 && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else { return false };
            self.pivot(row, col);
        }
    }
}

/// Two-phase simplex method. Requires `b >= 0`.
pub(crate) fn simplex_lp(a: &Mat<f64>, b: &[f64], c: &[f64]) -> LpOutcome {
    let (m, p) = (a.nrows(), a.ncols());
    let cols = p + m;
    let mut t = Mat::<f64>::zeros(m, cols + 1);
    for r in 0..m {
        let s = if b[r] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..p {
            t[(r, j)] = s * a[(r, j)];
        }
        t[(r, p + r)] = 1.0;
        t[(r, cols)] = s * b[r];
    }
    let mut tab = Tableau {
        t,
        basis: (p..cols).collect(),
        cols,
    };

    let phase1: Vec<f64> = (0..cols).map(|j| if j >= p { 1.0 } else { 0.0 }).collect();
    tab.optimize(&phase1, &|_| true);
    let residual: f64 = (0..m)
        .filter(|&r| tab.basis[r] >= p)
        .map(|r| tab.t[(r, cols)].abs())
        .sum();
    if residual > 1e-9 {
        return LpOutcome::Infeasible { residual };
    }
    // Drive remaining artificial variables out of the basis; rows without a
    // structural pivot are redundant and keep their artificial at zero.
    for r in 0..m {
        if tab.basis[r] >= p {
            if let Some(j) = (0..p).find(|&j| !tab.basis.contains(&j) && tab.t[(r, j)].abs() > 1e-9)
            {
                tab.pivot(r, j);
            }
        }
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, m));
    if !tab.optimize(&phase2, &|j| j < p) {
        return LpOutcome::Unbounded;
    }
    let mut x = vec![0.0; p];
    for r in 0..m {
        let j = tab.basis[r];
        if j < p {
            x[j] = tab.t[(r, cols)].max(0.0);
        }
    }
    let value = x.iter().zip(c).map(|(a, b)| a * b).sum();
    LpOutcome::Optimal { x, value }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, coulomb_cost, make_marginal, MarginalKind};
    use crate::relaxations::{gamma_ext, marginalize3to2};
    use proptest::prelude::*;

    fn cost_of(points: &[f64]) -> CostMatrix {
        let n = points.len();
        CostMatrix::from_mat(Mat::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                1.0 / (points[i] - points[j]).abs()
            }
        }))
        .unwrap()
    }

    #[test]
    fn enumeration_examples() {
        let c = cost_of(&[0.0, 1.0, 2.0]);
        let sets: Vec<Vec<usize>> = enumerate_atoms(&c, 2)
            .unwrap()
            .into_iter()
            .map(|a| a.sites)
            .collect();
        assert_eq!(sets, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(
            enumerate_atoms(&cost_of(&[0.0, 1.0, 2.0, 3.0]), 3)
                .unwrap()
                .len(),
            4
        );
        assert_eq!(enumerate_atoms(&c, 3).unwrap().len(), 1);
    }

    #[test]
    fn enumeration_guard() {
        let grid = build_grid(1, 64, 2.0).unwrap();
        let err = enumerate_atoms(&coulomb_cost(&grid), 8).unwrap_err();
        assert!(matches!(err, Error::Guard(_)));
    }

    #[test]
    fn unconstrained_examples() {
        let c = cost_of(&[-2.0, -2.0 / 3.0, 2.0 / 3.0, 2.0]);
        let (atom, v) = exact_min_unconstrained(&c, 2, None).unwrap();
        assert_eq!(atom.sites, vec![0, 3]);
        assert!((v - 0.25).abs() < 1e-15);
        let (atom, v) = exact_min_unconstrained(&c, 3, None).unwrap();
        assert!((v - 11.0 / 8.0).abs() < 1e-14);
        assert_eq!(atom.sites, vec![0, 1, 3]);
        let (_, v) = exact_min_unconstrained(&cost_of(&[-2.0, 0.0, 2.0]), 3, None).unwrap();
        assert!((v - 1.25).abs() < 1e-15);
    }

    #[test]
    fn marginal_examples() {
        let c = cost_of(&[-2.0, 0.0, 2.0]);
        let rho = Marginal::from_weights(vec![1.0; 3], MarginalKind::Uniform).unwrap();
        let MarginalOptimum::Optimal { measure, value } =
            exact_min_marginal(&c, 3, &rho, None).unwrap()
        else {
            panic!("feasible")
        };
        assert_eq!(measure.weights, vec![1.0]);
        assert!((value - 1.25).abs() < 1e-14);

        let c = cost_of(&[-2.0, 2.0]);
        let rho = Marginal::from_weights(vec![1.0, 1.0], MarginalKind::Uniform).unwrap();
        let MarginalOptimum::Optimal { value, .. } = exact_min_marginal(&c, 2, &rho, None).unwrap()
        else {
            panic!("feasible")
        };
        assert!((value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gaussian_six_sites_two_electrons() {
        let grid = build_grid(1, 6, 2.0).unwrap();
        let cost = coulomb_cost(&grid);
        let rho = make_marginal(MarginalKind::Gaussian1d, &grid).unwrap();
        let MarginalOptimum::Optimal { measure, value } =
            exact_min_marginal(&cost, 2, &rho, None).unwrap()
        else {
            panic!("feasible")
        };
        let d = measure.density();
        for (a, b) in d.iter().zip(rho.weights()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(measure.atoms.len() <= 6);
        // The reflection pairing x -> -x is feasible for a symmetric marginal.
        let reflect: f64 = (0..3)
            .map(|i| 2.0 * rho.weights()[i] * cost.get(i, 5 - i))
            .sum();
        assert!(value <= reflect + 1e-12);
    }

    #[test]
    fn infeasible_marginal_is_reported() {
        let c = cost_of(&[0.0, 1.0, 2.0]);
        let rho = Marginal::from_weights(vec![0.8, 0.1, 0.1], MarginalKind::Custom).unwrap();
        let out = exact_min_marginal(&c, 2, &rho, None).unwrap();
        assert!(matches!(out, MarginalOptimum::Infeasible { .. }));
    }

    #[test]
    fn marginal_agrees_with_unconstrained_at_optimal_density() {
        let grid = build_grid(1, 7, 2.0).unwrap();
        let cost = coulomb_cost(&grid);
        let pot = vec![0.5, -0.3, 0.2, 0.0, -0.6, 0.1, 0.3];
        let (atom, v) = exact_min_unconstrained(&cost, 3, Some(&pot)).unwrap();
        let rho = Marginal::from_weights(atom.density().density(), MarginalKind::Custom).unwrap();
        let MarginalOptimum::Optimal { value, .. } =
            exact_min_marginal(&cost, 3, &rho, Some(&pot)).unwrap()
        else {
            panic!("feasible")
        };
        assert!((value - v).abs() < 1e-12);
    }

    #[test]
    fn lp_against_hand_solution() {
        // min -x0 - x1 with x0 + x2 = 1, x1 + x3 = 2.
        let a = Mat::from_fn(2, 4, |r, c| match (r, c) {
            (0, 0) | (0, 2) | (1, 1) | (1, 3) => 1.0,
            _ => 0.0,
        });
        let out = simplex_lp(&a, &[1.0, 2.0], &[-1.0, -1.0, 0.0, 0.0]);
        assert_eq!(
            out,
            LpOutcome::Optimal {
                x: vec![1.0, 2.0, 0.0, 0.0],
                value: -3.0
            }
        );
        let unb = simplex_lp(
            &Mat::from_fn(1, 2, |_, c| if c == 0 { 1.0 } else { -1.0 }),
            &[1.0],
            &[0.0, -1.0],
        );
        assert_eq!(unb, LpOutcome::Unbounded);
    }

    #[test]
    fn atom_marginal_shapes() {
        let c = cost_of(&[0.0, 1.0, 2.0]);
        let atom = enumerate_atoms(&c, 2).unwrap().remove(0);
        let (gamma, kappa) = atom_to_marginals(&single_atom(atom)).unwrap();
        assert!(kappa.is_none());
        assert_eq!(gamma.matrix[(0, 1)], 0.5);
        assert_eq!(gamma.matrix[(1, 0)], 0.5);
        assert_eq!(gamma.matrix[(0, 0)], 0.0);
        assert_eq!(gamma.matrix[(2, 2)], 0.0);
    }

    proptest! {
        #[test]
        fn atom_marginals_are_consistent(n in 3usize..9, electrons in 3usize..6, pick in 0usize..1000) {
            prop_assume!(electrons <= n);
            let grid = build_grid(1, n, 2.0).unwrap();
            let atoms = enumerate_atoms(&coulomb_cost(&grid), electrons).unwrap();
            let atom = atoms[pick % atoms.len()].clone();
            let lambda = atom.density().density();
            let (gamma, kappa) = atom_to_marginals(&single_atom(atom)).unwrap();
            let kappa = kappa.unwrap();
            let folded = marginalize3to2(&kappa);
            let ext = gamma_ext(&lambda, electrons).unwrap();
            for j in 0..n {
                prop_assert_eq!(kappa.tensor.get(j, j, j), 0.0);
                for i in 0..n {
                    prop_assert!((folded.matrix[(i, j)] - gamma.matrix[(i, j)]).abs() < 1e-12);
                    prop_assert!((ext.matrix[(i, j)] - gamma.matrix[(i, j)]).abs() < 1e-12);
                    prop_assert_eq!(kappa.tensor.get(i, i, j), 0.0);
                }
            }
        }
    }
}
