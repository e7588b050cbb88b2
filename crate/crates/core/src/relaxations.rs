//! Pairwise and three-body moment relaxations of the symmetric multi-marginal
//! transport problem, and the maps between moments and physical marginals.
//!
//! Matrices are stored column-major, so the pairwise moment `L` occupies variables
//! `i + n*j`. The three-body moment `T(i,j,k)` occupies `i + n*j + n*n*k`, making each
//! slice `T(:,:,k)` a contiguous column-major block.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::conic::{ConeBlock, SdpProblem, SdpSolution};
use crate::error::{Error, Result};
use crate::grid::{CostMatrix, Marginal};

/// Largest grid accepted by the three-body relaxation (`n^3` reals per copy).
pub const MAX_TRIPLE_SITES: usize = 128;

/// Pairwise moment matrix, the relaxation of `lambda lambda^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMoment {
    pub matrix: Mat<f64>,
}

/// Symmetric pair marginal with zero diagonal and unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMarginal {
    pub matrix: Mat<f64>,
}

/// Dense `n x n x n` tensor, index `i + n*j + n*n*k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn slice(&self, k: usize) -> MatRef<'_, f64> {
        let nn = self.n * self.n;
        MatRef::from_column_major_slice(&self.data[k * nn..(k + 1) * nn], self.n, self.n)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `sum_k T(:,:,k)`.
    pub fn contract_last(&self) -> Mat<f64> {
        let n = self.n;
        let mut out = Mat::<f64>::zeros(n, n);
        for k in 0..n {
            let s = self.slice(k);
            for j in 0..n {
                for i in 0..n {
                    out[(i, j)] += s[(i, j)];
                }
            }
        }
        out
    }
}

/// Three-body moment tensor, the relaxation of `lambda (x) lambda (x) lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleMoment {
    pub tensor: Tensor3,
}

/// Symmetric three-body marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleMarginal {
    pub tensor: Tensor3,
}

/// Everything that defines one transport instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub electrons: usize,
    pub cost: CostMatrix,
    /// Prescribed one-body density. `None` leaves the density free.
    pub marginal: Option<Marginal>,
    /// External potential `c`, entering the objective as `c . lambda`.
    pub potential: Option<Vec<f64>>,
}

impl ProblemSpec {
    pub fn new(electrons: usize, cost: CostMatrix) -> Self {
        Self {
            electrons,
            cost,
            marginal: None,
            potential: None,
        }
    }

    pub fn with_marginal(mut self, m: Marginal) -> Self {
        self.marginal = Some(m);
        self
    }

    pub fn with_potential(mut self, c: Vec<f64>) -> Self {
        self.potential = Some(c);
        self
    }

    pub fn sites(&self) -> usize {
        self.cost.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sites();
        if self.electrons < 2 {
            return Err(Error::TooFewElectrons {
                n: self.electrons,
                min: 2,
            });
        }
        if self.electrons > n {
            return Err(Error::InvalidProblem(format!(
                "{} electrons cannot occupy {n} distinct sites",
                self.electrons
            )));
        }
        if let Some(m) = &self.marginal {
            if m.len() != n {
                return Err(Error::InvalidMarginal(format!(
                    "marginal has {} entries for {n} sites",
                    m.len()
                )));
            }
            let total: f64 = m.weights().iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidMarginal(format!("marginal sums to {total}")));
            }
            let cap = 1.0 / self.electrons as f64;
            if let Some(w) = m.weights().iter().find(|&&w| w > cap + 1e-12) {
                return Err(Error::InvalidMarginal(format!(
                    "marginal weight {w} exceeds 1/N = {cap}; no quantized mixture reaches it"
                )));
            }
        }
        if let Some(c) = &self.potential {
            if c.len() != n {
                return Err(Error::InvalidProblem(format!(
                    "potential has {} entries for {n} sites",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidProblem(
                    "potential has non-finite entries".into(),
                ));
            }
        }
        Ok(())
    }

    fn potential_at(&self, i: usize) -> f64 {
        self.potential.as_ref().map_or(0.0, |c| c[i])
    }
}

/// `gamma = N/(N-1) L - 1/(N-1) diag(L 1)`.
pub fn gamma_from_lambda(moment: &PairwiseMoment, electrons: usize) -> Result<PairMarginal> {
    if electrons < 2 {
        return Err(Error::TooFewElectrons {
            n: electrons,
            min: 2,
        });
    }
    let l = &moment.matrix;
    if l.nrows() != l.ncols() {
        return Err(Error::InvalidProblem(
            "pairwise moment must be square".into(),
        ));
    }
    let n = l.nrows();
    let nf = electrons as f64;
    let a = nf / (nf - 1.0);
    let b = 1.0 / (nf - 1.0);
    let mut g = Mat::from_fn(n, n, |i, j| a * l[(i, j)]);
    for i in 0..n {
        let row: f64 = (0..n).map(|j| l[(i, j)]).sum();
        g[(i, i)] -= b * row;
    }
    Ok(PairMarginal { matrix: g })
}

/// Extreme-point pair marginal of a quantized density `lambda`.
pub fn gamma_ext(lambda: &[f64], electrons: usize) -> Result<PairMarginal> {
    let n = lambda.len();
    let l = Mat::from_fn(n, n, |i, j| lambda[i] * lambda[j]);
    gamma_from_lambda(&PairwiseMoment { matrix: l }, electrons)
}

/// `lambda (x) lambda (x) lambda`.
pub fn theta_pure(lambda: &[f64]) -> TripleMoment {
    let n = lambda.len();
    let mut t = Tensor3::zeros(n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let idx = t.index(i, j, k);
                t.data[idx] = lambda[i] * lambda[j] * lambda[k];
            }
        }
    }
    TripleMoment { tensor: t }
}

fn pair_var(n: usize, i: usize, j: usize) -> usize {
    i + n * j
}

/// Pairwise moment relaxation as a conic program.
pub fn build_sdp_coulomb(spec: &ProblemSpec) -> Result<SdpProblem> {
    build_sdp_coulomb_pinned(spec, &[])
}

/// Pairwise relaxation with `L(i,i) = 1/N^2` added for every pinned site.
pub fn build_sdp_coulomb_pinned(spec: &ProblemSpec, pins: &[usize]) -> Result<SdpProblem> {
    spec.validate()?;
    let n = spec.sites();
    let nf = spec.electrons as f64;
    let mut p = SdpProblem::new(n * n);
    p.blocks.push(ConeBlock::psd(0, n));
    p.blocks.push(ConeBlock::nonneg(0, n * n));

    for j in 0..n {
        for i in 0..n {
            // N(N-1)/2 <C, gamma(L)> = N^2/2 <C, L> because the cost diagonal is zero.
            let pair = 0.5 * nf * nf * spec.cost.get(i, j);
            let field = 0.5 * (spec.potential_at(i) + spec.potential_at(j));
            p.objective[pair_var(n, i, j)] = pair + field;
        }
    }
    for j in 0..n {
        for i in 0..j {
            p.ties.push(vec![pair_var(n, i, j), pair_var(n, j, i)]);
        }
    }

    p.add_constraint("total", (0..n * n).map(|v| (v, 1.0)).collect(), 1.0);
    for i in 0..n {
        let mut terms: Vec<(usize, f64)> = (0..n).map(|j| (pair_var(n, i, j), -1.0 / nf)).collect();
        terms.push((pair_var(n, i, i), 1.0));
        p.add_constraint(format!("quant[{i}]"), terms, 0.0);
    }
    if let Some(m) = &spec.marginal {
        for (i, &rho) in m.weights().iter().enumerate() {
            let terms = (0..n).map(|j| (pair_var(n, i, j), 1.0)).collect();
            p.add_constraint(format!("marginal[{i}]"), terms, rho);
        }
    }
    let mut seen = vec![false; n];
    for &i in pins {
        if i >= n {
            return Err(Error::InvalidProblem(format!("pin {i} outside {n} sites")));
        }
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        p.add_constraint(
            format!("pin[{i}]"),
            vec![(pair_var(n, i, i), 1.0)],
            1.0 / (nf * nf),
        );
    }
    Ok(p)
}

/// Pairwise moment from a solved pairwise relaxation.
pub fn lambda_from_solution(sol: &SdpSolution, sites: usize) -> Result<PairwiseMoment> {
    if sol.primal.len() < sites * sites {
        return Err(Error::InvalidProblem(
            "solution too short for the pairwise moment".into(),
        ));
    }
    let x = &sol.primal;
    let matrix = Mat::from_fn(sites, sites, |i, j| {
        0.5 * (x[pair_var(sites, i, j)] + x[pair_var(sites, j, i)])
    });
    Ok(PairwiseMoment { matrix })
}

fn check_triple_electrons(electrons: usize) -> Result<()> {
    if electrons < 3 {
        return Err(Error::TooFewElectrons {
            n: electrons,
            min: 3,
        });
    }
    Ok(())
}

/// Three-body marginal of a three-body moment.
pub fn kappa_from_theta(theta: &TripleMoment, electrons: usize) -> Result<TripleMarginal> {
    check_triple_electrons(electrons)?;
    let t = &theta.tensor;
    let n = t.n;
    let nf = electrons as f64;
    let scale = 1.0 / (nf * (nf - 1.0) * (nf - 2.0));
    let pair = t.contract_last();
    let density: Vec<f64> = (0..n).map(|a| (0..n).map(|b| pair[(a, b)]).sum()).collect();

    let mut out = Tensor3::zeros(n);
    for (o, &v) in out.data.iter_mut().zip(&t.data) {
        *o = scale * nf * nf * nf * v;
    }
    let n2 = nf * nf;
    for a in 0..n {
        for b in 0..n {
            // delta_bc: L(b,a) at (a,b,b); delta_ac: L(a,b) at (a,b,a); delta_ab: L(a,c) at (a,a,c).
            let idx = out.index(a, b, b);
            out.data[idx] -= scale * n2 * pair[(b, a)];
            let idx = out.index(a, b, a);
            out.data[idx] -= scale * n2 * pair[(a, b)];
            let idx = out.index(a, a, b);
            out.data[idx] -= scale * n2 * pair[(a, b)];
        }
        let idx = out.index(a, a, a);
        out.data[idx] += scale * 2.0 * nf * density[a];
    }
    Ok(TripleMarginal { tensor: out })
}

/// Adjoint of [`kappa_from_theta`]: returns `W'` with `<W, kappa(T)> = <W', T>` for all `T`.
pub fn kappa_adjoint(weights: &Tensor3, electrons: usize) -> Result<Tensor3> {
    check_triple_electrons(electrons)?;
    let n = weights.n;
    let nf = electrons as f64;
    let scale = 1.0 / (nf * (nf - 1.0) * (nf - 2.0));
    let mut out = Tensor3::zeros(n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let v = nf * nf * nf * weights.get(i, j, k) + 2.0 * nf * weights.get(i, i, i)
                    - nf * nf
                        * (weights.get(j, i, i) + weights.get(i, j, i) + weights.get(i, i, j));
                let idx = out.index(i, j, k);
                out.data[idx] = scale * v;
            }
        }
    }
    Ok(out)
}

/// Distinct permutations of the triple, as variable indices.
fn orbit(n: usize, i: usize, j: usize, k: usize) -> Vec<usize> {
    let mut v = vec![
        i + n * (j + n * k),
        i + n * (k + n * j),
        j + n * (i + n * k),
        j + n * (k + n * i),
        k + n * (i + n * j),
        k + n * (j + n * i),
    ];
    v.sort_unstable();
    v.dedup();
    v
}

/// Three-body moment relaxation as a conic program.
pub fn build_sdp_coulomb2(spec: &ProblemSpec) -> Result<SdpProblem> {
    spec.validate()?;
    check_triple_electrons(spec.electrons)?;
    let n = spec.sites();
    if n > MAX_TRIPLE_SITES {
        return Err(Error::Guard(format!(
            "three-body relaxation limited to {MAX_TRIPLE_SITES} sites, got {n}"
        )));
    }
    let nf = spec.electrons as f64;
    let nn = n * n;
    let mut p = SdpProblem::new(nn * n);
    for k in 0..n {
        p.blocks.push(ConeBlock::psd(k * nn, n));
    }
    p.blocks.push(ConeBlock::nonneg(0, nn * n));

    // Objective: N(N-1)/6 <Cbar, kappa(T)> + c . lambda(T).
    let mut cbar = Tensor3::zeros(n);
    let w = nf * (nf - 1.0) / 6.0;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let idx = cbar.index(i, j, k);
                cbar.data[idx] = w * crate::grid::triple_cost(&spec.cost, i, j, k);
            }
        }
    }
    let obj = kappa_adjoint(&cbar, spec.electrons)?;
    p.objective = obj.data;
    if spec.potential.is_some() {
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    p.objective[i + n * (j + n * k)] += spec.potential_at(i);
                }
            }
        }
    }

    for i in 0..n {
        for j in i..n {
            for k in j..n {
                let o = orbit(n, i, j, k);
                if o.len() > 1 {
                    p.ties.push(o);
                }
            }
        }
    }

    p.add_constraint("total", (0..nn * n).map(|v| (v, 1.0)).collect(), 1.0);
    for j in 0..n {
        for i in 0..n {
            let mut terms: Vec<(usize, f64)> =
                (0..n).map(|k| (i + n * (j + n * k), -1.0 / nf)).collect();
            terms.push((i + n * (i + n * j), 1.0));
            p.add_constraint(format!("quant[{i},{j}]"), terms, 0.0);
        }
    }
    if let Some(m) = &spec.marginal {
        for (i, &rho) in m.weights().iter().enumerate() {
            let terms = (0..nn).map(|jk| (i + n * jk, 1.0)).collect();
            p.add_constraint(format!("marginal[{i}]"), terms, rho);
        }
    }
    Ok(p)
}

/// Three-body moment from a solved three-body relaxation.
pub fn theta_from_solution(sol: &SdpSolution, sites: usize) -> Result<TripleMoment> {
    let len = sites * sites * sites;
    if sol.primal.len() < len {
        return Err(Error::InvalidProblem(
            "solution too short for the three-body moment".into(),
        ));
    }
    Ok(TripleMoment {
        tensor: Tensor3 {
            n: sites,
            data: sol.primal[..len].to_vec(),
        },
    })
}

/// Pairwise moment `sum_k T(:,:,k)` implied by a three-body moment.
pub fn lambda_from_theta(theta: &TripleMoment) -> PairwiseMoment {
    PairwiseMoment {
        matrix: theta.tensor.contract_last(),
    }
}

/// Sum over the last index.
pub fn marginalize3to2(kappa: &TripleMarginal) -> PairMarginal {
    PairMarginal {
        matrix: kappa.tensor.contract_last(),
    }
}

/// Row sums, the one-body density of a pair marginal.
pub fn marginalize2to1(gamma: &PairMarginal) -> Vec<f64> {
    let g = &gamma.matrix;
    (0..g.nrows())
        .map(|i| (0..g.ncols()).map(|j| g[(i, j)]).sum())
        .collect()
}

/// `N(N-1)/2 sum C(i,j) gamma(i,j) + c . (gamma 1)`.
pub fn energy(
    gamma: &PairMarginal,
    cost: &CostMatrix,
    electrons: usize,
    potential: Option<&[f64]>,
) -> f64 {
    let g = &gamma.matrix;
    let n = g.nrows();
    let nf = electrons as f64;
    let mut pair = 0.0;
    for j in 0..n {
        for i in 0..n {
            pair += cost.get(i, j) * g[(i, j)];
        }
    }
    let mut e = 0.5 * nf * (nf - 1.0) * pair;
    if let Some(c) = potential {
        let rho = marginalize2to1(gamma);
        e += c.iter().zip(&rho).map(|(a, b)| a * b).sum::<f64>();
    }
    e
}
