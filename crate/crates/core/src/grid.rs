//! Discrete domains, Coulomb costs and the marginal families used in the experiments.
//!
//! A [`Grid`] is a uniform tensor grid on `[-h, h]^d` that includes both endpoints of
//! every axis. Multi-dimensional grids are vectorized in row-major order: the last
//! coordinate varies fastest.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of points per axis.
pub const MAX_POINTS_PER_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    points_per_dim: usize,
    half_width: f64,
    /// Flattened coordinates, `dim` values per point.
    coords: Vec<f64>,
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Number of grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Distance between neighbouring points along an axis.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_dim - 1) as f64
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Index of the point with every coordinate negated.
    pub fn reflected_index(&self, i: usize) -> usize {
        self.len() - 1 - i
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.point(i)
            .iter()
            .zip(self.point(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Builds the uniform grid on `[-half_width, half_width]^dim` with `points_per_dim`
/// points per axis, endpoints included.
pub fn build_grid(dim: usize, points_per_dim: usize, half_width: f64) -> Result<Grid> {
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidGrid(format!("dimension {dim} not in 1..=3")));
    }
    if !(2..=MAX_POINTS_PER_DIM).contains(&points_per_dim) {
        return Err(Error::InvalidGrid(format!(
            "points per dimension {points_per_dim} not in 2..={MAX_POINTS_PER_DIM}"
        )));
    }
    if !(half_width.is_finite() && half_width > 0.0) {
        return Err(Error::InvalidGrid(format!(
            "half width {half_width} must be positive"
        )));
    }
    let n = points_per_dim;
    let axis: Vec<f64> = (0..n)
        .map(|k| {
            // Symmetric formula so that axis[k] == -axis[n-1-k] exactly.
            let t = (2 * k) as f64 - (n - 1) as f64;
            half_width * t / (n - 1) as f64
        })
        .collect();
    let total = n.pow(dim as u32);
    let mut coords = Vec::with_capacity(total * dim);
    for flat in 0..total {
        // Row-major: first coordinate is the slowest index.
        let mut rem = flat;
        let mut digits = [0usize; 3];
        for d in (0..dim).rev() {
            digits[d] = rem % n;
            rem /= n;
        }
        coords.extend(digits[..dim].iter().map(|&k| axis[k]));
    }
    Ok(Grid {
        dim,
        points_per_dim,
        half_width,
        coords,
    })
}

/// Symmetric pair cost with zero diagonal.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    entries: Mat<f64>,
}

impl CostMatrix {
    /// Wraps a user supplied cost. The matrix is symmetrized and its diagonal zeroed.
    pub fn from_mat(m: Mat<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n || n == 0 {
            return Err(Error::InvalidProblem(
                "cost matrix must be square and non-empty".into(),
            ));
        }
        let entries = Mat::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                0.5 * (m[(i, j)] + m[(j, i)])
            }
        });
        for j in 0..n {
            for i in 0..n {
                let v = entries[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidProblem(
                        "cost entries must be finite and nonnegative".into(),
                    ));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn as_mat(&self) -> &Mat<f64> {
        &self.entries
    }

    /// Smallest off-diagonal entry.
    pub fn min_off_diagonal(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    best = best.min(self.entries[(i, j)]);
                }
            }
        }
        best
    }

    /// Sum of pair costs over the distinct sites in `sites`.
    pub fn pair_cost(&self, sites: &[usize]) -> f64 {
        let mut total = 0.0;
        for (a, &i) in sites.iter().enumerate() {
            for &j in &sites[a + 1..] {
                total += self.get(i, j);
            }
        }
        total
    }
}

/// `C(i,j) = 1/|x_i - x_j|` off the diagonal, zero on it.
pub fn coulomb_cost(grid: &Grid) -> CostMatrix {
    let n = grid.len();
    let entries = Mat::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            1.0 / grid.distance(i, j)
        }
    });
    CostMatrix { entries }
}

/// Three-body cost `C(i,j) + C(j,k) + C(k,i)`, evaluated on demand.
#[inline]
pub fn triple_cost(cost: &CostMatrix, i: usize, j: usize, k: usize) -> f64 {
    cost.get(i, j) + cost.get(j, k) + cost.get(k, i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalKind {
    /// `rho(x) ∝ 1`
    Uniform,
    /// `rho(x) ∝ exp(-x^2/sqrt(pi))`
    Gaussian1d,
    /// `rho(x) ∝ sin(4x) + 1.5`
    Sine1d,
    /// `rho(x,y) ∝ exp(-(x^2+y^2)/sqrt(12 pi))`
    Gaussian2d,
    Custom,
}

impl fmt::Display for MarginalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MarginalKind::Uniform => "uniform",
            MarginalKind::Gaussian1d => "gaussian",
            MarginalKind::Sine1d => "sine",
            MarginalKind::Gaussian2d => "gaussian2d",
            MarginalKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for MarginalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MarginalKind::Uniform),
            "gaussian" | "gaussian1d" => Ok(MarginalKind::Gaussian1d),
            "sine" | "sine1d" => Ok(MarginalKind::Sine1d),
            "gaussian2d" => Ok(MarginalKind::Gaussian2d),
            "custom" => Ok(MarginalKind::Custom),
            other => Err(Error::InvalidMarginal(format!(
                "unknown marginal kind `{other}`"
            ))),
        }
    }
}

/// Probability vector on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    weights: Vec<f64>,
    kind: MarginalKind,
}

impl Marginal {
    /// Normalizes arbitrary nonnegative weights to a probability vector.
    pub fn from_weights(weights: Vec<f64>, kind: MarginalKind) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMarginal("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMarginal(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidMarginal("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { weights, kind })
    }

    /// Reads one nonnegative value per line (blank lines and `#` comments skipped).
    pub fn from_file(path: &Path, grid: &Grid) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut weights = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                Error::InvalidMarginal(format!(
                    "{}:{}: cannot parse `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            weights.push(v);
        }
        if weights.len() != grid.len() {
            return Err(Error::InvalidMarginal(format!(
                "marginal file has {} values, grid has {} points",
                weights.len(),
                grid.len()
            )));
        }
        Self::from_weights(weights, MarginalKind::Custom)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> MarginalKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates one of the built-in densities on the grid and normalizes by the discrete sum.
pub fn make_marginal(kind: MarginalKind, grid: &Grid) -> Result<Marginal> {
    let need = |d: usize| -> Result<()> {
        if grid.dim() != d {
            Err(Error::InvalidMarginal(format!(
                "{kind} marginal needs a {d}D grid, got {}D",
                grid.dim()
            )))
        } else {
            Ok(())
        }
    };
    let weights: Vec<f64> = match kind {
        MarginalKind::Uniform => vec![1.0; grid.len()],
        MarginalKind::Gaussian1d => {
            need(1)?;
            grid.points()
                .map(|p| (-p[0] * p[0] / PI.sqrt()).exp())
                .collect()
        }
        MarginalKind::Sine1d => {
            need(1)?;
            grid.points().map(|p| (4.0 * p[0]).sin() + 1.5).collect()
        }
        MarginalKind::Gaussian2d => {
            need(2)?;
            grid.points()
                .map(|p| (-(p[0] * p[0] + p[1] * p[1]) / (12.0 * PI).sqrt()).exp())
                .collect()
        }
        MarginalKind::Custom => {
            return Err(Error::InvalidMarginal(
                "custom marginals are loaded from a file".into(),
            ))
        }
    };
    Marginal::from_weights(weights, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_dimensional_three_points() {
        let g = build_grid(1, 3, 2.0).unwrap();
        let xs: Vec<f64> = g.points().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-2.0, 0.0, 2.0]);
    }

    #[test]
    fn two_dimensional_row_major() {
        let g = build_grid(2, 2, 2.0).unwrap();
        let pts: Vec<Vec<f64>> = g.points().map(|p| p.to_vec()).collect();
        assert_eq!(
            pts,
            vec![
                vec![-2.0, -2.0],
                vec![-2.0, 2.0],
                vec![2.0, -2.0],
                vec![2.0, 2.0]
            ]
        );
    }

    #[test]
    fn spacing_of_64_points() {
        let g = build_grid(1, 64, 2.0).unwrap();
        assert_eq!(g.len(), 64);
        assert_abs_diff_eq!(g.spacing(), 4.0 / 63.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.point(1)[0] - g.point(0)[0], 4.0 / 63.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(build_grid(0, 3, 2.0).is_err());
        assert!(build_grid(4, 3, 2.0).is_err());
        assert!(build_grid(1, 1, 2.0).is_err());
        assert!(build_grid(1, 3, 0.0).is_err());
    }

    #[test]
    fn coulomb_entries() {
        let g = build_grid(1, 3, 2.0).unwrap();
        let c = coulomb_cost(&g);
        assert_eq!(c.get(0, 2), 0.25);
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 0.5);

        let g2 = build_grid(2, 2, 2.0).unwrap();
        let c2 = coulomb_cost(&g2);
        assert_abs_diff_eq!(c2.get(0, 3), 1.0 / 32f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(c2.get(0, 3), 0.176777, epsilon = 1e-6);
    }

    #[test]
    fn triple_cost_examples() {
        let g = build_grid(1, 3, 2.0).unwrap();
        let c = coulomb_cost(&g);
        assert_eq!(triple_cost(&c, 0, 1, 2), 1.25);
        assert_eq!(triple_cost(&c, 0, 0, 2), 2.0 * c.get(0, 2));
        assert_eq!(triple_cost(&c, 1, 1, 1), 0.0);
    }

    #[test]
    fn builtin_marginals() {
        let g4 = build_grid(1, 4, 2.0).unwrap();
        let u = make_marginal(MarginalKind::Uniform, &g4).unwrap();
        assert_eq!(u.weights(), &[0.25; 4]);

        let g3 = build_grid(1, 3, 2.0).unwrap();
        let gm = make_marginal(MarginalKind::Gaussian1d, &g3).unwrap();
        let e = (-4.0 / PI.sqrt()).exp();
        let z = 1.0 + 2.0 * e;
        assert_abs_diff_eq!(gm.weights()[0], e / z, epsilon = 1e-15);
        assert_abs_diff_eq!(gm.weights()[1], 1.0 / z, epsilon = 1e-15);

        let g = build_grid(1, 37, 2.0).unwrap();
        let s = make_marginal(MarginalKind::Sine1d, &g).unwrap();
        let z: f64 = g.points().map(|p| (4.0 * p[0]).sin() + 1.5).sum();
        assert!(s.weights().iter().all(|&w| w >= 0.5 / z - 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g1 = build_grid(1, 5, 2.0).unwrap();
        let g2 = build_grid(2, 5, 2.0).unwrap();
        assert!(make_marginal(MarginalKind::Gaussian2d, &g1).is_err());
        assert!(make_marginal(MarginalKind::Gaussian1d, &g2).is_err());
        assert!(make_marginal(MarginalKind::Sine1d, &g2).is_err());
    }

    #[test]
    fn marginal_file_roundtrip() {
        let g = build_grid(1, 3, 2.0).unwrap();
        let dir = std::env::temp_dir().join(format!("sdpcoulomb-grid-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rho.txt");
        std::fs::write(&path, "1\n# comment\n2\n1\n").unwrap();
        let m = Marginal::from_file(&path, &g).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.5, 0.25]);
        assert_eq!(m.kind(), MarginalKind::Custom);

        std::fs::write(&path, "1\n2\n").unwrap();
        assert!(Marginal::from_file(&path, &g).is_err());
        std::fs::write(&path, "1\n-2\n1\n").unwrap();
        assert!(Marginal::from_file(&path, &g).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn cost_symmetry_and_triple_permutations(dim in 1usize..=2, n in 2usize..=7, i in 0usize..49, j in 0usize..49, k in 0usize..49) {
                let g = build_grid(dim, n, 2.0).unwrap();
                let c = coulomb_cost(&g);
                let m = g.len();
                let (i, j, k) = (i % m, j % m, k % m);
                prop_assert_eq!(c.get(i, j), c.get(j, i));
                let t = triple_cost(&c, i, j, k);
                for p in [(i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                    prop_assert!((triple_cost(&c, p.0, p.1, p.2) - t).abs() <= 1e-14 * t.max(1.0));
                }
                if i != j {
                    prop_assert!(c.get(i, j) > 0.0);
                }
            }

            #[test]
            fn marginals_normalized_and_reflection_symmetric(n in 2usize..=40, which in 0usize..3) {
                let (kind, dim) = [(MarginalKind::Uniform, 1), (MarginalKind::Gaussian1d, 1), (MarginalKind::Gaussian2d, 2)][which];
                let n = if dim == 2 { n.min(12) } else { n };
                let g = build_grid(dim, n, 2.0).unwrap();
                let m = make_marginal(kind, &g).unwrap();
                let total: f64 = m.weights().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(m.weights().iter().all(|&w| w >= 0.0));
                for i in 0..g.len() {
                    let r = g.reflected_index(i);
                    prop_assert!(g.point(i).iter().zip(g.point(r)).all(|(a, b)| *a == -*b));
                    prop_assert!((m.weights()[i] - m.weights()[r]).abs() <= 1e-15);
                }
            }
        }
    }
}
