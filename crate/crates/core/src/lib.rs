//! Semidefinite relaxations of multi-marginal optimal transport with Coulomb cost
//! on a discretized domain, together with rounding, dual potential extraction and
//! an exact linear-programming oracle for small instances.

pub mod conic;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod linalg;
pub mod oracle;
pub mod relaxations;
pub mod rounding;

pub use conic::{
    project_psd, solve, solve_with_start, ConeBlock, ConeKind, LinearConstraint, Residuals,
    SdpProblem, SdpSolution, SolveStatus, SolverSettings, WarmStart,
};
pub use dual::{
    align_potential, comotion_potential, dual_subgradient_check, extract_kantorovich,
    potential_error, ComotionSet, DualCertificate, SubgradientCheck,
};
pub use error::{Error, Result};
pub use experiment::{
    random_potential, run_bench_table, run_dual, run_oracle, run_round, run_solve2, run_solve3,
    DualRun, EnergyReport, ExperimentConfig, Instance, PairwiseRun, Provenance, RoundRun,
    StageStats, TableCell, TripleRun, LARGE_GRID,
};
pub use grid::{
    build_grid, coulomb_cost, make_marginal, triple_cost, CostMatrix, Grid, Marginal, MarginalKind,
};
pub use oracle::{
    atom_to_marginals, enumerate_atoms, exact_min_marginal, exact_min_unconstrained, AtomMeasure,
    MarginalOptimum, SubsetAtom,
};
pub use relaxations::{
    build_sdp_coulomb, build_sdp_coulomb2, build_sdp_coulomb_pinned, energy, gamma_ext,
    gamma_from_lambda, kappa_adjoint, kappa_from_theta, lambda_from_solution, lambda_from_theta,
    marginalize2to1, marginalize3to2, theta_from_solution, theta_pure, PairMarginal,
    PairwiseMoment, ProblemSpec, Tensor3, TripleMarginal, TripleMoment,
};
pub use rounding::{
    als_refine, energy_gap, energy_reweight, jenrich, marginal_split, pair_column_candidates,
    pair_fit, round_constrained, round_pairwise, round_unconstrained, simplex_fit, CandidateSet,
    CandidateSource, QuantizedDensity, RoundedSolution, RoundingSettings,
};
