//! Steady-state microgrid model and distributed reactive-power optimization by randomized
//! cluster updates.
//!
//! The modules build on each other: [`grid`] holds the topology and the Green-like matrix,
//! [`power_flow`] solves the nonlinear and first-order steady states, [`model`] sets up the
//! quadratic loss model and the per-cluster updates, [`gossip`] runs the randomized online
//! procedure, [`rate`] analyses its convergence rate and [`network`] reads network files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gossip;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod network;
pub mod power_flow;
pub mod rate;

pub use error::{Error, Result};
pub use gossip::{
    poisson_schedule, select_cluster, ClusterSampler, Mode, Problem, SimulationConfig, Simulator,
    Trace, TraceRecord,
};
pub use grid::{
    green_matrix, uniform_angle, AngleReport, Edge, GreenMatrix, GridGraph, RootedTree,
};
pub use model::{
    cluster_projector, hessian_from_reff, measurement_functional, quadratic_model, reff_matrix,
    ClusterSet, Optimum, QuadraticModel, Supervisor,
};
pub use nalgebra::{DMatrix, DVector};
pub use network::{load_network, Network, NetworkFile, NodeKind};
pub use num_complex::Complex64;
pub use power_flow::{
    approx_state, approximation_error, solve_exact, total_losses, ApproximationReport, ScaleRow,
    ScenarioSpec, SolveOptions, SteadyState,
};
pub use rate::{
    beta, edge_disjoint_check, exact_rate, hypergraph_connected, iteration_matrices,
    iteration_matrix, optimal_tree_clustering, rate_bound, rate_report, BetaReport, RateReport,
};
