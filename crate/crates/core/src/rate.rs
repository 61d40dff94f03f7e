//! Spectral analysis of the randomized iteration: per-cluster iteration matrices, the averaged
//! matrix and its second eigenvalue, connectivity and edge-disjointness of cluster sets, and
//! the exact mean-square rate on small instances.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridGraph, RootedTree};
use crate::linalg::{eigenvalues, null_space, pinv_symmetric, rank, symmetrize, zero_sum_basis};
use crate::model::{cluster_projector, validate_probabilities, ClusterSet, QuadraticModel};

/// Largest number of compensators for which the lifted `m² × m²` operator is formed.
pub const EXACT_RATE_MAX_M: usize = 12;

/// Distance from 1 under which an eigenvalue on `ker 1ᵀ` counts as a fixed direction.
const UNIT_TOL: f64 = 1e-9;

/// `F_r = I - (Ω_r M Ω_r)^♯ M`.
pub fn iteration_matrix(model: &QuadraticModel, members: &[usize]) -> Result<DMatrix<f64>> {
    let m = model.m();
    let omega = cluster_projector(members, m)?;
    let hess = model.hessian();
    let pinv = pinv_symmetric(&symmetrize(&(&omega * hess * &omega)));
    Ok(DMatrix::identity(m, m) - pinv * hess)
}

pub fn iteration_matrices(
    model: &QuadraticModel,
    clusters: &ClusterSet,
) -> Result<Vec<DMatrix<f64>>> {
    clusters
        .clusters()
        .iter()
        .map(|c| iteration_matrix(model, c))
        .collect()
}

/// `F_ave = Σ ρ_r F_r`.
pub fn averaged_matrix(fs: &[DMatrix<f64>], rho: &[f64]) -> Result<DMatrix<f64>> {
    validate_probabilities(rho, fs.len())?;
    let m = fs[0].nrows();
    Ok(fs
        .iter()
        .zip(rho)
        .fold(DMatrix::zeros(m, m), |acc, (f, &p)| acc + f * p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaReport {
    /// Second-largest eigenvalue modulus of `F_ave`, or 1 when the clusters are disconnected.
    pub beta: f64,
    /// No eigenvalue of `F_ave` restricted to `ker 1ᵀ` sits at 1.
    pub connected: bool,
    /// Eigenvalues of `F_ave` on `ker 1ᵀ`, in decreasing order. The remaining eigenvalue of
    /// `F_ave` is exactly 1 (left eigenvector `1`).
    pub spectrum: Vec<f64>,
}

/// β from the averaged iteration matrix.
///
/// Every `F_r` preserves `ker 1ᵀ` and fixes `1ᵀ` from the left, so the unit eigenvalue is
/// deflated by restricting `F_ave` to `ker 1ᵀ`. There `F_ave` is self-adjoint for the inner
/// product given by `M`, which is positive definite on `ker 1ᵀ`, so the restricted spectrum
/// is real and is computed through a Cholesky similarity.
pub fn beta(fs: &[DMatrix<f64>], rho: &[f64], hessian: &DMatrix<f64>) -> Result<BetaReport> {
    let f_ave = averaged_matrix(fs, rho)?;
    let m = f_ave.nrows();
    if m < 2 {
        return Ok(BetaReport {
            beta: 0.0,
            connected: true,
            spectrum: Vec::new(),
        });
    }
    let mut spectrum: Vec<f64> = match symmetric_restrictions(fs, hessian)? {
        Some(hs) => {
            let s = hs
                .iter()
                .zip(rho)
                .fold(DMatrix::zeros(m - 1, m - 1), |acc, (h, &p)| acc + h * p);
            s.symmetric_eigenvalues().iter().copied().collect()
        }
        None => {
            let basis = zero_sum_basis(m);
            let g = basis.transpose() * &f_ave * &basis;
            eigenvalues(&g)?
                .iter()
                .map(|z| if z.im.abs() < 1e-12 { z.re } else { z.norm() })
                .collect()
        }
    };
    spectrum.sort_by(|a, b| b.total_cmp(a));
    let connected = spectrum.iter().all(|&l| (l - 1.0).abs() > UNIT_TOL);
    let beta = if connected {
        spectrum.iter().fold(0.0_f64, |acc, l| acc.max(l.abs()))
    } else {
        1.0
    };
    Ok(BetaReport {
        beta,
        connected,
        spectrum,
    })
}

/// `1 - ((Σ ρ_r |C_r|) - 1) / (m - 1)`.
pub fn rate_bound(sizes: &[usize], rho: &[f64], m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidConfig(
            "the rate bound needs at least two compensators".into(),
        ));
    }
    validate_probabilities(rho, sizes.len())?;
    let mean_size: f64 = sizes.iter().zip(rho).map(|(&c, &p)| c as f64 * p).sum();
    Ok(1.0 - (mean_size - 1.0) / (m as f64 - 1.0))
}

/// Connectivity of the co-membership graph (`h ~ k` when some cluster holds both).
pub fn hypergraph_connected(clusters: &[Vec<usize>], m: usize) -> bool {
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for cluster in clusters {
        for pair in cluster.windows(2) {
            if pair[0] < m && pair[1] < m {
                let (a, b) = (find(&mut parent, pair[0]), find(&mut parent, pair[1]));
                parent[a] = b;
            }
        }
    }
    if m == 0 {
        return true;
    }
    let root = find(&mut parent, 0);
    (0..m).all(|v| find(&mut parent, v) == root)
}

/// Co-membership counts `[W]_{hk}`.
pub fn comembership(clusters: &[Vec<usize>], m: usize) -> DMatrix<usize> {
    let mut w = DMatrix::zeros(m, m);
    for cluster in clusters {
        for &h in cluster {
            for &k in cluster {
                if h != k {
                    w[(h, k)] += 1;
                }
            }
        }
    }
    w
}

/// `rank [Ω_1 … Ω_ℓ] = m - 1`.
pub fn projectors_span_zero_sum(clusters: &[Vec<usize>], m: usize) -> Result<bool> {
    let mut stacked = DMatrix::zeros(m, m * clusters.len());
    for (r, c) in clusters.iter().enumerate() {
        stacked
            .view_mut((0, r * m), (m, m))
            .copy_from(&cluster_projector(c, m)?);
    }
    Ok(rank(&stacked, 1e-10) == m.saturating_sub(1))
}

/// Whether `x = 0` is the only `x ∈ ker 1ᵀ` fixed by every `F_r`.
pub fn only_trivial_fixed_point(fs: &[DMatrix<f64>]) -> bool {
    let m = fs[0].nrows();
    let mut stacked = DMatrix::zeros(1 + m * fs.len(), m);
    stacked.row_mut(0).fill(1.0);
    for (r, f) in fs.iter().enumerate() {
        stacked
            .view_mut((1 + r * m, 0), (m, m))
            .copy_from(&(DMatrix::identity(m, m) - f));
    }
    null_space(&stacked, 1e-9).ncols() == 0
}

/// Union of the tree-path edge sets between every pair of cluster members.
pub fn cluster_path_edges(tree: &RootedTree, nodes: &[usize]) -> BTreeSet<usize> {
    let mut edges = BTreeSet::new();
    for (a, &h) in nodes.iter().enumerate() {
        for &k in &nodes[a + 1..] {
            edges.extend(tree.path(h, k));
        }
    }
    edges
}

/// Whether the clusters' path edge sets are pairwise disjoint. `compensators` maps positions to
/// grid nodes.
pub fn edge_disjoint_check(
    grid: &GridGraph,
    compensators: &[usize],
    clusters: &[Vec<usize>],
) -> Result<bool> {
    let tree = RootedTree::new(grid)?;
    let mut used = BTreeSet::new();
    for cluster in clusters {
        let nodes = positions_to_nodes(compensators, cluster)?;
        for e in cluster_path_edges(&tree, &nodes) {
            if !used.insert(e) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn positions_to_nodes(compensators: &[usize], cluster: &[usize]) -> Result<Vec<usize>> {
    cluster
        .iter()
        .map(|&h| {
            compensators.get(h).copied().ok_or(Error::IndexOutOfRange {
                index: h,
                n: compensators.len(),
            })
        })
        .collect()
}

/// Edge-disjoint clustering of a radial grid with as many clusters as possible.
///
/// Takes the subtree spanned by the compensators, cuts it at every compensator and returns the
/// compensators touching each piece as one cluster. When every branch point is a compensator
/// the pieces are single paths and the result is `m - 1` pairs. Selection is uniform.
pub fn optimal_tree_clustering(grid: &GridGraph, compensators: &[usize]) -> Result<ClusterSet> {
    let m = compensators.len();
    if m < 2 {
        return Err(Error::InvalidCompensators(
            "clustering needs at least two compensators".into(),
        ));
    }
    if compensators[0] != 0 {
        return Err(Error::InvalidCompensators(
            "the PCC must be the first compensator".into(),
        ));
    }
    let tree = RootedTree::new(grid)?;
    let n = grid.n();
    let mut position = vec![None; n];
    for (a, &v) in compensators.iter().enumerate() {
        if v >= n {
            return Err(Error::IndexOutOfRange { index: v, n });
        }
        position[v] = Some(a);
    }
    let mut steiner = BTreeSet::new();
    for &v in compensators {
        steiner.extend(tree.path(0, v));
    }
    // Pieces: Steiner edges joined at non-compensator nodes.
    let edges = grid.edges();
    let steiner: Vec<usize> = steiner.into_iter().collect();
    let mut group: Vec<usize> = (0..steiner.len()).collect();
    fn find(group: &mut [usize], mut x: usize) -> usize {
        while group[x] != x {
            group[x] = group[group[x]];
            x = group[x];
        }
        x
    }
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, &e) in steiner.iter().enumerate() {
        incident[edges[e].from].push(k);
        incident[edges[e].to].push(k);
    }
    for v in (0..n).filter(|&v| position[v].is_none()) {
        for pair in incident[v].windows(2) {
            let (a, b) = (find(&mut group, pair[0]), find(&mut group, pair[1]));
            group[a] = b;
        }
    }
    let mut pieces: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (k, &e) in steiner.iter().enumerate() {
        let root = find(&mut group, k);
        let entry = pieces.entry(root).or_default();
        for v in [edges[e].from, edges[e].to] {
            if let Some(a) = position[v] {
                entry.insert(a);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = pieces
        .into_values()
        .map(|s| s.into_iter().collect())
        .collect();
    clusters.sort();
    ClusterSet::new(clusters, None, m)
}

/// `𝓛(P) = Σ ρ_r F_rᵀ P F_r`.
pub fn lyapunov_map(fs: &[DMatrix<f64>], rho: &[f64], p: &DMatrix<f64>) -> DMatrix<f64> {
    fs.iter()
        .zip(rho)
        .fold(DMatrix::zeros(p.nrows(), p.ncols()), |acc, (f, &w)| {
            acc + f.transpose() * p * f * w
        })
}

/// `Σ ρ_r F_rᵀ ⊗ F_rᵀ`, the matrix of [`lyapunov_map`] on column-major vectorizations.
pub fn lifted_operator(fs: &[DMatrix<f64>], rho: &[f64]) -> DMatrix<f64> {
    let m = fs[0].nrows();
    fs.iter()
        .zip(rho)
        .fold(DMatrix::zeros(m * m, m * m), |acc, (f, &w)| {
            let ft = f.transpose();
            acc + ft.kronecker(&ft) * w
        })
}

/// Restrictions `H_r = Lᵀ (Bᵀ F_r B) L⁻ᵀ` of the iteration matrices to `ker 1ᵀ` (orthonormal basis
/// `B`), in coordinates where the metric `Bᵀ M B = L Lᵀ` becomes the identity. Each `H_r` is
/// symmetric because `F_r` is self-adjoint for `M`. `None` when `Bᵀ M B` is not positive definite.
pub fn symmetric_restrictions(
    fs: &[DMatrix<f64>],
    hessian: &DMatrix<f64>,
) -> Result<Option<Vec<DMatrix<f64>>>> {
    let m = hessian.nrows();
    let basis = zero_sum_basis(m);
    let metric = symmetrize(&(basis.transpose() * hessian * &basis));
    let Some(chol) = metric.cholesky() else {
        return Ok(None);
    };
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Internal("singular Cholesky factor".into()))?;
    Ok(Some(
        fs.iter()
            .map(|f| {
                symmetrize(&(l.transpose() * basis.transpose() * f * &basis * l_inv.transpose()))
            })
            .collect(),
    ))
}

/// Exact mean-square rate: the spectral radius of [`lyapunov_map`] on the part of the state
/// space reachable from `Ω M Ω`.
///
/// Errors `e = B y` stay in `ker 1ᵀ`, so the recursion is followed on `D = Bᵀ Δ B`. In the
/// coordinates of [`symmetric_restrictions`] it reads `D ↦ Σ ρ_r H_r D H_r` from `D = I`, a
/// symmetric operator whose Krylov space from `I` is invariant and fully observed by `yᵀ D y`.
pub fn exact_rate(fs: &[DMatrix<f64>], rho: &[f64], hessian: &DMatrix<f64>) -> Result<f64> {
    validate_probabilities(rho, fs.len())?;
    let m = hessian.nrows();
    if m > EXACT_RATE_MAX_M {
        return Err(Error::TooLarge(format!(
            "exact rate needs an {0}²×{0}² operator; limited to {EXACT_RATE_MAX_M} compensators",
            m
        )));
    }
    if m < 2 {
        return Ok(0.0);
    }
    let hs = symmetric_restrictions(fs, hessian)?.ok_or_else(|| {
        Error::InvalidConfig("the Hessian is not positive definite on zero-sum vectors".into())
    })?;
    let k = m - 1;
    let lifted = hs
        .iter()
        .zip(rho)
        .fold(DMatrix::zeros(k * k, k * k), |acc, (h, &w)| {
            acc + h.kronecker(h) * w
        });
    let identity = DMatrix::<f64>::identity(k, k);
    let seed = DVector::from_column_slice(identity.as_slice());

    let tol = 1e-12;
    let mut basis: Vec<DVector<f64>> = vec![&seed / seed.norm()];
    while basis.len() < k * k {
        let mut w = &lifted * basis.last().expect("basis is never empty");
        let norm0 = w.norm();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w -= q * c;
            }
        }
        let norm = w.norm();
        if norm <= tol * norm0.max(f64::MIN_POSITIVE) {
            break;
        }
        basis.push(w / norm);
    }
    let q = DMatrix::from_columns(&basis);
    let reduced = symmetrize(&(q.transpose() * &lifted * &q));
    Ok(reduced
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, l| acc.max(l.abs())))
}

/// Machine-readable summary of the spectral analysis of a cluster set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub m: usize,
    pub clusters: Vec<Vec<usize>>,
    pub rho: Vec<f64>,
    pub connected: bool,
    /// `None` when the grid is meshed.
    pub edge_disjoint: Option<bool>,
    pub beta: f64,
    pub bound: f64,
    /// `None` above [`EXACT_RATE_MAX_M`] compensators.
    pub r_exact: Option<f64>,
    pub spectrum: Vec<f64>,
    pub f_ave: Vec<Vec<f64>>,
    pub iteration_matrices: Vec<Vec<Vec<f64>>>,
}

fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn rate_report(
    grid: &GridGraph,
    model: &QuadraticModel,
    clusters: &ClusterSet,
) -> Result<RateReport> {
    let m = model.m();
    if clusters.m() != m {
        return Err(Error::Dimension(format!(
            "model has {m} compensators, clusters {}",
            clusters.m()
        )));
    }
    let fs = iteration_matrices(model, clusters)?;
    let rho = clusters.rho();
    let b = beta(&fs, rho, model.hessian())?;
    let connected = hypergraph_connected(clusters.clusters(), m);
    let edge_disjoint = if grid.is_tree() {
        Some(edge_disjoint_check(
            grid,
            model.compensators(),
            clusters.clusters(),
        )?)
    } else {
        None
    };
    let r_exact = if m <= EXACT_RATE_MAX_M {
        Some(exact_rate(&fs, rho, model.hessian())?)
    } else {
        None
    };
    Ok(RateReport {
        m,
        clusters: clusters.clusters().to_vec(),
        rho: rho.to_vec(),
        connected,
        edge_disjoint,
        beta: if connected { b.beta } else { 1.0 },
        bound: rate_bound(&clusters.sizes(), rho, m.max(2))?,
        r_exact,
        spectrum: b.spectrum,
        f_ave: rows(&averaged_matrix(&fs, rho)?),
        iteration_matrices: fs.iter().map(rows).collect(),
    })
}
