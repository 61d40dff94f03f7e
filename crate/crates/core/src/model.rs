//! Quadratic reactive-power model and the per-cluster update machinery.
//!
//! The compensators `C` (PCC included, at position 0) are ordered by node index. All vectors
//! indexed by "position" are m-vectors in that order; `q_fixed` holds the reactive power of the
//! uncontrolled nodes in node order.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::GreenMatrix;
use crate::linalg::{pinv_symmetric, symmetrize};
use crate::power_flow::ScenarioSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    compensators: Vec<usize>,
    uncontrolled: Vec<usize>,
    m_block: DMatrix<f64>,
    n_block: DMatrix<f64>,
    q_block: DMatrix<f64>,
    q_fixed: DVector<f64>,
}

/// Partitions `Re(X)` into the compensator block `M`, the coupling block `N` and the rest.
pub fn quadratic_model(
    green: &GreenMatrix,
    compensators: &[usize],
    q_fixed: &DVector<f64>,
) -> Result<QuadraticModel> {
    let n = green.n();
    let set: BTreeSet<usize> = compensators.iter().copied().collect();
    if set.len() != compensators.len() {
        return Err(Error::InvalidCompensators(
            "duplicate compensator index".into(),
        ));
    }
    if let Some(&bad) = set.iter().find(|&&v| v >= n) {
        return Err(Error::IndexOutOfRange { index: bad, n });
    }
    if !set.contains(&0) {
        return Err(Error::InvalidCompensators(
            "the PCC (node 0) must be a compensator".into(),
        ));
    }
    let comp: Vec<usize> = set.into_iter().collect();
    let rest: Vec<usize> = (0..n).filter(|v| comp.binary_search(v).is_err()).collect();
    if q_fixed.len() != rest.len() {
        return Err(Error::Dimension(format!(
            "{} uncontrolled nodes but {} fixed reactive powers",
            rest.len(),
            q_fixed.len()
        )));
    }
    let xr = &green.x_real;
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| xr[(rows[a], cols[b])])
    };
    Ok(QuadraticModel {
        m_block: pick(&comp, &comp),
        n_block: pick(&comp, &rest),
        q_block: pick(&rest, &rest),
        compensators: comp,
        uncontrolled: rest,
        q_fixed: q_fixed.clone(),
    })
}

/// Solution of the centralized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub q: DVector<f64>,
    pub cost: f64,
}

impl QuadraticModel {
    /// Builds the model with `q_fixed` taken from the scenario's reactive powers.
    pub fn from_scenario(
        green: &GreenMatrix,
        compensators: &[usize],
        scenario: &ScenarioSpec,
    ) -> Result<Self> {
        let n = green.n();
        let set: BTreeSet<usize> = compensators.iter().copied().collect();
        let q_fixed = DVector::from_iterator(
            n - set.iter().filter(|&&v| v < n).count(),
            (0..n)
                .filter(|v| !set.contains(v))
                .map(|v| scenario.s.get(v).map_or(0.0, |s| s.im)),
        );
        quadratic_model(green, compensators, &q_fixed)
    }

    pub fn m(&self) -> usize {
        self.compensators.len()
    }

    /// Node indices of the compensators, PCC first.
    pub fn compensators(&self) -> &[usize] {
        &self.compensators
    }

    pub fn uncontrolled(&self) -> &[usize] {
        &self.uncontrolled
    }

    /// The Hessian block `M`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.m_block
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.n_block
    }

    pub fn q_fixed(&self) -> &DVector<f64> {
        &self.q_fixed
    }

    /// `J(q) = ½ qᵀ Re(X) q` over all nodes.
    pub fn cost(&self, q_c: &DVector<f64>) -> f64 {
        let qf = &self.q_fixed;
        0.5 * q_c.dot(&(&self.m_block * q_c))
            + q_c.dot(&(&self.n_block * qf))
            + 0.5 * qf.dot(&(&self.q_block * qf))
    }

    /// `∇J = M q_C + N q_fixed`.
    pub fn gradient(&self, q_c: &DVector<f64>) -> DVector<f64> {
        &self.m_block * q_c + &self.n_block * &self.q_fixed
    }

    /// `1ᵀ q` over all nodes; zero for feasible states.
    pub fn imbalance(&self, q_c: &DVector<f64>) -> f64 {
        q_c.sum() + self.q_fixed.sum()
    }

    /// Sets the PCC entry so that the full reactive-power vector sums to zero.
    pub fn with_pcc_slack(&self, mut q_c: DVector<f64>) -> DVector<f64> {
        let others: f64 = q_c.iter().skip(1).sum();
        q_c[0] = -(others + self.q_fixed.sum());
        q_c
    }

    /// Default starting point: every compensator idle, the PCC absorbs the whole demand.
    pub fn initial_state(&self) -> DVector<f64> {
        self.with_pcc_slack(DVector::zeros(self.m()))
    }

    /// Full n-vector of reactive powers.
    pub fn full_q(&self, q_c: &DVector<f64>) -> DVector<f64> {
        let n = self.compensators.len() + self.uncontrolled.len();
        let mut q = DVector::zeros(n);
        for (a, &v) in self.compensators.iter().enumerate() {
            q[v] = q_c[a];
        }
        for (b, &v) in self.uncontrolled.iter().enumerate() {
            q[v] = self.q_fixed[b];
        }
        q
    }

    /// Minimizes `J` subject to `1ᵀ q = 0` through the KKT system.
    pub fn centralized_optimum(&self) -> Result<Optimum> {
        let m = self.m();
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        kkt.view_mut((0, 0), (m, m)).copy_from(&self.m_block);
        for a in 0..m {
            kkt[(a, m)] = 1.0;
            kkt[(m, a)] = 1.0;
        }
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m)
            .copy_from(&(-(&self.n_block * &self.q_fixed)));
        rhs[m] = -self.q_fixed.sum();
        let sol = kkt
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Internal("singular KKT system".into()))?;
        let scale = rhs.norm().max(1.0) * kkt.norm().max(1.0) * sol.norm().max(1.0);
        if (&kkt * &sol - &rhs).norm() > 1e-10 * scale {
            return Err(Error::Internal("KKT residual too large".into()));
        }
        let q = sol.rows(0, m).into_owned();
        let cost = self.cost(&q);
        Ok(Optimum { q, cost })
    }
}

/// `R_eff` over the compensators: `Re` of the pairwise effective impedances.
pub fn reff_matrix(green: &GreenMatrix, compensators: &[usize]) -> Result<DMatrix<f64>> {
    let m = compensators.len();
    let mut r = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            r[(a, b)] = green
                .effective_impedance(compensators[a], compensators[b])?
                .re;
        }
    }
    Ok(symmetrize(&r))
}

/// `Ω_r = diag(1_{C_r}) - 1_{C_r} 1_{C_r}ᵀ / |C_r|`.
pub fn cluster_projector(members: &[usize], m: usize) -> Result<DMatrix<f64>> {
    if members.is_empty() {
        return Err(Error::InvalidClusters("empty cluster".into()));
    }
    if let Some(&bad) = members.iter().find(|&&h| h >= m) {
        return Err(Error::IndexOutOfRange { index: bad, n: m });
    }
    let size = members.len() as f64;
    let mut omega = DMatrix::zeros(m, m);
    for &h in members {
        omega[(h, h)] += 1.0;
        for &k in members {
            omega[(h, k)] -= 1.0 / size;
        }
    }
    Ok(omega)
}

/// `Ω_r M Ω_r = -½ Ω_r R_eff Ω_r` and its pseudoinverse, from the effective resistances only.
pub fn hessian_from_reff(
    reff: &DMatrix<f64>,
    members: &[usize],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = reff.nrows();
    if reff.ncols() != m {
        return Err(Error::Dimension("R_eff must be square".into()));
    }
    let omega = cluster_projector(members, m)?;
    let scale = reff.amax().max(f64::MIN_POSITIVE);
    for &h in members {
        if reff[(h, h)] < 0.0 {
            return Err(Error::InconsistentReff(format!(
                "negative diagonal entry at {h}"
            )));
        }
        for &k in members {
            if (reff[(h, k)] - reff[(k, h)]).abs() > 1e-9 * scale {
                return Err(Error::InconsistentReff(format!(
                    "asymmetric entries at ({h}, {k})"
                )));
            }
        }
    }
    let hess = symmetrize(&(&omega * reff * &omega * -0.5));
    let pinv = pinv_symmetric(&hess);
    Ok((hess, pinv))
}

/// `[K_r]_k = (1/|C_r|) Σ_{v∈C_r} |u_v||u_k| sin(∠u_v - ∠u_k + θ)` for `k ∈ C_r`, zero elsewhere,
/// i.e. `-Im(e^{-jθ} ū_{C_r}ᵀ1 u_k) / |C_r|`. With this sign `cos θ K_r` tracks the gradient up to a
/// constant on `C_r`.
pub fn measurement_functional(
    u_c: &DVector<Complex64>,
    members: &[usize],
    theta: f64,
) -> DVector<f64> {
    let mut k_r = DVector::zeros(u_c.len());
    let size = members.len() as f64;
    for &k in members {
        let (mk, ak) = (u_c[k].norm(), u_c[k].arg());
        let acc: f64 = members
            .iter()
            .map(|&v| u_c[v].norm() * mk * (u_c[v].arg() - ak + theta).sin())
            .sum();
        k_r[k] = acc / size;
    }
    k_r
}

/// Offline data held by one cluster supervisor.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervisor {
    pub members: Vec<usize>,
    pub omega: DMatrix<f64>,
    /// `(Ω_r M Ω_r)^♯`, from the model Hessian.
    pub hessian_pinv: DMatrix<f64>,
    /// `(Ω_r R_eff Ω_r)^♯`, from the effective resistances.
    pub reff_pinv: DMatrix<f64>,
}

impl Supervisor {
    pub fn prepare(model: &QuadraticModel, reff: &DMatrix<f64>, members: &[usize]) -> Result<Self> {
        let omega = cluster_projector(members, model.m())?;
        let hessian = symmetrize(&(&omega * model.hessian() * &omega));
        let hessian_pinv = pinv_symmetric(&hessian);
        let reff_restricted = symmetrize(&(&omega * reff * &omega));
        let reff_pinv = pinv_symmetric(&reff_restricted);
        Ok(Supervisor {
            members: members.to_vec(),
            omega,
            hessian_pinv,
            reff_pinv,
        })
    }

    /// Removes any component of `delta` outside `Im Ω_r` introduced by rounding.
    fn project(&self, delta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(delta.len());
        let mean = self.members.iter().map(|&h| delta[h]).sum::<f64>() / self.members.len() as f64;
        for &h in &self.members {
            out[h] = delta[h] - mean;
        }
        out
    }

    /// `q' = q - (Ω_r M Ω_r)^♯ ∇J`.
    pub fn update_exact(&self, q_c: &DVector<f64>, model: &QuadraticModel) -> DVector<f64> {
        let step = -(&self.hessian_pinv * model.gradient(q_c));
        q_c + self.project(&step)
    }

    /// `q_h' = q_h + 2 cos θ Σ_k [(Ω_r R_eff Ω_r)^♯]_{hk} [K_r]_k` from voltage measurements.
    pub fn update_measured(
        &self,
        q_c: &DVector<f64>,
        u_c: &DVector<Complex64>,
        theta: f64,
    ) -> DVector<f64> {
        let k_r = measurement_functional(u_c, &self.members, theta);
        let step = &self.reff_pinv * k_r * (2.0 * theta.cos());
        q_c + self.project(&step)
    }
}

/// Compensator clusters with their selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    clusters: Vec<Vec<usize>>,
    rho: Vec<f64>,
    m: usize,
}

impl ClusterSet {
    /// `clusters` hold compensator positions. `rho = None` selects uniformly.
    pub fn new(clusters: Vec<Vec<usize>>, rho: Option<Vec<f64>>, m: usize) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidClusters("no clusters".into()));
        }
        let mut covered = vec![false; m];
        let mut normalized = Vec::with_capacity(clusters.len());
        for (r, cluster) in clusters.into_iter().enumerate() {
            if cluster.is_empty() {
                return Err(Error::InvalidClusters(format!("cluster {r} is empty")));
            }
            let set: BTreeSet<usize> = cluster.iter().copied().collect();
            if set.len() != cluster.len() {
                return Err(Error::InvalidClusters(format!(
                    "cluster {r} lists a compensator twice"
                )));
            }
            for &h in &set {
                if h >= m {
                    return Err(Error::IndexOutOfRange { index: h, n: m });
                }
                covered[h] = true;
            }
            normalized.push(set.into_iter().collect());
        }
        if let Some(h) = covered.iter().position(|c| !c) {
            return Err(Error::InvalidClusters(format!(
                "compensator position {h} belongs to no cluster"
            )));
        }
        let l = normalized.len();
        let rho = rho.unwrap_or_else(|| vec![1.0 / l as f64; l]);
        validate_probabilities(&rho, l)?;
        Ok(ClusterSet {
            clusters: normalized,
            rho,
            m,
        })
    }

    /// Pairs `{PCC, v}` for every other compensator.
    pub fn star(m: usize) -> Result<Self> {
        ClusterSet::new((1..m).map(|v| vec![0, v]).collect(), None, m)
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    /// Offline procedure: one supervisor per cluster.
    pub fn supervisors(
        &self,
        model: &QuadraticModel,
        reff: &DMatrix<f64>,
    ) -> Result<Vec<Supervisor>> {
        if model.m() != self.m {
            return Err(Error::Dimension(format!(
                "model has {} compensators, clusters {}",
                model.m(),
                self.m
            )));
        }
        self.clusters
            .iter()
            .map(|c| Supervisor::prepare(model, reff, c))
            .collect()
    }
}

/// Every probability positive and the total equal to one within 1e-12.
pub fn validate_probabilities(rho: &[f64], expected: usize) -> Result<()> {
    if rho.len() != expected {
        return Err(Error::InvalidConfig(format!(
            "{} probabilities for {expected} clusters",
            rho.len()
        )));
    }
    if let Some(p) = rho.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "selection probability {p} is not positive"
        )));
    }
    let total: f64 = rho.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "selection probabilities sum to {total}"
        )));
    }
    Ok(())
}
