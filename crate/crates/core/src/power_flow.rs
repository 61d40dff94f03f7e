//! Exact nonlinear steady state (Z-bus fixed point), its first-order approximation and line losses.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GreenMatrix, GridGraph};

/// Nominal operating point: PCC voltage plus the exponential load model of every other node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    /// Nominal voltage `U_N` in volts.
    pub u_nominal: f64,
    /// PCC phase in radians.
    pub phase: f64,
    /// Nominal complex power per node (VA). Entry 0 (the PCC) is ignored.
    pub s: Vec<Complex64>,
    /// Load-model exponent per node. Entry 0 is ignored.
    pub eta: Vec<f64>,
}

impl ScenarioSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.s.len() != n || self.eta.len() != n {
            return Err(Error::InvalidScenario(format!(
                "expected {n} entries, got {} powers and {} exponents",
                self.s.len(),
                self.eta.len()
            )));
        }
        if !(self.u_nominal > 0.0 && self.u_nominal.is_finite()) {
            return Err(Error::InvalidScenario(format!(
                "nominal voltage {} must be positive",
                self.u_nominal
            )));
        }
        if !self.phase.is_finite() {
            return Err(Error::InvalidScenario("PCC phase must be finite".into()));
        }
        for v in 1..n {
            if !(0.0..=2.0).contains(&self.eta[v]) {
                return Err(Error::InvalidScenario(format!(
                    "eta[{v}] = {} outside [0, 2]",
                    self.eta[v]
                )));
            }
            if !(self.s[v].re.is_finite() && self.s[v].im.is_finite()) {
                return Err(Error::InvalidScenario(format!("s[{v}] is not finite")));
            }
        }
        Ok(())
    }

    /// Same scenario at `factor · U_N` with unchanged powers.
    pub fn scaled_voltage(&self, factor: f64) -> ScenarioSpec {
        ScenarioSpec {
            u_nominal: self.u_nominal * factor,
            ..self.clone()
        }
    }

    /// `s` with the PCC entry replaced by `s₀ = -Σ_{v≠0} s_v`.
    pub fn balanced_powers(&self) -> Vec<Complex64> {
        let mut s = self.s.clone();
        s[0] = -self.s.iter().skip(1).sum::<Complex64>();
        s
    }

    fn pcc_voltage(&self) -> Complex64 {
        Complex64::from_polar(self.u_nominal, self.phase)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub u: DVector<Complex64>,
    pub i: DVector<Complex64>,
    pub xi: DVector<Complex64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative change of successive iterates (w.r.t. `U_N`) below which the solver stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Edge currents `ξ = -Z⁻¹ A u`.
pub fn edge_currents(grid: &GridGraph, u: &DVector<Complex64>) -> DVector<Complex64> {
    DVector::from_iterator(
        grid.edge_count(),
        grid.edges().iter().map(|e| -(u[e.to] - u[e.from]) / e.z),
    )
}

fn injected_currents(
    scenario: &ScenarioSpec,
    u: &DVector<Complex64>,
) -> Result<DVector<Complex64>> {
    let n = u.len();
    let mut i = DVector::from_element(n, Complex64::new(0.0, 0.0));
    for v in 1..n {
        let s = scenario.s[v];
        if s == Complex64::new(0.0, 0.0) {
            continue;
        }
        let mag = u[v].norm();
        if mag == 0.0 {
            if scenario.eta[v] < 1.0 {
                return Err(Error::ZeroVoltage(v));
            }
            continue;
        }
        let power = s * (mag / scenario.u_nominal).powf(scenario.eta[v]);
        i[v] = (power / u[v]).conj();
    }
    i[0] = -i.rows(1, n - 1).sum();
    Ok(i)
}

/// Picard iteration `u ← X i(u) + U_N e^{jφ} 1` from a flat start.
pub fn solve_exact(
    grid: &GridGraph,
    green: &GreenMatrix,
    scenario: &ScenarioSpec,
    opts: SolveOptions,
) -> Result<SteadyState> {
    let n = grid.n();
    scenario.validate(n)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tolerance {} must be positive",
            opts.tol
        )));
    }
    let source = scenario.pcc_voltage();
    let flat = DVector::from_element(n, source);
    let mut u = flat.clone();
    let mut change = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let i = injected_currents(scenario, &u)?;
        let next = &green.x * &i + &flat;
        change = (&next - &u).iter().map(|d| d.norm()).fold(0.0, f64::max) / scenario.u_nominal;
        if !change.is_finite() {
            break;
        }
        u = next;
        if change < opts.tol {
            let i = injected_currents(scenario, &u)?;
            let xi = edge_currents(grid, &u);
            return Ok(SteadyState {
                u,
                i,
                xi,
                converged: true,
                iterations: it,
                residual: change,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: change,
    })
}

/// First-order state: `i = e^{jφ} s̄ / U_N` (with `s₀` balancing), `u = X i + U_N e^{jφ} 1`.
pub fn approx_state(
    grid: &GridGraph,
    green: &GreenMatrix,
    scenario: &ScenarioSpec,
) -> Result<SteadyState> {
    let n = grid.n();
    scenario.validate(n)?;
    let rot = Complex64::from_polar(1.0, scenario.phase);
    let s = scenario.balanced_powers();
    let i = DVector::from_iterator(n, s.iter().map(|sv| rot * sv.conj() / scenario.u_nominal));
    let u = &green.x * &i + DVector::from_element(n, scenario.pcc_voltage());
    let xi = edge_currents(grid, &u);
    Ok(SteadyState {
        u,
        i,
        xi,
        converged: true,
        iterations: 0,
        residual: 0.0,
    })
}

/// `Σ_e |ξ_e|² Re(z_e)` in watts.
pub fn total_losses(state: &SteadyState, grid: &GridGraph) -> f64 {
    grid.edges()
        .iter()
        .zip(state.xi.iter())
        .map(|(e, xi)| xi.norm_sqr() * e.z.re)
        .sum()
}

/// `Re(īᵀ Re(X) i)`, the node-current form of the line losses.
pub fn quadratic_form_losses(green: &GreenMatrix, i: &DVector<Complex64>) -> f64 {
    let xr = green.x_real.map(|r| Complex64::new(r, 0.0));
    (i.map(|c| c.conj()).transpose() * xr * i)[(0, 0)].re
}

/// Active power injected by all nodes, `Σ_v Re(u_v ī_v)`.
pub fn injected_active_power(state: &SteadyState) -> f64 {
    state
        .u
        .iter()
        .zip(state.i.iter())
        .map(|(u, i)| (u * i.conj()).re)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub factor: f64,
    pub u_nominal: f64,
    /// `max_v ||u_exact| - |u_approx|| / |u_exact|`.
    pub max_rel_voltage_error: f64,
    /// `‖u_exact - u_approx‖₂` in volts.
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproximationReport {
    pub rows: Vec<ScaleRow>,
    /// Fitted `p` in `residual ∝ k^{-p}`; `None` if fewer than two factors or a zero residual.
    pub decay_exponent: Option<f64>,
}

/// Compares the exact and first-order states while scaling `U_N` by each factor.
pub fn approximation_error(
    grid: &GridGraph,
    green: &GreenMatrix,
    scenario: &ScenarioSpec,
    scale_factors: &[f64],
    opts: SolveOptions,
) -> Result<ApproximationReport> {
    let mut rows = Vec::with_capacity(scale_factors.len());
    for &factor in scale_factors {
        if !(factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scale factor {factor} must be positive"
            )));
        }
        let scaled = scenario.scaled_voltage(factor);
        let exact = solve_exact(grid, green, &scaled, opts)?;
        let approx = approx_state(grid, green, &scaled)?;
        let max_rel_voltage_error = exact
            .u
            .iter()
            .zip(approx.u.iter())
            .map(|(a, b)| (a.norm() - b.norm()).abs() / a.norm())
            .fold(0.0, f64::max);
        let residual_norm = (&exact.u - &approx.u).norm();
        rows.push(ScaleRow {
            factor,
            u_nominal: scaled.u_nominal,
            max_rel_voltage_error,
            residual_norm,
            iterations: exact.iterations,
        });
    }
    let decay_exponent = decay_exponent(&rows);
    Ok(ApproximationReport {
        rows,
        decay_exponent,
    })
}

fn decay_exponent(rows: &[ScaleRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| r.residual_norm <= 0.0) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.factor.ln(), r.residual_norm.ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(-sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::green_matrix;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn path3() -> (GridGraph, GreenMatrix) {
        let g = GridGraph::build(
            &["0", "1", "2"],
            "0",
            &[("0", "1", c(0.1, 0.05)), ("1", "2", c(0.2, 0.1))],
        )
        .unwrap();
        let x = green_matrix(&g).unwrap();
        (g, x)
    }

    fn scenario(s1: Complex64, u: f64) -> ScenarioSpec {
        ScenarioSpec {
            u_nominal: u,
            phase: 0.0,
            s: vec![c(0.0, 0.0), s1, c(0.0, 0.0)],
            eta: vec![0.0; 3],
        }
    }

    #[test]
    fn zero_injection_is_flat() {
        let (g, x) = path3();
        let sc = ScenarioSpec {
            phase: 0.3,
            ..scenario(c(0.0, 0.0), 230.0)
        };
        let st = solve_exact(&g, &x, &sc, SolveOptions::default()).unwrap();
        assert_eq!(st.iterations, 1);
        let flat = Complex64::from_polar(230.0, 0.3);
        assert!(st.u.iter().all(|u| (u - flat).norm() < 1e-12));
        assert!(st.i.iter().all(|i| i.norm() == 0.0));
        assert!(st.xi.iter().all(|i| i.norm() < 1e-10));
        let ap = approx_state(&g, &x, &sc).unwrap();
        assert!((&ap.u - &st.u).norm() < 1e-12);
        assert_eq!(total_losses(&st, &g), 0.0);
    }

    #[test]
    fn loaded_path_drops_voltage() {
        let (g, x) = path3();
        let st = solve_exact(
            &g,
            &x,
            &scenario(c(-1000.0, -500.0), 230.0),
            SolveOptions::default(),
        )
        .unwrap();
        assert!(st.converged);
        assert!(st.u[1].norm() < 230.0);
        assert!(st.u[2].norm() <= st.u[1].norm() + 1e-12);
    }

    #[test]
    fn heavy_load_does_not_converge() {
        let (g, x) = path3();
        let err = solve_exact(
            &g,
            &x,
            &scenario(c(-1e9, 0.0), 230.0),
            SolveOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::NonConvergence { .. } | Error::ZeroVoltage(_)),
            "{err:?}"
        );
        assert!(err.is_numerical());
    }

    #[test]
    fn approx_state_hand_values() {
        let (g, x) = path3();
        let st = approx_state(&g, &x, &scenario(c(-1000.0, -500.0), 230.0)).unwrap();
        assert!((st.i[1] - c(-4.347826086956522, 2.1739130434782608)).norm() < 1e-12);
        assert!((st.u[1] - c(230.0 - 125.0 / 230.0, 0.0)).norm() < 1e-12);
        assert!((st.u[1].re - 229.4565).abs() < 1e-4);
        assert_eq!(st.i.iter().sum::<Complex64>(), c(0.0, 0.0));
        let losses = total_losses(&st, &g);
        assert!((losses - 2.363).abs() < 1e-3, "{losses}");
        assert!((losses - (1250000.0 / 230.0_f64.powi(2)) * 0.1).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let (g, x) = path3();
        let mut sc = scenario(c(-1.0, 0.0), 230.0);
        sc.eta[1] = 2.5;
        assert!(matches!(
            approx_state(&g, &x, &sc),
            Err(Error::InvalidScenario(_))
        ));
        let sc = scenario(c(-1.0, 0.0), -1.0);
        assert!(matches!(
            solve_exact(&g, &x, &sc, SolveOptions::default()),
            Err(Error::InvalidScenario(_))
        ));
        let sc = scenario(c(-1.0, 0.0), 230.0);
        let opts = SolveOptions {
            tol: 0.0,
            max_iter: 10,
        };
        assert!(matches!(
            solve_exact(&g, &x, &sc, opts),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_load_has_zero_error_at_every_scale() {
        let (g, x) = path3();
        let rep = approximation_error(
            &g,
            &x,
            &scenario(c(0.0, 0.0), 230.0),
            &[1.0, 2.0, 4.0],
            SolveOptions::default(),
        )
        .unwrap();
        assert!(rep
            .rows
            .iter()
            .all(|r| r.max_rel_voltage_error == 0.0 && r.residual_norm < 1e-12));
    }

    #[test]
    fn remainder_decays_at_least_quadratically() {
        let (g, x) = path3();
        let rep = approximation_error(
            &g,
            &x,
            &scenario(c(-1000.0, -500.0), 230.0),
            &[1.0, 2.0, 4.0],
            SolveOptions {
                tol: 1e-14,
                max_iter: 500,
            },
        )
        .unwrap();
        for w in rep.rows.windows(2) {
            let ratio = w[0].residual_norm / w[1].residual_norm;
            assert!(ratio >= 2.0, "ratio {ratio}");
        }
        assert!(rep.decay_exponent.unwrap() > 1.7);
    }

    /// Expanding `i = conj(s / u)` once more gives `u - ũ ≈ -X (s̄ ∘ conj(X s̄)) / U³` for
    /// constant-power loads at zero phase.
    #[test]
    fn remainder_matches_third_order_term() {
        let (g, x) = path3();
        for u_n in [230.0, 920.0] {
            let sc = scenario(c(-1000.0, -500.0), u_n);
            let exact = solve_exact(
                &g,
                &x,
                &sc,
                SolveOptions {
                    tol: 1e-15,
                    max_iter: 500,
                },
            )
            .unwrap();
            let approx = approx_state(&g, &x, &sc).unwrap();
            let s_bar = DVector::from_vec(sc.balanced_powers()).map(|v| v.conj());
            let xs = &x.x * &s_bar;
            let inner = s_bar.zip_map(&xs, |a, b| a * b.conj());
            let predicted = -(&x.x * inner) / Complex64::from(u_n.powi(3));
            let residual = &exact.u - &approx.u;
            let gap = (&residual - &predicted).norm() / residual.norm();
            assert!(gap < 0.05 * 230.0 / u_n, "U = {u_n}: gap {gap}");
        }
    }
}
