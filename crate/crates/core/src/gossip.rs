//! Randomized online procedure: at each iteration one cluster is drawn and its supervisor
//! re-dispatches the reactive power of its members.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{green_matrix, GreenMatrix, GridGraph};
use crate::model::{reff_matrix, validate_probabilities, ClusterSet, QuadraticModel, Supervisor};
use crate::power_flow::{solve_exact, total_losses, ScenarioSpec, SolveOptions, SteadyState};

/// Environment variable capping the number of worker threads used by ensembles.
pub const THREADS_ENV: &str = "ORPF_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Updates driven by voltage measurements from the nonlinear power flow.
    Measured,
    /// Updates driven by the gradient of the quadratic model.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub seed: u64,
    pub record_losses_exact: bool,
    /// Standard deviation (V) of additive complex Gaussian noise on measured phasors.
    pub measurement_noise: f64,
    pub solve: SolveOptions,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            mode: Mode::Model,
            iterations: 200,
            seed: 0,
            record_losses_exact: false,
            measurement_noise: 0.0,
            solve: SolveOptions::default(),
        }
    }
}

/// Grid, load scenario and quadratic model bundled for simulation.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: GridGraph,
    pub green: GreenMatrix,
    pub scenario: ScenarioSpec,
    pub model: QuadraticModel,
    /// `Re` of the effective impedances between compensators.
    pub reff: DMatrix<f64>,
}

impl Problem {
    pub fn new(grid: GridGraph, scenario: ScenarioSpec, compensators: &[usize]) -> Result<Self> {
        scenario.validate(grid.n())?;
        let green = green_matrix(&grid)?;
        let model = QuadraticModel::from_scenario(&green, compensators, &scenario)?;
        let reff = reff_matrix(&green, model.compensators())?;
        Ok(Problem {
            grid,
            green,
            scenario,
            model,
            reff,
        })
    }

    pub fn theta(&self) -> f64 {
        self.green.theta
    }

    /// Scenario with the compensators' reactive injections set to `q_c`.
    pub fn scenario_at(&self, q_c: &DVector<f64>) -> ScenarioSpec {
        let mut sc = self.scenario.clone();
        for (a, &v) in self.model.compensators().iter().enumerate().skip(1) {
            sc.s[v].im = q_c[a];
        }
        sc
    }

    pub fn exact_state(&self, q_c: &DVector<f64>, opts: SolveOptions) -> Result<SteadyState> {
        solve_exact(&self.grid, &self.green, &self.scenario_at(q_c), opts)
    }

    /// Exact distribution losses (W) with the compensators at `q_c`.
    pub fn exact_losses(&self, q_c: &DVector<f64>, opts: SolveOptions) -> Result<f64> {
        Ok(total_losses(&self.exact_state(q_c, opts)?, &self.grid))
    }

    /// Compensator voltages extracted from a full state.
    pub fn compensator_voltages(&self, state: &SteadyState) -> DVector<Complex64> {
        DVector::from_iterator(
            self.model.m(),
            self.model.compensators().iter().map(|&v| state.u[v]),
        )
    }
}

/// I.i.d. cluster draws with the configured probabilities.
#[derive(Debug, Clone)]
pub struct ClusterSampler {
    index: Option<WeightedIndex<f64>>,
}

impl ClusterSampler {
    pub fn new(rho: &[f64]) -> Result<Self> {
        validate_probabilities(rho, rho.len())?;
        if rho.len() == 1 {
            return Ok(ClusterSampler { index: None });
        }
        let index = WeightedIndex::new(rho).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(ClusterSampler { index: Some(index) })
    }

    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.as_ref().map_or(0, |d| d.sample(rng))
    }
}

/// Convenience wrapper around [`ClusterSampler`].
pub fn select_cluster<R: Rng + ?Sized>(rng: &mut R, rho: &[f64]) -> Result<usize> {
    Ok(ClusterSampler::new(rho)?.select(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    /// Cluster activated to reach this state; `None` for the initial state.
    pub cluster: Option<usize>,
    pub q: DVector<f64>,
    /// Quadratic cost `½ qᵀ Re(X) q`.
    pub cost: f64,
    pub losses_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Set when the run stopped early; the records up to that point are kept.
    pub aborted: Option<Error>,
}

impl Trace {
    pub fn last(&self) -> &TraceRecord {
        self.records
            .last()
            .expect("a trace always holds the initial state")
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }
}

/// Online procedure over a fixed problem and cluster set.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    problem: &'a Problem,
    clusters: &'a ClusterSet,
    supervisors: Vec<Supervisor>,
    sampler: ClusterSampler,
}

impl<'a> Simulator<'a> {
    pub fn new(problem: &'a Problem, clusters: &'a ClusterSet) -> Result<Self> {
        let supervisors = clusters.supervisors(&problem.model, &problem.reff)?;
        let sampler = ClusterSampler::new(clusters.rho())?;
        Ok(Simulator {
            problem,
            clusters,
            supervisors,
            sampler,
        })
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn clusters(&self) -> &ClusterSet {
        self.clusters
    }

    pub fn supervisors(&self) -> &[Supervisor] {
        &self.supervisors
    }

    /// Applies one update of cluster `r`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        q_c: &DVector<f64>,
        r: usize,
        config: &SimulationConfig,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let sup = &self.supervisors[r];
        match config.mode {
            Mode::Model => Ok(sup.update_exact(q_c, &self.problem.model)),
            Mode::Measured => {
                let state = self.problem.exact_state(q_c, config.solve)?;
                let u_c = self.measure(&state, config, rng)?;
                Ok(sup.update_measured(q_c, &u_c, self.problem.theta()))
            }
        }
    }

    fn measure<R: Rng + ?Sized>(
        &self,
        state: &SteadyState,
        config: &SimulationConfig,
        rng: &mut R,
    ) -> Result<DVector<Complex64>> {
        let mut u_c = self.problem.compensator_voltages(state);
        if config.measurement_noise > 0.0 {
            let noise = Normal::new(0.0, config.measurement_noise)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            for u in u_c.iter_mut() {
                *u += Complex64::new(noise.sample(rng), noise.sample(rng));
            }
        }
        Ok(u_c)
    }

    fn record(
        &self,
        t: usize,
        cluster: Option<usize>,
        q: DVector<f64>,
        config: &SimulationConfig,
    ) -> Result<TraceRecord> {
        let losses_exact = if config.record_losses_exact {
            Some(self.problem.exact_losses(&q, config.solve)?)
        } else {
            None
        };
        Ok(TraceRecord {
            t,
            cost: self.problem.model.cost(&q),
            cluster,
            q,
            losses_exact,
        })
    }

    /// Runs `config.iterations` i.i.d. cluster activations from the PCC-slack initial state.
    pub fn run(&self, config: &SimulationConfig) -> Result<Trace> {
        self.run_from(self.problem.model.initial_state(), config)
    }

    /// As [`Simulator::run`] from a given feasible state. Configuration errors are returned
    /// directly; numerical failures during the run abort it with the partial trace.
    pub fn run_from(&self, q0: DVector<f64>, config: &SimulationConfig) -> Result<Trace> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sampler = &self.sampler;
        let mut draws =
            std::iter::repeat_with(move || sampler.select(&mut rng)).take(config.iterations);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(1);
        self.run_sequence(q0, &mut draws, config, &mut noise_rng)
    }

    /// Runs a prescribed activation sequence, e.g. one produced by [`poisson_schedule`].
    pub fn run_sequence<R: Rng + ?Sized>(
        &self,
        q0: DVector<f64>,
        selections: &mut dyn Iterator<Item = usize>,
        config: &SimulationConfig,
        rng: &mut R,
    ) -> Result<Trace> {
        let m = self.problem.model.m();
        if q0.len() != m {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, expected {m}",
                q0.len()
            )));
        }
        if !(config.measurement_noise >= 0.0) {
            return Err(Error::InvalidConfig(
                "measurement noise must be non-negative".into(),
            ));
        }
        let mut records = Vec::with_capacity(config.iterations + 1);
        let mut q = q0;
        match self.record(0, None, q.clone(), config) {
            Ok(rec) => records.push(rec),
            Err(e) => {
                return Ok(Trace {
                    records: vec![self.bare_record(0, None, q)],
                    aborted: Some(e),
                })
            }
        }
        for (t, r) in (1..).zip(selections) {
            if r >= self.supervisors.len() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    n: self.supervisors.len(),
                });
            }
            let outcome = self
                .step(&q, r, config, rng)
                .and_then(|next| self.record(t, Some(r), next, config));
            match outcome {
                Ok(rec) => {
                    q = rec.q.clone();
                    records.push(rec);
                }
                Err(e) => {
                    return Ok(Trace {
                        records,
                        aborted: Some(e),
                    })
                }
            }
        }
        Ok(Trace {
            records,
            aborted: None,
        })
    }

    fn bare_record(&self, t: usize, cluster: Option<usize>, q: DVector<f64>) -> TraceRecord {
        TraceRecord {
            t,
            cost: self.problem.model.cost(&q),
            cluster,
            q,
            losses_exact: None,
        }
    }

    /// Mean over `runs` independent model-mode runs of `J(q(t)) - j_opt`, for `t = 0..=iterations`.
    /// Run `k` draws from stream `k` of the generator seeded with `master_seed`, so the result
    /// does not depend on the number of threads.
    pub fn ensemble_mean_excess(
        &self,
        iterations: usize,
        runs: usize,
        master_seed: u64,
        j_opt: f64,
    ) -> Result<Vec<f64>> {
        if runs == 0 {
            return Err(Error::InvalidConfig(
                "ensemble needs at least one run".into(),
            ));
        }
        let model = &self.problem.model;
        let single = |k: usize| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(k as u64);
            let mut q = model.initial_state();
            let mut out = Vec::with_capacity(iterations + 1);
            out.push(model.cost(&q) - j_opt);
            for _ in 0..iterations {
                let r = self.sampler.select(&mut rng);
                q = self.supervisors[r].update_exact(&q, model);
                out.push(model.cost(&q) - j_opt);
            }
            out
        };
        let per_run: Vec<Vec<f64>> =
            with_thread_pool(|| (0..runs).into_par_iter().map(single).collect())?;
        let mut mean = vec![0.0; iterations + 1];
        for run in &per_run {
            for (acc, v) in mean.iter_mut().zip(run) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= runs as f64;
        }
        Ok(mean)
    }
}

/// Runs `f` on a rayon pool sized by [`THREADS_ENV`] when set, otherwise the global pool.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(threads) if threads > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Internal(e.to_string()))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

/// Merges independent Poisson clocks (one per cluster, with the given rates) into a
/// time-ordered list of `(time, cluster)` activations up to `horizon` seconds.
pub fn poisson_schedule<R: Rng + ?Sized>(
    rates: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<(f64, usize)>> {
    if let Some(rate) = rates.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "rate {rate} must be positive"
        )));
    }
    if !(horizon >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "horizon {horizon} must be non-negative"
        )));
    }
    let mut events = Vec::new();
    for (r, &rate) in rates.iter().enumerate() {
        let wait = Exp::new(rate).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut t = wait.sample(rng);
        while t < horizon {
            events.push((t, r));
            t += wait.sample(rng);
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    pub(crate) fn path3_problem(u_nominal: f64) -> Problem {
        let grid = GridGraph::build(
            &["0", "1", "2"],
            "0",
            &[("0", "1", c(0.1, 0.05)), ("1", "2", c(0.2, 0.1))],
        )
        .unwrap();
        let scenario = ScenarioSpec {
            u_nominal,
            phase: 0.0,
            s: vec![c(0.0, 0.0), c(-1000.0, -500.0), c(0.0, 0.0)],
            eta: vec![0.0; 3],
        };
        Problem::new(grid, scenario, &[0, 2]).unwrap()
    }

    #[test]
    fn single_cluster_always_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(select_cluster(&mut rng, &[1.0]).unwrap(), 0);
        }
    }

    #[test]
    fn zero_probability_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            select_cluster(&mut rng, &[0.7, 0.3, 0.0]),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            ClusterSampler::new(&[0.5, 0.4]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let sampler = ClusterSampler::new(&[1.0 / 12.0; 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 120_000;
        let mut counts = [0usize; 12];
        for _ in 0..draws {
            counts[sampler.select(&mut rng)] += 1;
        }
        let p = 1.0 / 12.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &k in &counts {
            assert!(
                (k as f64 - draws as f64 * p).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn one_step_reaches_optimum() {
        let problem = path3_problem(230.0);
        let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let trace = sim
            .run(&SimulationConfig {
                iterations: 1,
                ..Default::default()
            })
            .unwrap();
        let opt = problem.model.centralized_optimum().unwrap();
        assert_eq!(trace.records.len(), 2);
        assert_eq!(trace.records[0].q, DVector::from_vec(vec![500.0, 0.0]));
        assert!((&trace.last().q - &opt.q).norm() < 1e-9);
        assert!((trace.last().cost - opt.cost).abs() < 1e-6);
    }

    #[test]
    fn zero_iterations_keeps_initial_state() {
        let problem = path3_problem(230.0);
        let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let trace = sim
            .run(&SimulationConfig {
                iterations: 0,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].cluster, None);
        assert!(trace.aborted.is_none());
    }

    #[test]
    fn measured_mode_converges_near_model_optimum() {
        let problem = path3_problem(230.0);
        let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let config = SimulationConfig {
            mode: Mode::Measured,
            iterations: 20,
            record_losses_exact: true,
            ..Default::default()
        };
        let trace = sim.run(&config).unwrap();
        assert!(trace.aborted.is_none());
        let opt = problem.model.centralized_optimum().unwrap();
        let gap = (&trace.last().q - &opt.q).norm() / opt.q.norm();
        assert!(gap < 0.01, "gap {gap}");
        for rec in &trace.records {
            assert!(problem.model.imbalance(&rec.q).abs() < 1e-9 * rec.q.norm());
            assert!(rec.losses_exact.unwrap() > 0.0);
        }
    }

    #[test]
    fn measured_gap_shrinks_with_voltage() {
        let gap = |u_n: f64| {
            let problem = path3_problem(u_n);
            let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
            let sim = Simulator::new(&problem, &clusters).unwrap();
            let config = SimulationConfig {
                mode: Mode::Measured,
                iterations: 10,
                ..Default::default()
            };
            let q = sim.run(&config).unwrap().last().q.clone();
            let opt = problem.model.centralized_optimum().unwrap().q;
            (q - &opt).norm() / opt.norm()
        };
        let (low, high) = (gap(230.0), gap(2300.0));
        assert!(high < low, "{low} -> {high}");
    }

    #[test]
    fn measured_step_matches_model_step_at_feeder_voltage() {
        let problem = path3_problem(4800.0);
        let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let q = problem.model.initial_state();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model_cfg = SimulationConfig::default();
        let measured_cfg = SimulationConfig {
            mode: Mode::Measured,
            ..Default::default()
        };
        let a = sim.step(&q, 0, &model_cfg, &mut rng).unwrap() - &q;
        let b = sim.step(&q, 0, &measured_cfg, &mut rng).unwrap() - &q;
        assert!((&a - &b).norm() / a.norm() < 0.01);
    }

    #[test]
    fn noisy_measurements_conserve_total() {
        let problem = path3_problem(230.0);
        let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let config = SimulationConfig {
            mode: Mode::Measured,
            iterations: 15,
            measurement_noise: 0.5,
            seed: 9,
            ..Default::default()
        };
        let trace = sim.run(&config).unwrap();
        for rec in &trace.records {
            assert!(problem.model.imbalance(&rec.q).abs() < 1e-9 * rec.q.norm());
        }
    }

    #[test]
    fn divergent_power_flow_aborts_with_partial_trace() {
        let mut problem = path3_problem(230.0);
        problem.scenario.s[1] = c(-2.0e6, -1.0e6);
        problem.model =
            QuadraticModel::from_scenario(&problem.green, &[0, 2], &problem.scenario).unwrap();
        let clusters = ClusterSet::new(vec![vec![0, 1]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let config = SimulationConfig {
            mode: Mode::Measured,
            iterations: 5,
            ..Default::default()
        };
        let trace = sim.run(&config).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert!(matches!(trace.aborted, Some(Error::NonConvergence { .. })));
    }

    #[test]
    fn runs_are_reproducible() {
        let problem = path3_problem(230.0);
        let clusters = ClusterSet::new(
            vec![vec![0, 1], vec![0], vec![1]],
            Some(vec![0.2, 0.5, 0.3]),
            2,
        )
        .unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let config = SimulationConfig {
            iterations: 50,
            seed: 77,
            ..Default::default()
        };
        assert_eq!(sim.run(&config).unwrap(), sim.run(&config).unwrap());
    }

    #[test]
    fn ensemble_independent_of_thread_count() {
        let problem = path3_problem(230.0);
        let clusters = ClusterSet::new(vec![vec![0, 1], vec![0]], None, 2).unwrap();
        let sim = Simulator::new(&problem, &clusters).unwrap();
        let j_opt = problem.model.centralized_optimum().unwrap().cost;
        let a = sim.ensemble_mean_excess(5, 64, 11, j_opt).unwrap();
        let b = sim.ensemble_mean_excess(5, 64, 11, j_opt).unwrap();
        assert_eq!(a, b);
        assert!(a[0] > 0.0 && a[5] < a[0]);
    }

    #[test]
    fn poisson_schedule_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(poisson_schedule(&[1.0, 2.0], 0.0, &mut rng)
            .unwrap()
            .is_empty());
        assert!(poisson_schedule(&[1.0, 0.0], 1.0, &mut rng).is_err());

        let (rate, horizon) = (3.0, 2000.0);
        let events = poisson_schedule(&[rate, rate], horizon, &mut rng).unwrap();
        let expected = 2.0 * rate * horizon;
        assert!((events.len() as f64 - expected).abs() < 3.0 * expected.sqrt());
        assert!(events.windows(2).all(|w| w[0].0 <= w[1].0));

        let events = poisson_schedule(&[1.0, 3.0], horizon, &mut rng).unwrap();
        let n = events.len() as f64;
        let second = events.iter().filter(|e| e.1 == 1).count() as f64;
        let sigma = (n * 0.75 * 0.25).sqrt();
        assert!((second - 0.75 * n).abs() < 3.0 * sigma);
    }
}
