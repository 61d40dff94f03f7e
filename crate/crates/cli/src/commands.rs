use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use orpf::gossip::Mode;
use orpf::network::bundled;
use orpf::{
    approx_state, approximation_error, hypergraph_connected, optimal_tree_clustering, rate_report,
    solve_exact, uniform_angle, ClusterSet, Error, Network, NetworkFile, Result, SimulationConfig,
    Simulator, SolveOptions,
};
use serde_json::json;

use crate::trace_csv::write_trace;
use crate::{Clustering, ModeArg};

/// Deviation from the mean line angle (rad) above which the angle report is flagged.
const ANGLE_TOLERANCE: f64 = 0.1;

fn load(arg: &str) -> Result<(NetworkFile, Network)> {
    let file = match arg.strip_prefix('@') {
        Some(name) => {
            let text = bundled(name).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown bundled network `{name}` (available: {})",
                    orpf::network::BUNDLED.join(", ")
                ))
            })?;
            NetworkFile::from_json(text)?
        }
        None => NetworkFile::read(Path::new(arg))?,
    };
    let net = file.to_network()?;
    Ok((file, net))
}

fn choose_clusters(net: &Network, clustering: Clustering) -> Result<ClusterSet> {
    match clustering {
        Clustering::File => net.clusters.clone().ok_or_else(|| {
            Error::InvalidClusters(
                "the network file lists no clusters; pass --clustering optimal or star".into(),
            )
        }),
        Clustering::Optimal => optimal_tree_clustering(&net.grid, &net.compensators),
        Clustering::Star => ClusterSet::star(net.compensators.len()),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_error(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn validate(arg: &str, scale: &[f64], as_json: bool) -> Result<()> {
    let (_, net) = load(arg)?;
    let problem = net.problem()?;
    let opts = SolveOptions {
        tol: 1e-13,
        max_iter: 500,
    };
    let exact = solve_exact(&net.grid, &problem.green, &net.scenario, opts)?;
    let approx = approx_state(&net.grid, &problem.green, &net.scenario)?;
    let report = approximation_error(&net.grid, &problem.green, &net.scenario, scale, opts)?;
    let angle = uniform_angle(&net.grid, ANGLE_TOLERANCE)?;
    let rel = |v: usize| (exact.u[v].norm() - approx.u[v].norm()).abs() / exact.u[v].norm();
    let max_rel = (0..net.grid.n()).map(rel).fold(0.0, f64::max);

    if as_json {
        let nodes: Vec<_> = (0..net.grid.n())
            .map(|v| {
                json!({
                    "id": net.grid.id(v),
                    "exact_V": exact.u[v].norm(),
                    "exact_angle_rad": exact.u[v].arg(),
                    "approx_V": approx.u[v].norm(),
                    "approx_angle_rad": approx.u[v].arg(),
                    "rel_error": rel(v),
                })
            })
            .collect();
        let value = json!({
            "nodes": nodes,
            "max_rel_voltage_error": max_rel,
            "scaling": report.rows,
            "decay_exponent": report.decay_exponent,
            "impedance_angle": angle,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&value).expect("report serializes")
        );
        return Ok(());
    }

    println!(
        "{:<10} {:>16} {:>16} {:>12}",
        "node", "|u| exact (V)", "|u| approx (V)", "rel. error"
    );
    for v in 0..net.grid.n() {
        println!(
            "{:<10} {:>16.4} {:>16.4} {:>12.3e}",
            net.grid.id(v),
            exact.u[v].norm(),
            approx.u[v].norm(),
            rel(v)
        );
    }
    println!("max relative voltage error: {max_rel:.3e}");
    println!();
    println!(
        "{:>8} {:>12} {:>16} {:>16} {:>10}",
        "scale", "U_N (V)", "max rel. error", "remainder (V)", "iterations"
    );
    for row in &report.rows {
        println!(
            "{:>8} {:>12.1} {:>16.3e} {:>16.3e} {:>10}",
            row.factor, row.u_nominal, row.max_rel_voltage_error, row.residual_norm, row.iterations
        );
    }
    match report.decay_exponent {
        Some(e) => println!("remainder decay exponent: {e:.3}"),
        None => println!("remainder decay exponent: n/a"),
    }
    println!(
        "line impedance angle: {:.4} rad (spread {:.4}, max deviation {:.4}{})",
        angle.theta,
        angle.spread,
        angle.max_deviation,
        if angle.flagged { ", non-uniform" } else { "" }
    );
    Ok(())
}

pub fn run(
    arg: &str,
    mode: ModeArg,
    iterations: usize,
    seed: u64,
    out: Option<&Path>,
    clustering: Clustering,
    record_losses: bool,
) -> Result<()> {
    let (_, net) = load(arg)?;
    let clusters = choose_clusters(&net, clustering)?;
    if !hypergraph_connected(clusters.clusters(), clusters.m()) {
        eprintln!(
            "warning: the clusters are not connected; the iteration cannot reach the optimum"
        );
    }
    let problem = net.problem()?;
    let sim = Simulator::new(&problem, &clusters)?;
    let mode = match mode {
        ModeArg::Model => Mode::Model,
        ModeArg::Measured => Mode::Measured,
    };
    let config = SimulationConfig {
        mode,
        iterations,
        seed,
        record_losses_exact: record_losses,
        ..Default::default()
    };
    let trace = sim.run(&config)?;

    let ids = net.compensator_ids();
    match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_error(path, e))?;
            write_trace(BufWriter::new(file), &trace, &ids, record_losses)?;
        }
        None => write_trace(std::io::stdout().lock(), &trace, &ids, record_losses)?,
    }
    if let Some(e) = trace.aborted {
        eprintln!(
            "run aborted after {} iterations; partial trace written",
            trace.records.len() - 1
        );
        return Err(e);
    }

    let opts = config.solve;
    let initial = problem.exact_losses(&trace.records[0].q, opts)?;
    let last = problem.exact_losses(&trace.last().q, opts)?;
    let optimum = problem.exact_losses(&problem.model.centralized_optimum()?.q, opts)?;
    let pct = |l: f64| 100.0 * (1.0 - l / initial);
    let mut summary = String::new();
    summary += &format!("{:<26} {:>14} {:>12}\n", "", "losses (W)", "reduction");
    summary += &format!("{:<26} {:>14.1} {:>12}\n", "initial", initial, "-");
    summary += &format!(
        "{:<26} {:>14.1} {:>10.2} %\n",
        format!("after {} iterations", trace.records.len() - 1),
        last,
        pct(last)
    );
    summary += &format!(
        "{:<26} {:>14.1} {:>10.2} %\n",
        "centralized optimum",
        optimum,
        pct(optimum)
    );
    // The trace owns stdout when no output path is given.
    if out.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(())
}

pub fn analyze(arg: &str, clustering: Clustering, out: Option<&Path>) -> Result<()> {
    let (_, net) = load(arg)?;
    let clusters = choose_clusters(&net, clustering)?;
    let problem = net.problem()?;
    let report = rate_report(&net.grid, &problem.model, &clusters)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["compensator_ids"] = json!(net.compensator_ids());
    let mut text = serde_json::to_string_pretty(&value).expect("report serializes");
    text.push('\n');
    write_text(out, &text)
}

pub fn cluster(arg: &str, out: Option<&Path>) -> Result<()> {
    let (mut file, net) = load(arg)?;
    let clusters = optimal_tree_clustering(&net.grid, &net.compensators)?;
    let problem = net.problem()?;
    let report = rate_report(&net.grid, &problem.model, &clusters)?;
    file.set_clusters(&net, &clusters);
    write_text(out, &file.to_json())?;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "{} clusters, edge-disjoint: {}, beta {:.12}, bound {:.12}",
        clusters.len(),
        report.edge_disjoint.unwrap_or(false),
        report.beta,
        report.bound
    );
    Ok(())
}
