//! Trace files: one CSV row per iteration, including the initial state.

use std::io::Write;

use orpf::{Error, Result, Trace};

pub fn write_trace<W: Write>(
    out: W,
    trace: &Trace,
    compensator_ids: &[&str],
    with_losses: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "t".to_string(),
        "cluster".to_string(),
        "J_quadratic".to_string(),
    ];
    if with_losses {
        header.push("losses_exact_W".to_string());
    }
    header.extend(compensator_ids.iter().map(|id| format!("q_{id}")));
    w.write_record(&header).map_err(csv_error)?;
    for rec in &trace.records {
        let mut row = vec![
            rec.t.to_string(),
            rec.cluster.map_or(String::new(), |r| r.to_string()),
            rec.cost.to_string(),
        ];
        if with_losses {
            row.push(rec.losses_exact.map_or(String::new(), |l| l.to_string()));
        }
        row.extend(rec.q.iter().map(|q| q.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "trace".into(),
        message: e.to_string(),
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io {
        path: "trace".into(),
        message: e.to_string(),
    }
}
