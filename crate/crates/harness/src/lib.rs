//! Scenario runner for the shift simulator: workloads, fault scripts,
//! trace reports and parameter sweeps.

pub mod report;
pub mod scenario;
pub mod sweep;
pub mod train;
pub mod workload;
pub mod world;

use anyhow::Result;
use shift_core::simcore::TraceLog;

use scenario::{Scenario, WorkloadKind};

/// Runs a scenario and returns its full trace.
pub fn run(sc: &Scenario) -> Result<TraceLog> {
    sc.validate()?;
    world::with_backend(sc, |v| {
        match sc.workload.kind {
            WorkloadKind::Train => train::run_train(v, sc)?,
            _ => workload::run_micro(v, sc)?,
        }
        Ok(v.take_log())
    })
}

/// Runs a scenario and writes `trace.ndjson` plus the report files to `out`.
pub fn run_to_dir(sc: &Scenario, out: &std::path::Path) -> Result<report::Report> {
    use anyhow::Context;
    let log = run(sc)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let f = std::fs::File::create(out.join("trace.ndjson")).context("creating trace file")?;
    log.write_ndjson(std::io::BufWriter::new(f)).context("writing trace")?;
    std::fs::write(out.join("scenario.toml"), sc.to_toml()).context("writing scenario copy")?;
    let rep = report::Report::from_trace(&log);
    rep.write_dir(out)?;
    Ok(rep)
}
