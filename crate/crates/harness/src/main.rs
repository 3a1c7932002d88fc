use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use shift_core::simcore::TraceLog;
use shift_harness::report::Report;
use shift_harness::scenario::Scenario;
use shift_harness::sweep;

#[derive(Parser)]
#[command(name = "shiftsim", about = "Run RDMA failover scenarios in simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario; writes trace.ndjson and report files to --out.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Rebuild the report of an existing trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Also write the CSV series here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every *.toml in a directory.
    Sweep {
        #[arg(long)]
        dir: PathBuf,
        /// Per-scenario output directories go under here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Random fault schedules checked for exactly-once, order and legal
    /// state transitions; violations are minimized.
    Soundness {
        #[arg(long, default_value_t = 200)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        sequential: bool,
    },
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run { scenario, seed, out } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let rep = shift_harness::run_to_dir(&sc, &out)?;
            print!("{}", rep.summary());
            println!("wrote {}", out.display());
            Ok(status(rep.passed()))
        }
        Cmd::Report { trace, out } => {
            let f = std::fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let log = TraceLog::read_ndjson(BufReader::new(f)).context("malformed trace")?;
            let rep = Report::from_trace(&log);
            if let Some(dir) = out {
                rep.write_dir(&dir)?;
            }
            print!("{}", rep.summary());
            Ok(status(rep.passed()))
        }
        Cmd::Sweep { dir, out, sequential } => {
            let loaded = sweep::load_dir(&dir)?;
            let scs: Vec<Scenario> = loaded.iter().map(|(_, s)| s.clone()).collect();
            let results = match &out {
                Some(root) => sweep::map_runs(scs, !sequential, |sc| {
                    let rep = shift_harness::run_to_dir(&sc, &root.join(&sc.name));
                    sweep::SweepResult { name: sc.name, report: rep }
                }),
                None => sweep::sweep(scs, !sequential),
            };
            let mut ok = true;
            for r in &results {
                match &r.report {
                    Ok(rep) => {
                        ok &= rep.passed();
                        let failed: Vec<_> = rep.verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
                        let line = if failed.is_empty() { "PASS".to_owned() } else { format!("FAIL ({})", failed.join(", ")) };
                        println!("{:<40} {line}", r.name);
                    }
                    Err(e) => {
                        ok = false;
                        println!("{:<40} ERROR {e:#}", r.name);
                    }
                }
            }
            Ok(status(ok))
        }
        Cmd::Soundness { runs, seed, sequential } => {
            let s = sweep::soundness(seed, runs, !sequential);
            print!("{}", s.summary());
            Ok(status(s.violations.is_empty()))
        }
    }
}
