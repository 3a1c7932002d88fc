//! Many independent runs at once: scenario directories and the randomized
//! fault-schedule soundness check. Runs share nothing, so they spread over
//! rayon's pool when the `parallel` feature is on.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::Rng;
use shift_core::simcore::seeded_rng;

use crate::report::{Report, Verdict};
use crate::scenario::{FaultKind, FaultSpec, FaultTarget, Scenario, ShiftSpec, TopologySpec, WorkloadKind, WorkloadSpec};

/// Maps `f` over `items`, in parallel if asked and compiled in. Output
/// order follows input order either way.
pub fn map_runs<T, R, F>(items: Vec<T>, parallel: bool, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = parallel;
    items.into_iter().map(f).collect()
}

pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Scenario)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| Scenario::load(&p).map(|s| (p, s))).collect()
}

pub struct SweepResult {
    pub name: String,
    pub report: Result<Report>,
}

pub fn sweep(scenarios: Vec<Scenario>, parallel: bool) -> Vec<SweepResult> {
    map_runs(scenarios, parallel, |sc| SweepResult {
        name: sc.name.clone(),
        report: crate::run(&sc).map(|log| Report::from_trace(&log)),
    })
}

/// Verdicts a run in the supported fault class must pass.
pub const SOUNDNESS: &[&str] = &["no_fatal", "exactly_once", "order", "transitions", "continuity", "run_end"];

fn failures(sc: &Scenario) -> Vec<Verdict> {
    match crate::run(sc) {
        Ok(log) => Report::from_trace(&log).verdicts.into_iter().filter(|v| !v.pass && SOUNDNESS.contains(&v.name)).collect(),
        Err(e) => vec![Verdict { name: "run_end", pass: false, detail: format!("run error: {e:#}") }],
    }
}

/// A two-party bandwidth run with 1 to 3 faults on the default links:
/// permanent link-downs and flaps on either side, at random times.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = seeded_rng(seed ^ 0x73_6f75_6e64);
    let kind = [WorkloadKind::WriteBw, WorkloadKind::SendBw, WorkloadKind::ReadBw, WorkloadKind::WriteLat][rng.gen_range(0..4)];
    let msg_size = [512u32, 4096, 16384][rng.gen_range(0..3)];
    let iterations = if kind == WorkloadKind::WriteLat { 200 } else { rng.gen_range(200..600) };
    let queue_depth = [1u32, 8, 16, 32][rng.gen_range(0..4)];
    // mostly paced, so runs outlast several probe rounds and recover
    let gap_us = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(50.0..2000.0f64).round() };
    let probe_interval_ms = [5.0, 20.0, 100.0][rng.gen_range(0..3)];
    // rough length of the fault-free run, to land faults inside it
    let span_ms = (iterations as f64 * (f64::from(msg_size) * 8.0 / 10e9 * 1e3 + gap_us / 1e3)).max(1.0);
    let n_faults = rng.gen_range(1..=3);
    let mut faults = Vec::new();
    for _ in 0..n_faults {
        let target = if rng.gen_bool(0.5) { FaultTarget::LocalDefault } else { FaultTarget::RemoteDefault };
        let at_ms = (rng.gen_range(0.0..span_ms) * 1000.0).round() / 1000.0;
        let (kind, duration_ms) = if rng.gen_bool(0.4) {
            (FaultKind::LinkDown, None)
        } else {
            (FaultKind::Flap, Some(rng.gen_range(1.0..(span_ms / 2.0).max(2.0)).round()))
        };
        faults.push(FaultSpec { kind, target: Some(target), link: None, at_ms, duration_ms });
    }
    Scenario {
        name: format!("random-{seed}"),
        seed,
        shift_enabled: true,
        duration_ms: 10_000.0,
        topology: TopologySpec { bandwidth_gbps: 10.0, ..TopologySpec::default() },
        workload: WorkloadSpec { kind, msg_size, queue_depth, iterations, gap_us },
        train: None,
        faults,
        shift: ShiftSpec { probe_interval_ms, ..ShiftSpec::default() },
    }
}

/// Smallest failing variant found greedily: drop faults one at a time,
/// then halve the message count, keeping each step only if it still fails.
pub fn minimize(sc: &Scenario) -> Scenario {
    let mut best = sc.clone();
    let mut i = 0;
    while i < best.faults.len() {
        let mut cand = best.clone();
        cand.faults.remove(i);
        if !failures(&cand).is_empty() {
            best = cand;
        } else {
            i += 1;
        }
    }
    while best.workload.iterations > 1 {
        let mut cand = best.clone();
        cand.workload.iterations /= 2;
        if failures(&cand).is_empty() {
            break;
        }
        best = cand;
    }
    best
}

pub struct Violation {
    pub seed: u64,
    pub verdicts: Vec<Verdict>,
    pub minimized: Scenario,
}

pub struct Soundness {
    pub runs: usize,
    pub violations: Vec<Violation>,
}

/// Runs `runs` random schedules starting at `base_seed`.
pub fn soundness(base_seed: u64, runs: usize, parallel: bool) -> Soundness {
    let seeds: Vec<u64> = (0..runs as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let found = map_runs(seeds, parallel, |seed| {
        let sc = random_scenario(seed);
        let bad = failures(&sc);
        (!bad.is_empty()).then(|| Violation { seed, verdicts: bad, minimized: minimize(&sc) })
    });
    Soundness { runs, violations: found.into_iter().flatten().collect() }
}

impl Soundness {
    pub fn summary(&self) -> String {
        let mut s = format!("{} randomized runs, {} violations\n", self.runs, self.violations.len());
        for v in &self.violations {
            s.push_str(&format!("seed {}:\n", v.seed));
            for x in &v.verdicts {
                s.push_str(&format!("  FAIL {}: {}\n", x.name, x.detail));
            }
            s.push_str("  minimized scenario:\n");
            for line in v.minimized.to_toml().lines() {
                s.push_str(&format!("    {line}\n"));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scenarios_are_valid_and_reproducible() {
        for seed in 0..50 {
            let sc = random_scenario(seed);
            sc.validate().unwrap();
            assert_eq!(Scenario::parse(&sc.to_toml()).unwrap(), sc);
            assert_eq!(random_scenario(seed), sc);
            assert!(sc.faults.iter().all(|f| matches!(f.target, Some(FaultTarget::LocalDefault | FaultTarget::RemoteDefault))));
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..64).collect();
        assert_eq!(map_runs(xs.clone(), true, |x| x * x), map_runs(xs, false, |x| x * x));
    }
}
