use std::path::{Path, PathBuf};

use shift_core::simcore::TraceKind;
use shift_harness::report::Report;
use shift_harness::scenario::Scenario;
use shift_harness::sweep::{self, SOUNDNESS};
use shift_harness::{run, workload};

fn dir(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(sub)
}

fn load(sub: &str, name: &str) -> Scenario {
    Scenario::load(&dir(sub).join(format!("{name}.toml"))).unwrap()
}

fn report(sc: &Scenario) -> Report {
    Report::from_trace(&run(sc).unwrap())
}

fn assert_sound(r: &Report) {
    for v in r.verdicts.iter().filter(|v| SOUNDNESS.contains(&v.name)) {
        assert!(v.pass, "{}: {}", v.name, v.detail);
    }
}

#[test]
fn flap_during_recovery_falls_back_again() {
    let sc = load("tests/fixtures", "flap_during_recovery");
    let log = run(&sc).unwrap();
    let aborted = log.of_kind(TraceKind::Warning).filter(|e| e.str("what") == Some("switch notification failed")).count();
    assert_eq!(aborted, 1);
    assert_sound(&Report::from_trace(&log));
}

#[test]
fn flap_during_sink_keeps_posts() {
    assert_sound(&report(&load("tests/fixtures", "flap_during_sink")));
}

#[test]
fn every_shipped_scenario_passes() {
    let scs: Vec<_> = sweep::load_dir(&dir("scenarios")).unwrap().into_iter().map(|(_, s)| s).collect();
    assert!(scs.len() >= 20);
    for r in sweep::sweep(scs, true) {
        let rep = r.report.unwrap();
        assert!(rep.passed(), "{}:\n{}", r.name, rep.summary());
    }
}

#[test]
fn sweep_is_the_same_in_parallel_and_in_sequence() {
    let scs: Vec<_> = ["write_lat_idle_shift", "send_bw_ack_drop", "read_bw_remote_down_shift"]
        .iter()
        .map(|n| load("scenarios", n))
        .collect();
    let a = sweep::sweep(scs.clone(), true);
    let b = sweep::sweep(scs, false);
    for (x, y) in a.iter().zip(&b) {
        let (x, y) = (x.report.as_ref().unwrap(), y.report.as_ref().unwrap());
        assert_eq!(x.verdicts, y.verdicts);
        assert_eq!(x.throughput, y.throughput);
        assert_eq!(x.latency, y.latency);
    }
}

#[test]
fn failover_lands_the_same_bytes_as_a_clean_run() {
    for name in ["write_bw_local_down_shift", "send_bw_remote_down_shift", "read_bw_local_down_shift"] {
        let faulty = load("scenarios", name);
        let mut clean = faulty.clone();
        clean.faults.clear();
        let (a, b) = (report(&faulty), report(&clean));
        let digest = |r: &Report| r.run_end.as_ref().unwrap().str("receiver_digest").unwrap().to_owned();
        assert_eq!(digest(&a), digest(&b), "{name}");
        assert!(a.run_end.as_ref().unwrap().int("fallbacks") >= Some(1));
        assert_eq!(b.run_end.as_ref().unwrap().int("fallbacks"), Some(0));
    }
}

#[test]
fn report_totals_add_up() {
    let sc = load("scenarios", "write_bw_local_down_shift");
    let r = report(&sc);
    let want = sc.workload.iterations * u64::from(sc.workload.msg_size);
    // rewound WRITEs may land twice, never less than once
    assert!(r.bytes_delivered >= want);
    assert_eq!(r.throughput.iter().sum::<u64>(), r.bytes_delivered);
    let csv: u64 = r.throughput_csv().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(csv, r.bytes_delivered);
}

#[test]
fn same_seed_same_trace() {
    let sc = load("scenarios", "send_bw_ack_drop");
    assert_eq!(run(&sc).unwrap().to_ndjson(), run(&sc).unwrap().to_ndjson());
    let mut other = sc.clone();
    other.seed += 1;
    let d = |s: &Scenario| report(s).run_end.unwrap().str("sender_digest").unwrap().to_owned();
    assert_ne!(d(&sc), d(&other));
}

#[test]
fn payload_digest_matches_what_the_receiver_holds() {
    let sc = load("scenarios", "write_lat_idle_shift");
    let r = report(&sc);
    let want = workload::digest(&workload::payload(sc.seed, 1, sc.workload.iterations, sc.workload.msg_size));
    assert_eq!(r.run_end.unwrap().str("receiver_digest"), Some(want.as_str()));
}
