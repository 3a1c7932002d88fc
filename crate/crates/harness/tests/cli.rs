use std::path::Path;
use std::process::Command;

fn shiftsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shiftsim"))
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml")).display().to_string()
}

#[test]
fn run_then_report_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let ran = shiftsim().args(["run", "--scenario", &scenario("write_lat_idle_shift"), "--out"]).arg(&out).output().unwrap();
    assert!(ran.status.success(), "{}", String::from_utf8_lossy(&ran.stderr));
    for f in ["trace.ndjson", "scenario.toml", "throughput.csv", "latency.csv", "progress.csv", "transitions.csv", "verdicts.csv", "summary.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let rep = shiftsim().args(["report", "--trace"]).arg(out.join("trace.ndjson")).output().unwrap();
    assert!(rep.status.success());
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(String::from_utf8(rep.stdout).unwrap(), summary);
}

#[test]
fn plain_run_shows_the_halt() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let ran = shiftsim().args(["run", "--scenario", &scenario("send_bw_local_down_noshift"), "--out"]).arg(&out).output().unwrap();
    // verdicts hold; the failure itself is the expected outcome
    assert!(ran.status.success());
    let text = String::from_utf8(ran.stdout).unwrap();
    assert!(text.contains("completed=false, app errors 1"), "{text}");
}

#[test]
fn violated_verdicts_set_the_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.ndjson");
    // a run that never ended
    std::fs::write(&trace, "{\"kind\":\"RUN_START\",\"t\":0}\n").unwrap();
    let r = shiftsim().args(["report", "--trace"]).arg(&trace).output().unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8(r.stdout).unwrap().contains("FAIL run_end"));
}

#[test]
fn bad_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nbogus = 1\n").unwrap();
    let r = shiftsim().args(["run", "--scenario"]).arg(&bad).output().unwrap();
    assert!(!r.status.success());
    let trace = tmp.path().join("t.ndjson");
    std::fs::write(&trace, "{not json\n").unwrap();
    let r = shiftsim().args(["report", "--trace"]).arg(&trace).output().unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("malformed trace"));
}

#[test]
fn small_soundness_run_is_clean() {
    let r = shiftsim().args(["soundness", "--runs", "8", "--seed", "42", "--sequential"]).output().unwrap();
    assert!(r.status.success());
    assert!(String::from_utf8(r.stdout).unwrap().starts_with("8 randomized runs, 0 violations"));
}
