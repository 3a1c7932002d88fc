//! Everything here is recomputed from the trace alone: throughput buckets,
//! latency percentiles, training progress, the transition timeline and the
//! invariant verdicts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use shift_core::simcore::{Time, TraceEvent, TraceKind, TraceLog, MS};

pub const BUCKET: Time = 100 * MS;

/// sq transitions the failover state machine may take. `DEFAULT ->
/// WAIT_SIGNALED` only happens on a requested switch.
pub const SQ_ALLOWED: &[(&str, &str)] = &[
    ("DEFAULT", "FALLBACK"),
    ("FALLBACK", "WAIT_SIGNALED"),
    ("WAIT_SIGNALED", "WAIT_SINKED"),
    ("WAIT_SINKED", "DEFAULT"),
    ("WAIT_SINKED", "FALLBACK"),
    ("DEFAULT", "WAIT_SIGNALED"),
];
pub const RQ_ALLOWED: &[(&str, &str)] = &[("DEFAULT", "FALLBACK"), ("FALLBACK", "DEFAULT")];

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Percentiles {
    pub count: usize,
    pub min: u64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let rank = |p: usize| s[((p * s.len()).div_ceil(100)).max(1) - 1];
        Some(Self { count: s.len(), min: s[0], p50: rank(50), p90: rank(90), p99: rank(99), max: s[s.len() - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub t: Time,
    pub qpn: i64,
    pub entity: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub t0: Time,
    /// Bytes placed per `BUCKET`, from `t0`.
    pub throughput: Vec<u64>,
    pub latency: Option<Percentiles>,
    /// (time, iterations completed) at every ITERATION event.
    pub progress: Vec<(Time, u64)>,
    pub transitions: Vec<Transition>,
    pub bytes_delivered: u64,
    pub messages_placed: u64,
    pub iterations: u64,
    pub restarts: Vec<TraceEvent>,
    pub run_end: Option<TraceEvent>,
    pub run_start: Option<TraceEvent>,
    pub verdicts: Vec<Verdict>,
}

fn stamp_parts(stamp: i64) -> (u64, u64) {
    let s = stamp as u64;
    (s >> 48, s & 0xffff_ffff_ffff)
}

impl Report {
    pub fn from_trace(log: &TraceLog) -> Self {
        let evs = log.events();
        let run_start = log.of_kind(TraceKind::RunStart).next().cloned();
        let run_end = log.of_kind(TraceKind::RunEnd).last().cloned();
        let t0 = run_start.as_ref().map_or(0, |e| e.t);
        let mut r = Report { t0, run_start, run_end, ..Default::default() };

        let mut lat = Vec::new();
        for e in evs {
            match e.kind {
                TraceKind::MsgPlaced => {
                    let len = e.int("len").unwrap_or(0).max(0) as u64;
                    r.bytes_delivered += len;
                    if len > 0 {
                        r.messages_placed += 1;
                    }
                    if e.t >= t0 {
                        let b = ((e.t - t0) / BUCKET) as usize;
                        if r.throughput.len() <= b {
                            r.throughput.resize(b + 1, 0);
                        }
                        r.throughput[b] += len;
                    }
                }
                TraceKind::OpLatency => lat.extend(e.int("ns").map(|v| v as u64)),
                TraceKind::Iteration => {
                    let it = e.int("iter").unwrap_or(0) as u64;
                    r.progress.push((e.t, it));
                    r.iterations += 1;
                }
                TraceKind::Restart => r.restarts.push(e.clone()),
                TraceKind::StateTransition => r.transitions.push(Transition {
                    t: e.t,
                    qpn: e.int("qpn").unwrap_or(-1),
                    entity: e.str("entity").unwrap_or("").to_owned(),
                    from: e.str("from").unwrap_or("").to_owned(),
                    to: e.str("to").unwrap_or("").to_owned(),
                }),
                _ => {}
            }
        }
        if let Some(end) = &r.run_end {
            if end.t >= t0 {
                let last = ((end.t - t0) / BUCKET) as usize;
                if r.throughput.len() <= last {
                    r.throughput.resize(last + 1, 0);
                }
            }
        }
        r.latency = Percentiles::of(&lat);
        r.verdicts = verdicts(log, &r);
        r
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    /// Time from the workload start to the last iteration.
    pub fn finish_time(&self) -> Option<Time> {
        self.progress.last().map(|&(t, _)| t - self.t0)
    }

    pub fn throughput_csv(&self) -> String {
        let mut s = String::from("t_ms,bytes,gbps\n");
        for (i, &b) in self.throughput.iter().enumerate() {
            let gbps = b as f64 * 8.0 / BUCKET as f64;
            let _ = writeln!(s, "{},{},{:.3}", i as u64 * BUCKET / MS, b, gbps);
        }
        s
    }

    pub fn latency_csv(&self) -> String {
        let mut s = String::from("count,min_ns,p50_ns,p90_ns,p99_ns,max_ns\n");
        if let Some(p) = self.latency {
            let _ = writeln!(s, "{},{},{},{},{},{}", p.count, p.min, p.p50, p.p90, p.p99, p.max);
        }
        s
    }

    pub fn progress_csv(&self) -> String {
        let mut s = String::from("t_ms,iterations\n");
        for &(t, it) in &self.progress {
            let _ = writeln!(s, "{:.3},{}", (t - self.t0) as f64 / MS as f64, it);
        }
        s
    }

    pub fn transitions_csv(&self) -> String {
        let mut s = String::from("t_ns,qpn,entity,from,to\n");
        for x in &self.transitions {
            let _ = writeln!(s, "{},{},{},{},{}", x.t, x.qpn, x.entity, x.from, x.to);
        }
        s
    }

    pub fn verdicts_csv(&self) -> String {
        let mut s = String::from("verdict,pass,detail\n");
        for v in &self.verdicts {
            let _ = writeln!(s, "{},{},\"{}\"", v.name, v.pass, v.detail.replace('"', "'"));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if let Some(st) = &self.run_start {
            let _ = writeln!(
                s,
                "run: {} shift={} seed={}",
                st.str("workload").unwrap_or("?"),
                st.int("shift").unwrap_or(0) != 0,
                st.int("seed").unwrap_or(0)
            );
        }
        let _ = writeln!(s, "delivered: {} bytes in {} messages", self.bytes_delivered, self.messages_placed);
        if let Some(end) = &self.run_end {
            let _ = writeln!(
                s,
                "outcome: {} of {} done, completed={}, app errors {}",
                end.int("done").unwrap_or(0),
                end.int("expected").unwrap_or(0),
                end.int("completed").unwrap_or(0) != 0,
                end.int("app_errors").unwrap_or(0)
            );
        }
        if !self.throughput.is_empty() {
            let peak = self.throughput.iter().max().copied().unwrap_or(0);
            let zero = self.throughput.iter().filter(|&&b| b == 0).count();
            let _ = writeln!(
                s,
                "throughput: {} buckets of {} ms, peak {:.3} Gb/s, {} empty",
                self.throughput.len(),
                BUCKET / MS,
                peak as f64 * 8.0 / BUCKET as f64,
                zero
            );
        }
        if let Some(p) = self.latency {
            let _ = writeln!(s, "latency ns: n={} min={} p50={} p90={} p99={} max={}", p.count, p.min, p.p50, p.p90, p.p99, p.max);
        }
        if self.iterations > 0 {
            let fin = self.finish_time().unwrap_or(0);
            let _ = writeln!(s, "training: {} iterations, finished at {:.3} ms", self.iterations, fin as f64 / MS as f64);
            for r in &self.restarts {
                let _ = writeln!(
                    s,
                    "  restart ({}) at iter {} -> {}, lost {}",
                    r.str("reason").unwrap_or("?"),
                    r.int("at_iter").unwrap_or(0),
                    r.int("resume_iter").unwrap_or(0),
                    r.int("lost").unwrap_or(0)
                );
            }
        }
        let _ = writeln!(s, "transitions: {}", self.transitions.iter().filter(|t| t.entity != "qp").count());
        for t in self.transitions.iter().filter(|t| t.entity != "qp") {
            let _ = writeln!(s, "  {:>14} ns qpn {} {}: {} -> {}", t.t, t.qpn, t.entity, t.from, t.to);
        }
        for v in &self.verdicts {
            let _ = writeln!(s, "{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        }
        s
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let files = [
            ("throughput.csv", self.throughput_csv()),
            ("latency.csv", self.latency_csv()),
            ("progress.csv", self.progress_csv()),
            ("transitions.csv", self.transitions_csv()),
            ("verdicts.csv", self.verdicts_csv()),
            ("summary.txt", self.summary()),
        ];
        for (name, body) in files {
            std::fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))?;
        }
        Ok(())
    }
}

/// Scratch regions that took absorbed copies, per host.
fn absorb_regions(log: &TraceLog) -> Vec<(i64, i64, i64)> {
    log.of_kind(TraceKind::CornerCase)
        .filter(|e| e.str("action") == Some("absorb"))
        .filter_map(|e| Some((e.int("host")?, e.int("addr")?, e.int("len")?)))
        .collect()
}

fn verdicts(log: &TraceLog, r: &Report) -> Vec<Verdict> {
    let mut out = Vec::new();

    let fatal: Vec<_> = log.of_kind(TraceKind::Fatal).collect();
    out.push(Verdict {
        name: "no_fatal",
        pass: fatal.is_empty(),
        detail: match fatal.first() {
            None => "no FATAL events".into(),
            Some(e) => format!("{} FATAL, first at {} ns: {}", fatal.len(), e.t, e.str("reason").unwrap_or("?")),
        },
    });

    // placements of application stamps, absorbed copies excluded
    let sinks = absorb_regions(log);
    let placed = log.of_kind(TraceKind::MsgPlaced).filter(|e| e.int("len").unwrap_or(0) > 0).filter(|e| {
        let (h, a) = (e.int("host").unwrap_or(-1), e.int("addr").unwrap_or(-1));
        !sinks.iter().any(|&(sh, sa, sl)| sh == h && a >= sa && a < sa + sl)
    });
    let mut first_at: HashMap<(u64, u64), i64> = HashMap::new();
    let mut last_seq: BTreeMap<u64, u64> = BTreeMap::new();
    let mut dup = None;
    let mut reorder = None;
    let mut dups = 0usize;
    let mut reorders = 0usize;
    for e in placed {
        let Some(st) = e.int("stamp") else { continue };
        let (flow, seq) = stamp_parts(st);
        let addr = e.int("addr").unwrap_or(-1);
        match first_at.get(&(flow, seq)) {
            Some(&a) if a == addr => {}
            Some(_) => {
                dups += 1;
                dup.get_or_insert(format!("flow {flow} seq {seq} placed again at {addr:#x} ({} ns)", e.t));
            }
            None => {
                first_at.insert((flow, seq), addr);
                if let Some(&prev) = last_seq.get(&flow) {
                    if seq <= prev {
                        reorders += 1;
                        reorder.get_or_insert(format!("flow {flow} seq {seq} after {prev} ({} ns)", e.t));
                    }
                }
                last_seq.insert(flow, seq);
            }
        }
    }
    out.push(Verdict {
        name: "exactly_once",
        pass: dups == 0,
        detail: dup.map_or_else(|| format!("{} distinct messages", first_at.len()), |d| format!("{dups} duplicates; first: {d}")),
    });
    out.push(Verdict {
        name: "order",
        pass: reorders == 0,
        detail: reorder.map_or_else(|| format!("{} flows in order", last_seq.len()), |d| format!("{reorders} out of order; first: {d}")),
    });

    let bad: Vec<_> = r
        .transitions
        .iter()
        .filter(|t| {
            let pair = (t.from.as_str(), t.to.as_str());
            match t.entity.as_str() {
                "sq" => !SQ_ALLOWED.contains(&pair),
                "rq" => !RQ_ALLOWED.contains(&pair),
                _ => false,
            }
        })
        .collect();
    out.push(Verdict {
        name: "transitions",
        pass: bad.is_empty(),
        detail: match bad.first() {
            None => format!("{} sq/rq transitions, all allowed", r.transitions.iter().filter(|t| t.entity != "qp").count()),
            Some(t) => format!("{} disallowed; first: qpn {} {} {} -> {} at {} ns", bad.len(), t.qpn, t.entity, t.from, t.to, t.t),
        },
    });

    // the run must have ended; with shift on it must also have delivered
    // everything without the application seeing an error
    if !log.is_empty() {
        match &r.run_end {
            None => out.push(Verdict { name: "run_end", pass: false, detail: "trace has no RUN_END".into() }),
            Some(end) => {
                let shift = r.run_start.as_ref().and_then(|s| s.int("shift")).unwrap_or(1) != 0;
                if shift {
                    let mut why = Vec::new();
                    if end.int("completed") != Some(1) {
                        why.push(format!("completed {} of {}", end.int("done").unwrap_or(0), end.int("expected").unwrap_or(0)));
                    }
                    if end.int("app_errors").unwrap_or(0) != 0 {
                        why.push(format!("{} application errors", end.int("app_errors").unwrap_or(0)));
                    }
                    if end.str("sender_digest") != end.str("receiver_digest") {
                        why.push("receiver digest differs from sender".into());
                    }
                    if end.int("lost").unwrap_or(0) != 0 {
                        why.push(format!("{} iterations lost", end.int("lost").unwrap_or(0)));
                    }
                    out.push(Verdict {
                        name: "continuity",
                        pass: why.is_empty(),
                        detail: if why.is_empty() { "all work delivered, no application errors".into() } else { why.join("; ") },
                    });
                }
                if let Some(iters) = end.int("done").filter(|_| r.iterations > 0) {
                    let last = r.progress.last().map_or(0, |p| p.1 as i64);
                    out.push(Verdict {
                        name: "progress_totals",
                        pass: last == iters,
                        detail: format!("last ITERATION {last}, RUN_END done {iters}"),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn placed(t: Time, flow: u64, seq: u64, addr: u64) -> TraceEvent {
        TraceEvent::new(t, TraceKind::MsgPlaced)
            .with("host", 1u64)
            .with("addr", addr)
            .with("len", 64u64)
            .with("stamp", crate::workload::stamp(flow, seq))
    }

    #[test]
    fn empty_trace_passes_with_empty_series() {
        let r = Report::from_trace(&TraceLog::new());
        assert!(r.throughput.is_empty() && r.progress.is_empty() && r.latency.is_none());
        assert!(r.passed());
    }

    #[test]
    fn fatal_fails() {
        let log: TraceLog = [TraceEvent::new(5, TraceKind::Fatal).with("reason", "x")].into_iter().collect();
        let r = Report::from_trace(&log);
        assert!(!r.verdict("no_fatal").unwrap().pass);
        assert!(!r.passed());
    }

    #[test]
    fn buckets_match_a_direct_sum() {
        let mut evs = vec![TraceEvent::new(0, TraceKind::RunStart)];
        let mut expect = [0u64; 4];
        for i in 0..40u64 {
            let t = i * 9 * MS + 1;
            evs.push(placed(t, 1, i, i * 64));
            expect[(t / BUCKET) as usize] += 64;
        }
        let r = Report::from_trace(&evs.into_iter().collect());
        assert_eq!(r.throughput, expect);
        assert_eq!(r.bytes_delivered, 40 * 64);
        assert!(r.throughput_csv().starts_with("t_ms,bytes,gbps\n0,768,"));
    }

    #[test]
    fn replays_at_the_same_address_are_not_duplicates() {
        let log: TraceLog = [placed(1, 1, 0, 0), placed(2, 1, 1, 64), placed(3, 1, 1, 64), placed(4, 1, 2, 128)].into_iter().collect();
        let r = Report::from_trace(&log);
        assert!(r.verdict("exactly_once").unwrap().pass);
        assert!(r.verdict("order").unwrap().pass);
    }

    #[test]
    fn misplaced_copy_and_reorder_are_caught() {
        let log: TraceLog = [placed(1, 1, 0, 0), placed(2, 1, 0, 64), placed(3, 1, 2, 128), placed(4, 1, 1, 192)].into_iter().collect();
        let r = Report::from_trace(&log);
        assert!(!r.verdict("exactly_once").unwrap().pass);
        assert!(!r.verdict("order").unwrap().pass);
    }

    #[test]
    fn absorbed_copies_are_ignored() {
        let sink = TraceEvent::new(2, TraceKind::CornerCase).with("action", "absorb").with("host", 1u64).with("addr", 4096u64).with("len", 64u64);
        let log: TraceLog = [placed(1, 1, 0, 0), sink, placed(3, 1, 0, 4096), placed(4, 1, 1, 64)].into_iter().collect();
        let r = Report::from_trace(&log);
        assert!(r.verdict("exactly_once").unwrap().pass && r.verdict("order").unwrap().pass);
        assert!(!r.verdict("run_end").unwrap().pass, "a cut-off trace never passes");
    }

    #[test]
    fn disallowed_transition_fails() {
        let tr = |f: &str, to: &str| TraceEvent::new(1, TraceKind::StateTransition).with("entity", "sq").with("from", f).with("to", to).with("qpn", 3u64);
        let ok: TraceLog = [tr("DEFAULT", "FALLBACK"), tr("FALLBACK", "WAIT_SIGNALED")].into_iter().collect();
        assert!(Report::from_trace(&ok).verdict("transitions").unwrap().pass);
        let bad: TraceLog = [tr("FALLBACK", "DEFAULT")].into_iter().collect();
        assert!(!Report::from_trace(&bad).verdict("transitions").unwrap().pass);
    }

    #[test]
    fn nearest_rank() {
        let p = Percentiles::of(&(1..=100).collect::<Vec<_>>()).unwrap();
        assert_eq!((p.min, p.p50, p.p90, p.p99, p.max), (1, 50, 90, 99, 100));
        assert_eq!(Percentiles::of(&[7]).unwrap().p99, 7);
    }
}
