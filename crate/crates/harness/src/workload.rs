//! perftest-style drivers: WRITE/SEND/READ bandwidth and WRITE latency.
//!
//! Every message goes to its own slot so the receiver's buffer ends up a
//! byte-for-byte copy of the sender's, and the first 8 bytes of each slot
//! carry a stamp (`flow << 48 | seq`) the report uses for ordering checks.

use anyhow::{bail, Result};
use rand::RngCore;
use sha2::{Digest, Sha256};
use shift_core::simcore::{seeded_rng, Time, TraceEvent, TraceKind};
use shift_core::verbs::{RecvRequest, Upcall, WcOpcode, WorkCompletion, WorkRequest};

use crate::scenario::{ms, us, Scenario, WorkloadKind};
use crate::world::{connect, fault_script, open_endpoint, rnic, settle, Endpoint, Sim};

pub const SETTLE: Time = 5_000_000;
const PACE: u64 = 1;

pub fn stamp(flow: u64, seq: u64) -> u64 {
    flow << 48 | seq
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seeded payload with a stamp at the head of every `size`-byte slot.
pub fn payload(seed: u64, flow: u64, n: u64, size: u32) -> Vec<u8> {
    let mut data = vec![0u8; (n * u64::from(size)) as usize];
    seeded_rng(seed ^ 0x5041_594c).fill_bytes(&mut data);
    for (i, slot) in data.chunks_mut(size as usize).enumerate() {
        slot[..8].copy_from_slice(&stamp(flow, i as u64).to_le_bytes());
    }
    data
}

struct Driver {
    kind: WorkloadKind,
    n: u64,
    size: u32,
    depth: u64,
    gap: Time,
    posted: u64,
    done: u64,
    recv_posted: u64,
    recv_done: u64,
    next_at: Time,
    timer: bool,
    failed: bool,
    errors: u64,
    post_time: Vec<Time>,
}

impl Driver {
    fn finished(&self) -> bool {
        self.failed || (self.done == self.n && (self.kind != WorkloadKind::SendBw || self.recv_done == self.n))
    }

    fn slot(&self, i: u64) -> u64 {
        i * u64::from(self.size)
    }

    fn app_error(&mut self, v: &mut dyn Sim, what: &str, detail: String) {
        let ev = TraceEvent::new(v.now(), TraceKind::AppError).with("what", what).with("detail", detail);
        v.emit(ev);
        self.errors += 1;
        self.failed = true;
    }

    fn pump(&mut self, v: &mut dyn Sim, c: &Endpoint, s: &Endpoint) {
        while !self.failed && self.posted < self.n && self.posted - self.done < self.depth {
            let now = v.now();
            if self.gap > 0 && now < self.next_at {
                if !self.timer && v.schedule_timer(self.next_at, PACE).is_ok() {
                    self.timer = true;
                }
                return;
            }
            let i = self.posted;
            let off = self.slot(i);
            let wr = match self.kind {
                WorkloadKind::SendBw => WorkRequest::send(i, c.mr.sge(off, self.size)),
                WorkloadKind::ReadBw => WorkRequest::read(i, c.mr.sge(off, self.size), s.mr.remote(off)),
                _ => WorkRequest::write(i, c.mr.sge(off, self.size), s.mr.remote(off)),
            };
            if let Err(e) = v.post_send(c.qp, wr) {
                self.app_error(v, "post_send", e.to_string());
                return;
            }
            self.post_time.push(now);
            self.posted += 1;
            self.next_at = now + self.gap;
        }
    }

    fn refill_recvs(&mut self, v: &mut dyn Sim, s: &Endpoint, cap: u64) {
        while !self.failed && self.recv_posted < self.n && self.recv_posted - self.recv_done < cap {
            let i = self.recv_posted;
            let rr = RecvRequest { wr_id: i, sgl: vec![s.mr.sge(self.slot(i), self.size)] };
            if let Err(e) = v.post_recv(s.qp, rr) {
                self.app_error(v, "post_recv", e.to_string());
                return;
            }
            self.recv_posted += 1;
        }
    }

    fn on_wc(&mut self, v: &mut dyn Sim, wc: WorkCompletion, client_qpn: u32) {
        if !wc.status.is_ok() {
            let ev = TraceEvent::new(v.now(), TraceKind::AppError)
                .with("what", "wc")
                .with("status", wc.status.as_str())
                .with("wr_id", wc.wr_id)
                .with("qpn", wc.qp_num);
            v.emit(ev);
            self.errors += 1;
            self.failed = true;
            return;
        }
        if wc.opcode.is_recv() {
            if wc.wr_id != self.recv_done || wc.byte_len != u64::from(self.size) {
                self.app_error(v, "recv_order", format!("wr_id {} len {}, expected {}", wc.wr_id, wc.byte_len, self.recv_done));
                return;
            }
            self.recv_done += 1;
            return;
        }
        if wc.qp_num != client_qpn || wc.wr_id != self.done {
            self.app_error(v, "send_order", format!("wr_id {} on qpn {}, expected {}", wc.wr_id, wc.qp_num, self.done));
            return;
        }
        if self.kind == WorkloadKind::WriteLat {
            let lat = v.now() - self.post_time[wc.wr_id as usize];
            let ev = TraceEvent::new(v.now(), TraceKind::OpLatency).with("seq", wc.wr_id).with("ns", lat);
            v.emit(ev);
        }
        debug_assert!(matches!(wc.opcode, WcOpcode::Write | WcOpcode::Send | WcOpcode::Read));
        self.done += 1;
    }
}

/// Runs one micro-benchmark to completion, failure or the time budget.
pub fn run_micro(v: &mut dyn Sim, sc: &Scenario) -> Result<()> {
    let w = &sc.workload;
    if w.kind == WorkloadKind::Train {
        bail!("TRAIN is not a micro-benchmark");
    }
    let depth = if w.kind == WorkloadKind::WriteLat { 1 } else { w.queue_depth };
    let n = w.iterations;
    let total = n * u64::from(w.msg_size);
    let topo = v.topology().clone();
    let c = open_endpoint(v, rnic(&topo, 0, 0), depth, total)?;
    let s = open_endpoint(v, rnic(&topo, 1, 0), depth, total)?;
    connect(v, &c, &s, 1000)?;
    settle(v, SETTLE);

    let flow = 1;
    let data = payload(sc.seed, flow, n, w.msg_size);
    let (src, dst) = if w.kind == WorkloadKind::ReadBw { (&s, &c) } else { (&c, &s) };
    v.write_memory(src.host, src.buf, &data)?;

    let client_qpn = v.query_qp(c.qp)?.qpn;
    let t0 = v.now();
    v.install(&fault_script(sc, &topo, t0)?)?;
    let start = TraceEvent::new(t0, TraceKind::RunStart)
        .with("workload", format!("{:?}", w.kind))
        .with("shift", sc.shift_enabled)
        .with("seed", sc.seed)
        .with("messages", n)
        .with("msg_size", w.msg_size)
        .with("client_qpn", client_qpn);
    v.emit(start);

    let mut d = Driver {
        kind: w.kind,
        n,
        size: w.msg_size,
        depth: u64::from(depth),
        gap: us(w.gap_us),
        posted: 0,
        done: 0,
        recv_posted: 0,
        recv_done: 0,
        next_at: t0,
        timer: false,
        failed: false,
        errors: 0,
        post_time: Vec::with_capacity(n as usize),
    };
    let rq_cap = 2 * u64::from(depth.max(16));
    v.req_notify_cq(c.cq)?;
    v.req_notify_cq(s.cq)?;
    if w.kind == WorkloadKind::SendBw {
        d.refill_recvs(v, &s, rq_cap);
    }
    d.pump(v, &c, &s);

    let deadline = t0 + ms(sc.duration_ms);
    while !d.finished() {
        let Some(up) = v.next_upcall(deadline) else { break };
        match up {
            Upcall::Timer(PACE) => d.timer = false,
            Upcall::Timer(_) => {}
            Upcall::CqEvent(cq) => {
                let _ = v.req_notify_cq(cq);
                loop {
                    let wcs = v.poll_cq(cq, 64);
                    if wcs.is_empty() {
                        break;
                    }
                    for wc in wcs {
                        if !d.failed {
                            d.on_wc(v, wc, client_qpn);
                        }
                    }
                }
            }
        }
        if w.kind == WorkloadKind::SendBw {
            d.refill_recvs(v, &s, rq_cap);
        }
        d.pump(v, &c, &s);
    }

    let sent = v.read_memory(src.host, src.buf, total)?;
    let got = v.read_memory(dst.host, dst.buf, total)?;
    let completed = d.done == n && !d.failed;
    let mut end = TraceEvent::new(v.now(), TraceKind::RunEnd)
        .with("workload", format!("{:?}", w.kind))
        .with("t0", t0)
        .with("expected", n)
        .with("flows", 1u64)
        .with("completed", completed)
        .with("done", d.done)
        .with("app_errors", d.errors)
        .with("sender_digest", digest(&sent))
        .with("receiver_digest", digest(&got))
        .with("backup_wqes", v.backup_wqes(c.qp) + v.backup_wqes(s.qp));
    if let Some(k) = v.shift_counters() {
        end = end
            .with("post_calls", k.post_calls)
            .with("post_steps", k.post_steps)
            .with("poll_calls", k.poll_calls)
            .with("poll_steps", k.poll_steps)
            .with("fallbacks", k.fallbacks)
            .with("recoveries", k.recoveries)
            .with("fatal", k.fatal);
    }
    v.emit(end);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_slots_are_stamped() {
        let p = payload(7, 3, 4, 16);
        assert_eq!(p.len(), 64);
        for i in 0..4u64 {
            let s = u64::from_le_bytes(p[i as usize * 16..][..8].try_into().unwrap());
            assert_eq!(s, stamp(3, i));
        }
        assert_eq!(payload(7, 3, 4, 16), p);
        assert_ne!(payload(8, 3, 4, 16), p);
    }
}
