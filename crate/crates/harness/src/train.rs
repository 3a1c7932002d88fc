//! Synthetic checkpointed trainer: two workers, each iteration is a compute
//! pause followed by a SEND each way of `bytes_per_allreduce`.
//!
//! A failure the application sees (an error completion) crashes the job: it
//! loses the iterations since the last checkpoint, pays `restart_cost` and
//! reconnects on RNICs whose links are still up.

use anyhow::{bail, Result};
use shift_core::simcore::{Time, TraceEvent, TraceKind};
use shift_core::verbs::{CqHandle, RecvRequest, Upcall, WorkCompletion, WorkRequest};

use crate::scenario::{ms, us, Scenario, TrainMode, TrainSpec};
use crate::workload::{stamp, SETTLE};
use crate::world::{connect, fault_script, open_endpoint, rnic, settle, Endpoint, Sim};

const T_COMPUTE: u64 = 1;
const T_CKPT: u64 = 2;
const T_RESTART: u64 = 3;
const T_BG: u64 = 4;

/// RECVs kept posted ahead per worker; also the number of buffer slots.
const AHEAD: u64 = 4;
const BG_FLOW: u64 = 0xfff;
const BG_SLOTS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Compute,
    Exchange,
    Checkpoint,
    Restart,
    Done,
}

/// Paced WRITE stream sharing the backup link in `shift_busy_backup`.
struct Background {
    c: Endpoint,
    s: Endpoint,
    size: u32,
    gap: Time,
    posted: u64,
    done: u64,
    stopped: bool,
}

impl Background {
    fn tick(&mut self, v: &mut dyn Sim) {
        if self.stopped {
            return;
        }
        if self.posted - self.done < BG_SLOTS {
            let i = self.posted;
            let off = (i % BG_SLOTS) * u64::from(self.size);
            let _ = v.write_memory(self.c.host, self.c.buf + off, &stamp(BG_FLOW, i).to_le_bytes());
            let wr = WorkRequest::write(i, self.c.mr.sge(off, self.size), self.s.mr.remote(off));
            if v.post_send(self.c.qp, wr).is_err() {
                self.stopped = true;
                return;
            }
            self.posted += 1;
        }
        let at = v.now() + self.gap;
        let _ = v.schedule_timer(at, T_BG);
    }

    fn on_wc(&mut self, wc: &WorkCompletion) {
        if wc.status.is_ok() {
            self.done += 1;
        } else {
            self.stopped = true;
        }
    }
}

struct Trainer<'a> {
    sp: &'a TrainSpec,
    total: u64,
    a: Endpoint,
    b: Endpoint,
    inc: u64,
    progress: u64,
    last_ckpt: u64,
    phase: Phase,
    sends: u8,
    recvs: u8,
    /// Next iteration to post a RECV for, per worker.
    ahead: [u64; 2],
    planned_restart_done: bool,
    restarts: u64,
    lost: u64,
    app_errors: u64,
}

impl Trainer<'_> {
    fn size(&self) -> u32 {
        self.sp.bytes_per_allreduce
    }

    fn flow(&self, side: u64) -> u64 {
        2 * self.inc + side
    }

    fn slot(&self, iter: u64) -> u64 {
        (iter % AHEAD) * u64::from(self.size())
    }

    fn post_recvs(&mut self, v: &mut dyn Sim) -> Result<()> {
        for side in 0..2 {
            let ep = if side == 0 { self.a } else { self.b };
            while self.ahead[side] < self.total && self.ahead[side] < self.progress + AHEAD {
                let i = self.ahead[side];
                v.post_recv(ep.qp, RecvRequest { wr_id: i, sgl: vec![ep.mr.sge(AHEAD * u64::from(self.size()) + self.slot(i), self.size())] })?;
                self.ahead[side] += 1;
            }
        }
        Ok(())
    }

    fn begin_iteration(&mut self, v: &mut dyn Sim) {
        if self.progress >= self.total {
            self.phase = Phase::Done;
            return;
        }
        self.phase = Phase::Compute;
        let at = v.now() + ms(self.sp.iter_compute_ms);
        let _ = v.schedule_timer(at, T_COMPUTE);
    }

    fn exchange(&mut self, v: &mut dyn Sim) -> Result<()> {
        self.phase = Phase::Exchange;
        self.sends = 0;
        self.recvs = 0;
        let i = self.progress;
        for side in 0..2u64 {
            let ep = if side == 0 { self.a } else { self.b };
            let off = self.slot(i);
            v.write_memory(ep.host, ep.buf + off, &stamp(self.flow(side), i).to_le_bytes())?;
            v.post_send(ep.qp, WorkRequest::send(i, ep.mr.sge(off, self.size())))?;
        }
        Ok(())
    }

    fn on_wc(&mut self, v: &mut dyn Sim, wc: WorkCompletion) -> Result<bool> {
        if !wc.status.is_ok() {
            let ev = TraceEvent::new(v.now(), TraceKind::AppError)
                .with("what", "wc")
                .with("status", wc.status.as_str())
                .with("wr_id", wc.wr_id)
                .with("qpn", wc.qp_num);
            v.emit(ev);
            self.app_errors += 1;
            return Ok(false);
        }
        if self.phase != Phase::Exchange || wc.wr_id != self.progress {
            bail!("completion for iteration {} during {:?} at {}", wc.wr_id, self.phase, self.progress);
        }
        if wc.opcode.is_recv() {
            self.recvs += 1;
        } else {
            self.sends += 1;
        }
        if self.sends == 2 && self.recvs == 2 {
            self.progress += 1;
            let ev = TraceEvent::new(v.now(), TraceKind::Iteration)
                .with("iter", self.progress)
                .with("epoch", self.progress / self.sp.iterations_per_epoch)
                .with("incarnation", self.inc);
            v.emit(ev);
            self.post_recvs(v)?;
            if self.progress.is_multiple_of(self.sp.checkpoint_interval) || self.progress == self.total {
                self.phase = Phase::Checkpoint;
                let at = v.now() + ms(self.sp.checkpoint_cost_ms);
                v.schedule_timer(at, T_CKPT)?;
            } else {
                self.begin_iteration(v);
            }
        }
        Ok(true)
    }

    /// Tears the job down and brings it back from the last checkpoint.
    fn restart(&mut self, v: &mut dyn Sim, reason: &str) -> Result<()> {
        let lost = self.progress - self.last_ckpt;
        let ev = TraceEvent::new(v.now(), TraceKind::Restart)
            .with("reason", reason)
            .with("at_iter", self.progress)
            .with("resume_iter", self.last_ckpt)
            .with("lost", lost)
            .with("incarnation", self.inc + 1);
        v.emit(ev);
        self.lost += lost;
        self.restarts += 1;
        self.inc += 1;
        self.progress = self.last_ckpt;
        self.ahead = [self.progress; 2];
        let (a, b) = open_pair(v, self.size(), 1000 + 100 * self.inc)?;
        self.a = a;
        self.b = b;
        self.phase = Phase::Restart;
        let at = v.now() + ms(self.sp.restart_cost_ms);
        v.schedule_timer(at, T_RESTART)?;
        Ok(())
    }
}

/// First RNIC of `host` whose access link is up.
fn healthy_rnic(v: &dyn Sim, host: usize) -> shift_core::simcore::RnicId {
    let topo = v.topology();
    let n = topo.hosts()[host].rnics.len();
    (0..n).map(|i| rnic(topo, host, i)).find(|&r| v.link_up(topo.access_link(r))).unwrap_or_else(|| rnic(topo, host, 0))
}

fn open_pair(v: &mut dyn Sim, size: u32, psn: u64) -> Result<(Endpoint, Endpoint)> {
    let (ra, rb) = (healthy_rnic(v, 0), healthy_rnic(v, 1));
    let len = 2 * AHEAD * u64::from(size);
    let a = open_endpoint(v, ra, AHEAD as u32, len)?;
    let b = open_endpoint(v, rb, AHEAD as u32, len)?;
    connect(v, &a, &b, psn)?;
    v.req_notify_cq(a.cq)?;
    v.req_notify_cq(b.cq)?;
    Ok((a, b))
}

pub fn run_train(v: &mut dyn Sim, sc: &Scenario) -> Result<()> {
    let Some(sp) = &sc.train else { bail!("TRAIN needs a [train] table") };
    let topo = v.topology().clone();
    let (a, b) = open_pair(v, sp.bytes_per_allreduce, 1000)?;
    let mut bg = None;
    if sp.mode == TrainMode::ShiftBusyBackup {
        let size = sp.background_msg_size.max(8);
        let len = BG_SLOTS * u64::from(size);
        let c = open_endpoint(v, rnic(&topo, 0, 1), BG_SLOTS as u32, len)?;
        let s = open_endpoint(v, rnic(&topo, 1, 1), BG_SLOTS as u32, len)?;
        connect(v, &c, &s, 5000)?;
        v.req_notify_cq(c.cq)?;
        bg = Some(Background { c, s, size, gap: us(sp.background_gap_us), posted: 0, done: 0, stopped: false });
    }
    settle(v, SETTLE);

    let t0 = v.now();
    v.install(&fault_script(sc, &topo, t0)?)?;
    let total = sp.epochs * sp.iterations_per_epoch;
    let start = TraceEvent::new(t0, TraceKind::RunStart)
        .with("workload", "Train")
        .with("mode", format!("{:?}", sp.mode))
        .with("shift", sc.shift_enabled)
        .with("seed", sc.seed)
        .with("expected", total)
        .with("iterations_per_epoch", sp.iterations_per_epoch)
        .with("checkpoint_interval", sp.checkpoint_interval);
    v.emit(start);

    let mut tr = Trainer {
        sp,
        total,
        a,
        b,
        inc: 0,
        progress: 0,
        last_ckpt: 0,
        phase: Phase::Compute,
        sends: 0,
        recvs: 0,
        ahead: [0; 2],
        planned_restart_done: false,
        restarts: 0,
        lost: 0,
        app_errors: 0,
    };
    tr.post_recvs(v)?;
    tr.begin_iteration(v);
    if let Some(bg) = bg.as_mut() {
        bg.tick(v);
    }

    let deadline = t0 + ms(sc.duration_ms);
    while tr.phase != Phase::Done {
        let Some(up) = v.next_upcall(deadline) else { break };
        match up {
            Upcall::Timer(T_COMPUTE) if tr.phase == Phase::Compute => tr.exchange(v)?,
            Upcall::Timer(T_CKPT) if tr.phase == Phase::Checkpoint => {
                tr.last_ckpt = tr.progress;
                let ev = TraceEvent::new(v.now(), TraceKind::Checkpoint).with("iter", tr.progress).with("incarnation", tr.inc);
                v.emit(ev);
                let degraded = v.on_backup(tr.a.qp) || v.on_backup(tr.b.qp);
                if sp.mode == TrainMode::ShiftBusyBackup && degraded && !tr.planned_restart_done && tr.progress < total {
                    tr.planned_restart_done = true;
                    tr.restart(v, "planned")?;
                } else {
                    tr.begin_iteration(v);
                }
            }
            Upcall::Timer(T_RESTART) if tr.phase == Phase::Restart => {
                tr.post_recvs(v)?;
                tr.begin_iteration(v);
            }
            Upcall::Timer(T_BG) => {
                if let Some(bg) = bg.as_mut() {
                    bg.tick(v);
                }
            }
            Upcall::Timer(_) => {}
            Upcall::CqEvent(cq) => {
                if bg.as_ref().is_some_and(|bg| bg.c.cq == cq) {
                    let _ = v.req_notify_cq(cq);
                    let bg = bg.as_mut().expect("checked");
                    for wc in drain(v, cq) {
                        bg.on_wc(&wc);
                    }
                    continue;
                }
                if cq != tr.a.cq && cq != tr.b.cq {
                    // a previous incarnation's queues
                    continue;
                }
                let _ = v.req_notify_cq(cq);
                let mut crashed = false;
                for wc in drain(v, cq) {
                    if !tr.on_wc(v, wc)? {
                        crashed = true;
                        break;
                    }
                }
                if crashed {
                    tr.restart(v, "failure")?;
                }
            }
        }
    }
    if let Some(bg) = bg.as_mut() {
        bg.stopped = true;
    }

    let completed = tr.progress == total;
    let mut end = TraceEvent::new(v.now(), TraceKind::RunEnd)
        .with("workload", "Train")
        .with("mode", format!("{:?}", sp.mode))
        .with("t0", t0)
        .with("expected", total)
        .with("completed", completed)
        .with("done", tr.progress)
        .with("restarts", tr.restarts)
        .with("lost", tr.lost)
        .with("app_errors", tr.app_errors)
        .with("backup_wqes", v.backup_wqes(tr.a.qp) + v.backup_wqes(tr.b.qp));
    if let Some(bg) = &bg {
        end = end.with("background_writes", bg.done);
    }
    if let Some(k) = v.shift_counters() {
        end = end.with("fallbacks", k.fallbacks).with("recoveries", k.recoveries).with("fatal", k.fatal);
    }
    v.emit(end);
    Ok(())
}

fn drain(v: &mut dyn Sim, cq: CqHandle) -> Vec<WorkCompletion> {
    let mut out = Vec::new();
    loop {
        let wcs = v.poll_cq(cq, 64);
        if wcs.is_empty() {
            return out;
        }
        out.extend(wcs);
    }
}
