use std::collections::VecDeque;

use super::endpoint::{consumes_recv, PendingFallback, RqState, Side, Sink, SinkKind, SqState};
use super::Shift;
use crate::kvstore::{decode_rkey, mr_key, KvGet};
use crate::simcore::TraceKind;
use crate::verbs::{
    CqHandle, MemoryRegion, Opcode, QpAttrs, QpHandle, QpState, RecvRequest, RemoteAddr, Result, Verbs, VerbsError, WcOpcode, WcStatus,
    WorkCompletion, WorkRequest,
};

/// Immediate of the notification that moves the peer's RECVs to its backup QP.
/// The low 16 bits carry how many RECV-consuming messages the sender had
/// posted before the rewound ones.
pub const FALLBACK_IMM: u32 = 0x5346_0000;
/// Immediate of the notification that moves the peer's RECVs back to default.
pub const RECOVERY_IMM: u32 = 0x5348_5201;
/// Like [`FALLBACK_IMM`] but for a requested switch: the peer only moves RECVs.
pub const SWITCH_IMM: u32 = 0x5348_5301;

pub(super) const T_PROBE: u64 = 2;
pub(super) const T_REMAP: u64 = 3;

/// wr_ids with these top bits are internal: `TAG | kind<<40 | gen<<32 | ep`.
const TAG: u64 = 0xffff_0000_0000_0000;
const K_SHIFT_RECV: u64 = 1;
const K_FALLBACK: u64 = 2;
const K_RECOVERY: u64 = 3;
const K_SWITCH: u64 = 4;
const K_PROBE: u64 = 5;
const K_SINK: u64 = 6;

fn tag(kind: u64, gen: u8, e: usize) -> u64 {
    TAG | kind << 40 | u64::from(gen) << 32 | e as u64
}

fn untag(wr_id: u64) -> Option<(u64, u8, usize)> {
    (wr_id & TAG == TAG).then_some(((wr_id >> 40) & 0xff, (wr_id >> 32) as u8, (wr_id & 0xffff_ffff) as usize))
}

fn is_fallback_imm(imm: u32) -> bool {
    imm & 0xffff_0000 == FALLBACK_IMM
}

fn is_notify_imm(imm: Option<u32>) -> bool {
    imm.is_some_and(|i| is_fallback_imm(i) || i == RECOVERY_IMM || i == SWITCH_IMM)
}

fn notify_wr(kind: u64, gen: u8, e: usize, imm: u32) -> WorkRequest {
    WorkRequest::write_with_imm(tag(kind, gen, e), None, RemoteAddr { addr: 0, rkey: 0 }, imm)
}

impl Shift {
    // ---- application data path ----

    pub(super) fn shift_post_send(&mut self, qp: QpHandle, wr: WorkRequest) -> Result<()> {
        self.counters.post_calls += 1;
        self.counters.post_steps += 1;
        if wr.wr_id & TAG == TAG {
            return Err(VerbsError::InvalidWorkRequest("wr_id uses the reserved internal range"));
        }
        let Some(&e) = self.ep_of_qp.get(&qp) else {
            return self.cl.post_send(qp, wr);
        };
        let rc = consumes_recv(&wr);
        let r = self.accept_send(e, qp, wr);
        if rc && r.is_ok() {
            self.eps[e].rc_posted = self.eps[e].rc_posted.wrapping_add(1);
        }
        r
    }

    fn accept_send(&mut self, e: usize, qp: QpHandle, wr: WorkRequest) -> Result<()> {
        let ep = &self.eps[e];
        if ep.fatal || (ep.sq == SqState::Default && ep.fallback.is_none() && ep.held.is_empty()) {
            if ep.fatal || self.cl.qp_state(qp) != Ok(QpState::Err) {
                return self.cl.post_send(qp, wr);
            }
            // failed but not yet polled: let the error completion drive fallback
            let cq = ep.send_cq();
            self.ingest(cq);
            let ep = &self.eps[e];
            if ep.fatal || (ep.sq == SqState::Default && ep.fallback.is_none()) {
                return self.cl.post_send(qp, wr);
            }
        }
        let ep = &self.eps[e];
        wr.validate().map_err(VerbsError::InvalidWorkRequest)?;
        if ep.fallback.is_some() || !ep.held.is_empty() {
            if ep.held.len() >= ep.init.sq_cap as usize {
                return Err(VerbsError::SendQueueFull);
            }
            self.hold(e, wr);
            return Ok(());
        }
        let keep = (ep.sq != SqState::Default).then(|| wr.clone());
        match self.route_send(e, wr) {
            Ok(Some(wr)) => {
                self.hold(e, wr);
                self.timer(self.cfg.kv_latency, T_REMAP, e);
            }
            Ok(None) => {}
            // an internal WR holds the slot; retried on the next poll
            Err(VerbsError::SendQueueFull) if keep.is_some() => self.hold(e, keep.expect("checked")),
            Err(err) => return Err(err),
        }
        Ok(())
    }

    fn hold(&mut self, e: usize, wr: WorkRequest) {
        self.eps[e].held.push_back(wr);
        self.holding.insert(e);
    }

    /// Posts by state. Returns the WR back when its keys cannot be mapped yet.
    fn route_send(&mut self, e: usize, wr: WorkRequest) -> Result<Option<WorkRequest>> {
        let ep = &self.eps[e];
        match ep.sq {
            SqState::Default => {
                self.cl.post_send(ep.app_qp, wr)?;
                Ok(None)
            }
            SqState::Fallback => Ok(self.post_on(e, Side::Backup, wr, true)?.err()),
            SqState::WaitSignaled => {
                let cur = ep.sink.as_ref().expect("sink while waiting").kind.target().other();
                let signaled = wr.signaled;
                match self.post_on(e, cur, wr, true)? {
                    Err(wr) => Ok(Some(wr)),
                    Ok(idx) => {
                        if signaled {
                            self.begin_sink(e, Some(idx))?;
                        }
                        Ok(None)
                    }
                }
            }
            SqState::WaitSinked => {
                let target = ep.sink.as_ref().expect("sink while waiting").kind.target();
                let orig = wr.clone();
                match self.post_on(e, target, wr, false)? {
                    Err(wr) => Ok(Some(wr)),
                    Ok(_) => {
                        self.eps[e].sink.as_mut().expect("sink").deferred.push(orig);
                        Ok(None)
                    }
                }
            }
        }
    }

    /// Posts a default-keyed WR on one side; `Ok(Err(wr))` if unmappable yet.
    fn post_on(&mut self, e: usize, side: Side, wr: WorkRequest, ring: bool) -> Result<std::result::Result<u64, WorkRequest>> {
        let qp = self.eps[e].qp(side).ok_or(VerbsError::InvalidHandle("backup qp"))?;
        let wr = match side {
            Side::Default => wr,
            Side::Backup => match self.remap_send(e, &wr) {
                Some(w) => w,
                None => return Ok(Err(wr)),
            },
        };
        Ok(Ok(self.cl.post_send_ext(qp, wr, ring)?))
    }

    pub(super) fn shift_post_recv(&mut self, qp: QpHandle, wr: RecvRequest) -> Result<()> {
        self.counters.post_calls += 1;
        self.counters.post_steps += 1;
        if wr.wr_id & TAG == TAG {
            return Err(VerbsError::InvalidWorkRequest("wr_id uses the reserved internal range"));
        }
        let Some(&e) = self.ep_of_qp.get(&qp) else {
            return self.cl.post_recv(qp, wr);
        };
        let cap = u32::try_from(wr.capacity()).unwrap_or(u32::MAX);
        self.eps[e].max_recv = self.eps[e].max_recv.max(cap);
        if self.eps[e].rq == RqState::Default && self.cl.qp_state(qp) == Ok(QpState::Err) {
            let cq = self.eps[e].send_cq();
            self.ingest(cq);
        }
        match self.eps[e].rq {
            RqState::Default => self.cl.post_recv(qp, wr),
            RqState::Fallback => {
                let b = self.eps[e].backup_qp.ok_or(VerbsError::InvalidHandle("backup qp"))?;
                let wr = self.remap_recv(e, wr, Side::Backup);
                if !self.eps[e].early.is_empty() {
                    self.take_early(e, wr)?;
                    self.ensure_shift_recvs(e);
                    return Ok(());
                }
                if self.eps[e].shift_recv[Side::Backup.idx()] {
                    self.withdraw_backup_shift_recv(e);
                }
                if self.eps[e].spill.is_empty() && self.eps[e].unabsorbed == 0 {
                    return self.cl.post_recv(b, wr);
                }
                if self.eps[e].spill.len() >= self.eps[e].init.rq_cap as usize {
                    return Err(VerbsError::RecvQueueFull);
                }
                self.eps[e].spill.push_back(wr);
                self.drain_spill(e);
                Ok(())
            }
        }
    }

    pub(super) fn shift_poll_cq(&mut self, cq: CqHandle, max: usize) -> Vec<WorkCompletion> {
        self.counters.poll_calls += 1;
        if !self.cqs.contains_key(&cq) {
            return self.cl.poll_cq(cq, max);
        }
        self.ingest(cq);
        self.flush_holding();
        let buf = &mut self.cqs.get_mut(&cq).expect("wrapped").buffer;
        let n = max.min(buf.len());
        buf.drain(..n).collect()
    }

    // ---- completion intake ----

    /// Moves every completion of both underlying CQs into the wrapper,
    /// acting on internal and error completions on the way.
    pub(super) fn ingest(&mut self, app_cq: CqHandle) {
        self.ingest_side(app_cq, Side::Backup);
        self.ingest_side(app_cq, Side::Default);
    }

    fn ingest_side(&mut self, app_cq: CqHandle, side: Side) {
        let Some(c) = self.cluster_cq(app_cq, side) else { return };
        // one at a time: handlers may drain other CQs re-entrantly
        loop {
            let Some(wc) = self.cl.poll_cq(c, 1).pop() else {
                self.counters.poll_steps += 1;
                return;
            };
            self.classify(app_cq, side, wc);
        }
    }

    pub(super) fn service(&mut self, app_cq: CqHandle) {
        self.ingest(app_cq);
        self.rearm(app_cq);
        self.ingest(app_cq);
        self.flush_holding();
    }

    /// Arms the underlying CQs someone is waiting on.
    pub(super) fn rearm(&mut self, app_cq: CqHandle) {
        let Some(w) = self.cqs.get(&app_cq) else { return };
        let app = w.app_armed;
        for side in [Side::Default, Side::Backup] {
            let Some(c) = self.cluster_cq(app_cq, side) else { continue };
            if app || self.interest(app_cq, side) {
                let _ = self.cl.req_notify_cq(c);
            }
        }
    }

    fn interest(&self, app_cq: CqHandle, side: Side) -> bool {
        let i = side.idx();
        self.eps.iter().any(|ep| {
            (ep.recv_cq() == app_cq && ep.shift_recv[i])
                || (ep.send_cq() == app_cq && ep.internal_sends[i] > 0)
                || (ep.send_cq() == app_cq
                    && ep.sink.as_ref().is_some_and(|s| s.marker.is_some() && !s.notify_rung && s.kind.target() != side))
        })
    }

    fn classify(&mut self, app_cq: CqHandle, side: Side, mut wc: WorkCompletion) {
        self.counters.wcs_seen += 1;
        if !wc.status.is_ok() {
            let ev = self
                .event(TraceKind::WcPolled)
                .with("qpn", wc.qp_num)
                .with("wr_id", wc.wr_id)
                .with("status", wc.status.as_str());
            self.trace(ev);
        }
        if let Some((kind, gen, e)) = untag(wc.wr_id) {
            self.on_internal(kind, gen, e, side, wc);
            return;
        }
        let Some(&(e, qside)) = self.ep_of_qpn.get(&wc.qp_num) else {
            self.deliver(app_cq, wc);
            return;
        };
        if wc.opcode == WcOpcode::RecvWithImm && wc.byte_len == 0 && is_notify_imm(wc.imm) {
            // a notification landed on an application RECV
            self.restore_recv(e, qside, wc.wqe_index);
            self.on_notify(e, wc.imm.expect("checked"));
            return;
        }
        if !wc.status.is_ok() && !wc.opcode.is_recv() {
            let ep = &self.eps[e];
            match qside {
                Side::Default => {
                    if wc.status == WcStatus::RetryExcErr
                        && !ep.fatal
                        && ep.fallback.is_none()
                        && ep.sq == SqState::Default
                    {
                        let qp = ep.app_qp;
                        let post = self.cl.sq_indices(qp).map_or(wc.wqe_index, |i| i.post);
                        let outstanding = (wc.wqe_index..post)
                            .filter_map(|i| self.cl.send_wqe_at(qp, i))
                            .map(|w| w.wr)
                            .filter(|w| untag(w.wr_id).is_none())
                            .collect();
                        self.start_fallback(e, outstanding, Some(wc));
                        return;
                    }
                }
                Side::Backup => match wc.status {
                    WcStatus::RnrRetryExcErr => {
                        let ev = self
                            .event(TraceKind::CornerCase)
                            .with("qpn", ep.app_qpn)
                            .with("wr_id", wc.wr_id)
                            .with("status", wc.status.as_str());
                        self.trace(ev);
                    }
                    WcStatus::RetryExcErr => self.fatal(e, "backup path failed", None),
                    _ => {}
                },
            }
        }
        if qside == Side::Backup {
            wc.qp_num = self.eps[e].app_qpn;
        }
        if wc.status.is_ok() && wc.opcode.is_recv() {
            self.eps[e].rc_received = self.eps[e].rc_received.wrapping_add(1);
            if qside == Side::Backup && self.eps[e].rq == RqState::Fallback {
                self.ensure_shift_recvs(e);
            }
        }
        if wc.status.is_ok() && !wc.opcode.is_recv() {
            let hit = self.eps[e].sink.as_ref().is_some_and(|s| {
                s.marker == Some(wc.wqe_index) && !s.notify_rung && s.kind.target().other() == qside
            });
            if hit {
                self.ring_notify(e);
            }
        }
        self.deliver(app_cq, wc);
    }

    fn on_internal(&mut self, kind: u64, gen: u8, e: usize, side: Side, wc: WorkCompletion) {
        if e >= self.eps.len() || self.eps[e].gen[side.idx()] != gen {
            return;
        }
        let i = side.idx();
        match kind {
            K_SHIFT_RECV => {
                self.eps[e].shift_recv[i] = false;
                match wc.imm {
                    Some(imm) if wc.opcode == WcOpcode::RecvWithImm && is_notify_imm(Some(imm)) => self.on_notify(e, imm),
                    _ if side == Side::Backup && wc.status.is_ok() && wc.opcode.is_recv() => self.keep_early(e, wc),
                    _ => {
                        let qpn = self.eps[e].app_qpn;
                        let ev = self.event(TraceKind::Warning).with("what", "unexpected message on internal RECV").with("qpn", qpn);
                        self.trace(ev);
                    }
                }
                self.ensure_shift_recvs(e);
            }
            K_FALLBACK => {
                self.eps[e].internal_sends[i] = self.eps[e].internal_sends[i].saturating_sub(1);
                if wc.status.is_ok() {
                    if let Some(pf) = self.eps[e].fallback.as_mut() {
                        pf.notified = true;
                        self.complete_fallback(e);
                    }
                } else {
                    let err = self.eps[e].fallback.take().and_then(|pf| pf.err_wc);
                    self.fatal(e, "fallback notification failed", err);
                }
            }
            K_RECOVERY | K_SWITCH => {
                self.eps[e].internal_sends[i] = self.eps[e].internal_sends[i].saturating_sub(1);
                if self.eps[e].sink.is_none() {
                    return;
                }
                if wc.status.is_ok() {
                    self.finish_sink(e);
                } else {
                    self.abort_sink(e);
                }
            }
            K_SINK => {
                let qpn = self.eps[e].app_qpn;
                let ev = self.event(TraceKind::CornerCase).with("qpn", qpn).with("action", "absorbed").with("status", wc.status.as_str());
                self.trace(ev);
                self.drain_spill(e);
                self.ensure_shift_recvs(e);
            }
            K_PROBE => {
                let ep = &mut self.eps[e];
                ep.internal_sends[i] = ep.internal_sends[i].saturating_sub(1);
                ep.probe_in_flight = false;
                let qpn = ep.app_qpn;
                let ev = self.event(TraceKind::Probe).with("qpn", qpn).with("status", wc.status.as_str());
                self.trace(ev);
                let ep = &self.eps[e];
                if ep.sq != SqState::Fallback || ep.pinned || ep.fatal || ep.fallback.is_some() {
                    return;
                }
                if wc.status.is_ok() {
                    self.eps[e].sink =
                        Some(Sink { kind: SinkKind::Recovery, marker: None, notify_idx: None, notify_rung: false, deferred: Vec::new() });
                    self.set_sq(e, SqState::WaitSignaled);
                } else {
                    self.reset_side(e, Side::Default);
                    self.schedule_probe(e);
                }
            }
            _ => {}
        }
    }

    // ---- fallback ----

    fn start_fallback(&mut self, e: usize, outstanding: Vec<WorkRequest>, err_wc: Option<WorkCompletion>) {
        let ep = &self.eps[e];
        let Some(b) = ep.backup_qp.filter(|_| ep.backup_ready) else {
            self.fatal(e, "no usable backup QP", err_wc);
            return;
        };
        let qp = ep.app_qp;
        if self.cl.qp_state(qp).is_ok_and(|s| s != QpState::Err) {
            let _ = self.cl.modify_qp(qp, QpState::Err, &QpAttrs::default());
        }
        if self.eps[e].rq == RqState::Default {
            self.move_recvs(e, Side::Default, Side::Backup);
            self.set_rq(e, RqState::Fallback);
        }
        let ep = &self.eps[e];
        let unsent = outstanding.iter().chain(&ep.held).filter(|w| consumes_recv(w)).count() as u16;
        let imm = FALLBACK_IMM | u32::from(ep.rc_posted.wrapping_sub(unsent));
        self.eps[e].fallback = Some(PendingFallback { outstanding, err_wc, notified: false, remap_retries: 0 });
        let gen = self.eps[e].gen[Side::Backup.idx()];
        if self.cl.post_send(b, notify_wr(K_FALLBACK, gen, e, imm)).is_err() {
            let err = self.eps[e].fallback.take().and_then(|pf| pf.err_wc);
            self.fatal(e, "cannot post fallback notification", err);
            return;
        }
        self.eps[e].internal_sends[Side::Backup.idx()] += 1;
        self.counters.notifies_sent += 1;
        let qpn = self.eps[e].app_qpn;
        let ev = self.event(TraceKind::Notify).with("qpn", qpn).with("notify", "FALLBACK").with("dir", "sent");
        self.trace(ev);
        let cq = self.eps[e].send_cq();
        self.rearm(cq);
    }

    /// The peer knows; copy the unfinished WRs onto the backup and go.
    fn complete_fallback(&mut self, e: usize) {
        let Some(pf) = self.eps[e].fallback.as_ref() else { return };
        let mut remapped = Vec::with_capacity(pf.outstanding.len());
        let outstanding = pf.outstanding.clone();
        for wr in &outstanding {
            match self.remap_send(e, wr) {
                Some(w) => remapped.push(w),
                None => {
                    let pf = self.eps[e].fallback.as_mut().expect("pending");
                    pf.remap_retries += 1;
                    if pf.remap_retries > self.cfg.remap_retries {
                        let err = self.eps[e].fallback.take().and_then(|pf| pf.err_wc);
                        self.fatal(e, "key mapping unavailable", err);
                    } else {
                        self.timer(self.cfg.kv_latency, T_REMAP, e);
                    }
                    return;
                }
            }
        }
        let b = self.eps[e].backup_qp.expect("backup exists");
        let n = remapped.len();
        for w in remapped {
            if self.cl.post_send_ext(b, w, false).is_err() {
                let err = self.eps[e].fallback.take().and_then(|pf| pf.err_wc);
                self.fatal(e, "backup send queue rejected rewind", err);
                return;
            }
        }
        if let Ok(idx) = self.cl.sq_indices(b) {
            let _ = self.cl.ring_sq_doorbell(b, idx.post);
        }
        self.counters.rewound_sends += n as u64;
        let qpn = self.eps[e].app_qpn;
        let ev = self.event(TraceKind::Rewind).with("qpn", qpn).with("queue", "SEND").with("to", "backup").with("count", n);
        self.trace(ev);
        self.eps[e].fallback = None;
        self.counters.fallbacks += 1;
        self.set_sq(e, SqState::Fallback);
        self.reset_side(e, Side::Default);
        self.schedule_probe(e);
        self.flush_held(e);
    }

    fn fatal(&mut self, e: usize, why: &str, err_wc: Option<WorkCompletion>) {
        let ep = &mut self.eps[e];
        ep.fatal = true;
        ep.held.clear();
        let (qpn, cq) = (ep.app_qpn, ep.send_cq());
        self.counters.fatal += 1;
        let ev = self.event(TraceKind::Fatal).with("qpn", qpn).with("reason", why);
        self.trace(ev);
        if let Some(wc) = err_wc {
            self.deliver(cq, wc);
        }
    }

    /// Brings one side back to RTS with its captured attributes.
    fn reset_side(&mut self, e: usize, side: Side) {
        let ep = &mut self.eps[e];
        let Some(qp) = ep.qp(side) else { return };
        let attrs = match side {
            Side::Default => ep.snapshot,
            Side::Backup => ep.backup_attrs,
        };
        let i = side.idx();
        ep.gen[i] = ep.gen[i].wrapping_add(1);
        ep.shift_recv[i] = false;
        ep.internal_sends[i] = 0;
        if side == Side::Default {
            ep.probe_in_flight = false;
        }
        if self.cl.qp_state(qp).is_ok_and(|s| s != QpState::Err) {
            let _ = self.cl.modify_qp(qp, QpState::Err, &attrs);
        }
        for to in [QpState::Reset, QpState::Init, QpState::Rtr, QpState::Rts] {
            if let Err(err) = self.cl.modify_qp(qp, to, &attrs) {
                let ev = self.event(TraceKind::Warning).with("what", "QP reset failed").with("error", err.to_string());
                self.trace(ev);
                return;
            }
        }
        self.ensure_shift_recvs(e);
    }

    fn schedule_probe(&mut self, e: usize) {
        let ep = &mut self.eps[e];
        if ep.probe_scheduled || ep.pinned || ep.fatal {
            return;
        }
        ep.probe_scheduled = true;
        self.timer(self.cfg.probe_interval, T_PROBE, e);
    }

    pub(super) fn probe_timer(&mut self, e: usize) {
        let ep = &mut self.eps[e];
        ep.probe_scheduled = false;
        if ep.sq != SqState::Fallback || ep.pinned || ep.fatal || ep.probe_in_flight || ep.fallback.is_some() {
            return;
        }
        let qp = ep.app_qp;
        if self.cl.qp_state(qp).ok() != Some(QpState::Rts) {
            self.reset_side(e, Side::Default);
        }
        let gen = self.eps[e].gen[Side::Default.idx()];
        let probe = WorkRequest {
            wr_id: tag(K_PROBE, gen, e),
            opcode: Opcode::Write,
            sgl: Vec::new(),
            remote: Some(RemoteAddr { addr: 0, rkey: 0 }),
            imm: None,
            signaled: true,
        };
        if self.cl.post_send(qp, probe).is_err() {
            self.schedule_probe(e);
            return;
        }
        let ep = &mut self.eps[e];
        ep.probe_in_flight = true;
        ep.internal_sends[Side::Default.idx()] += 1;
        let (qpn, cq) = (ep.app_qpn, ep.send_cq());
        self.counters.probes += 1;
        let ev = self.event(TraceKind::Probe).with("qpn", qpn).with("status", "SENT");
        self.trace(ev);
        self.rearm(cq);
    }

    pub(super) fn remap_timer(&mut self, e: usize) {
        if self.eps[e].fallback.as_ref().is_some_and(|pf| pf.notified) {
            self.complete_fallback(e);
        }
        self.flush_held(e);
    }

    // ---- drain-then-switch (recovery and requested switches) ----

    /// The drain marker is on the current QP: park a notification on the
    /// target QP. With no marker the current QP is already idle.
    fn begin_sink(&mut self, e: usize, marker: Option<u64>) -> Result<()> {
        let ep = &self.eps[e];
        let sink = ep.sink.as_ref().expect("sink");
        let target = sink.kind.target();
        let (kind, imm) = match sink.kind {
            SinkKind::ToBackup => (K_SWITCH, SWITCH_IMM),
            SinkKind::Recovery | SinkKind::ToDefault => (K_RECOVERY, RECOVERY_IMM),
        };
        let qp = ep.qp(target).ok_or(VerbsError::InvalidHandle("backup qp"))?;
        let gen = ep.gen[target.idx()];
        let idx = self.cl.post_send_ext(qp, notify_wr(kind, gen, e, imm), marker.is_none())?;
        let ep = &mut self.eps[e];
        ep.internal_sends[target.idx()] += 1;
        let sink = ep.sink.as_mut().expect("sink");
        sink.marker = marker;
        sink.notify_idx = Some(idx);
        sink.notify_rung = marker.is_none();
        let cq = ep.send_cq();
        self.counters.notifies_sent += 1;
        self.set_sq(e, SqState::WaitSinked);
        self.rearm(cq);
        Ok(())
    }

    /// The current QP has drained: let the notification go, nothing else.
    fn ring_notify(&mut self, e: usize) {
        let ep = &mut self.eps[e];
        let sink = ep.sink.as_mut().expect("sink");
        let target = sink.kind.target();
        let Some(idx) = sink.notify_idx else { return };
        sink.notify_rung = true;
        let qp = ep.qp(target).expect("target exists");
        let _ = self.cl.ring_sq_doorbell(qp, idx + 1);
        let qpn = self.eps[e].app_qpn;
        let ev = self
            .event(TraceKind::Notify)
            .with("qpn", qpn)
            .with("notify", if target == Side::Default { "RECOVERY" } else { "SWITCH" })
            .with("dir", "sent");
        self.trace(ev);
    }

    fn finish_sink(&mut self, e: usize) {
        let sink = self.eps[e].sink.take().expect("sink");
        let target = sink.kind.target();
        let qp = self.eps[e].qp(target).expect("target exists");
        if let Ok(idx) = self.cl.sq_indices(qp) {
            let _ = self.cl.ring_sq_doorbell(qp, idx.post);
        }
        self.eps[e].pinned = sink.kind == SinkKind::ToBackup;
        if sink.kind == SinkKind::Recovery {
            self.counters.recoveries += 1;
        }
        self.set_sq(e, if target == Side::Default { SqState::Default } else { SqState::Fallback });
        self.flush_held(e);
    }

    fn abort_sink(&mut self, e: usize) {
        let sink = self.eps[e].sink.take().expect("sink");
        let qpn = self.eps[e].app_qpn;
        let ev = self.event(TraceKind::Warning).with("what", "switch notification failed").with("qpn", qpn);
        self.trace(ev);
        match sink.kind.target() {
            Side::Default => {
                // path flapped again: the parked WRs go to the backup
                self.eps[e].pinned = false;
                self.start_fallback(e, sink.deferred, None);
            }
            Side::Backup => {
                self.reset_side(e, Side::Backup);
                let qp = self.eps[e].app_qp;
                for wr in sink.deferred {
                    if self.cl.post_send(qp, wr).is_err() {
                        self.fatal(e, "cannot repost after aborted switch", None);
                        return;
                    }
                }
                self.set_sq(e, SqState::Default);
            }
        }
    }

    /// Requests a move of `qp`'s send traffic to `to` while traffic runs.
    /// Completes asynchronously; watch [`Shift::endpoint_state`].
    pub fn proactive_switch(&mut self, qp: QpHandle, to: Side) -> Result<()> {
        let e = *self.ep_of_qp.get(&qp).ok_or(VerbsError::InvalidHandle("qp"))?;
        let ep = &self.eps[e];
        if ep.fatal || ep.fallback.is_some() || ep.sink.is_some() || !ep.held.is_empty() {
            return Err(VerbsError::InvalidWorkRequest("endpoint is already switching"));
        }
        let kind = match (to, ep.sq) {
            (Side::Backup, SqState::Default) => {
                if !ep.backup_ready {
                    return Err(VerbsError::InvalidWorkRequest("backup QP not ready"));
                }
                SinkKind::ToBackup
            }
            (Side::Default, SqState::Fallback) => {
                if self.cl.qp_state(ep.app_qp).ok() != Some(QpState::Rts) {
                    self.reset_side(e, Side::Default);
                }
                SinkKind::ToDefault
            }
            _ => return Ok(()),
        };
        self.eps[e].sink = Some(Sink { kind, marker: None, notify_idx: None, notify_rung: false, deferred: Vec::new() });
        self.set_sq(e, SqState::WaitSignaled);
        let cur = self.eps[e].qp(kind.target().other()).expect("current exists");
        if self.cl.sq_idle(cur) {
            self.begin_sink(e, None)?;
        }
        Ok(())
    }

    // ---- receive side ----

    fn on_notify(&mut self, e: usize, imm: u32) {
        let qpn = self.eps[e].app_qpn;
        let fallback = is_fallback_imm(imm);
        let name = match imm {
            _ if fallback => "FALLBACK",
            RECOVERY_IMM => "RECOVERY",
            _ => "SWITCH",
        };
        let ev = self.event(TraceKind::Notify).with("qpn", qpn).with("notify", name).with("dir", "recv");
        self.trace(ev);
        let rcq = self.eps[e].recv_cq();
        match imm {
            _ if fallback || imm == SWITCH_IMM => {
                // completions the default QP finished first go out first
                self.ingest_side(rcq, Side::Default);
                if self.eps[e].rq == RqState::Default {
                    self.move_recvs(e, Side::Default, Side::Backup);
                    self.set_rq(e, RqState::Fallback);
                }
                if fallback {
                    let before = (imm & 0xffff) as u16;
                    self.absorb_duplicates(e, self.eps[e].rc_received.wrapping_sub(before));
                    let ep = &self.eps[e];
                    let quiet = ep.fallback.is_none() && ep.sink.is_none() && ep.held.is_empty() && !ep.fatal;
                    match ep.sq {
                        SqState::Default if quiet && self.cl.sq_idle(ep.app_qp) => {
                            self.start_fallback(e, Vec::new(), None);
                        }
                        // the peer reset its default QP; follow so PSNs line up again
                        SqState::Fallback | SqState::WaitSignaled if quiet && !ep.pinned => {
                            self.reset_side(e, Side::Default);
                            if self.eps[e].sq == SqState::Fallback {
                                self.schedule_probe(e);
                            }
                        }
                        _ => {}
                    }
                }
            }
            _ => {
                self.ingest_side(rcq, Side::Backup);
                if self.eps[e].rq == RqState::Fallback {
                    self.move_recvs(e, Side::Backup, Side::Default);
                    self.set_rq(e, RqState::Default);
                }
            }
        }
        self.ensure_shift_recvs(e);
    }

    /// Internal RECV on the backup while receiving on default, and vice versa.
    pub(super) fn ensure_shift_recvs(&mut self, e: usize) {
        let ep = &self.eps[e];
        if !ep.backup_ready {
            return;
        }
        let side = match ep.rq {
            RqState::Default => Side::Backup,
            RqState::Fallback => Side::Default,
        };
        if ep.rq == RqState::Fallback && !ep.shift_recv[Side::Backup.idx()] && ep.spill.is_empty() && ep.unabsorbed == 0 {
            // An aborted recovery re-sends FALLBACK on the backup. With no
            // application RECVs there it would hit RNR, so park one here
            // until the application posts again.
            let empty = ep.backup_qp.and_then(|b| self.cl.rq_indices(b).ok()).is_some_and(|i| i.post == i.consume);
            if empty {
                self.post_shift_recv(e, Side::Backup);
            }
        }
        let ep = &self.eps[e];
        if ep.shift_recv[side.idx()] {
            return;
        }
        self.post_shift_recv(e, side);
    }

    fn post_shift_recv(&mut self, e: usize, side: Side) {
        let parked = side == Side::Backup && self.eps[e].rq == RqState::Fallback;
        let sgl = match parked {
            true => match self.scratch(e) {
                Some(mr) => vec![mr.sge(0, mr.len as u32)],
                None => return,
            },
            false => Vec::new(),
        };
        let ep = &self.eps[e];
        let Some(qp) = ep.qp(side) else { return };
        if !matches!(self.cl.qp_state(qp), Ok(QpState::Rtr | QpState::Rts)) {
            return;
        }
        let wr = RecvRequest { wr_id: tag(K_SHIFT_RECV, ep.gen[side.idx()], e), sgl };
        if self.cl.post_recv(qp, wr).is_ok() {
            self.eps[e].shift_recv[side.idx()] = true;
            let cq = self.eps[e].recv_cq();
            self.rearm(cq);
        }
    }

    fn keep_early(&mut self, e: usize, mut wc: WorkCompletion) {
        let ep = &self.eps[e];
        let Some(mr) = ep.scratch else { return };
        let Ok(data) = self.cl.read_memory(ep.host, mr.addr, wc.byte_len) else { return };
        wc.qp_num = ep.app_qpn;
        let ep = &mut self.eps[e];
        ep.rc_received = ep.rc_received.wrapping_add(1);
        ep.early.push_back((data, wc));
    }

    /// Completes `wr` with the oldest early message instead of posting it.
    fn take_early(&mut self, e: usize, wr: RecvRequest) -> Result<()> {
        let (data, mut wc) = self.eps[e].early.pop_front().expect("early message");
        wc.wr_id = wr.wr_id;
        if data.len() as u64 > wr.capacity() {
            wc.status = WcStatus::GeneralErr;
        } else {
            let host = self.eps[e].host;
            let mut rest = &data[..];
            for sge in &wr.sgl {
                let n = rest.len().min(sge.len as usize);
                self.cl.write_memory(host, sge.addr, &rest[..n])?;
                rest = &rest[n..];
            }
        }
        let cq = self.eps[e].recv_cq();
        self.deliver(cq, wc);
        Ok(())
    }

    /// Takes the parked backup RECV out so application SENDs never land on it.
    fn withdraw_backup_shift_recv(&mut self, e: usize) {
        self.eps[e].shift_recv[Side::Backup.idx()] = false;
        let Some(b) = self.eps[e].backup_qp else { return };
        let Ok(wqes) = self.cl.take_outstanding_recvs(b) else { return };
        for w in wqes {
            if untag(w.wr.wr_id).is_some_and(|(kind, ..)| kind == K_SHIFT_RECV) {
                continue;
            }
            if self.cl.post_recv_ext(b, w.wr, false).is_err() {
                self.fatal(e, "receive queue rejected repost", None);
                return;
            }
        }
        if let Ok(idx) = self.cl.rq_indices(b) {
            let _ = self.cl.update_rq_doorbell_record(b, idx.post);
        }
    }

    /// Moves every unconsumed application RECV from one QP to the other.
    fn move_recvs(&mut self, e: usize, from: Side, to: Side) {
        let (Some(fq), Some(tq)) = (self.eps[e].qp(from), self.eps[e].qp(to)) else { return };
        let Ok(wqes) = self.cl.take_outstanding_recvs(fq) else { return };
        let spilled = if from == Side::Backup {
            self.eps[e].unabsorbed = 0;
            std::mem::take(&mut self.eps[e].spill)
        } else {
            Default::default()
        };
        let mut n = 0u64;
        for wr in wqes.into_iter().map(|w| w.wr).chain(spilled) {
            if let Some((kind, ..)) = untag(wr.wr_id) {
                // unused scratch RECVs are dropped with the move
                if kind == K_SHIFT_RECV {
                    self.eps[e].shift_recv[from.idx()] = false;
                }
                continue;
            }
            let wr = self.remap_recv(e, wr, to);
            if self.cl.post_recv_ext(tq, wr, false).is_err() {
                self.fatal(e, "receive queue rejected rewind", None);
                return;
            }
            n += 1;
        }
        if let Ok(idx) = self.cl.rq_indices(tq) {
            let _ = self.cl.update_rq_doorbell_record(tq, idx.post);
        }
        self.counters.rewound_recvs += n;
        let qpn = self.eps[e].app_qpn;
        let ev = self
            .event(TraceKind::Rewind)
            .with("qpn", qpn)
            .with("queue", "RECV")
            .with("to", if to == Side::Backup { "backup" } else { "default" })
            .with("count", n);
        self.trace(ev);
    }

    /// The peer is about to resend `dups` messages this side already
    /// consumed. Puts that many scratch RECVs ahead of the application's on
    /// the backup so the copies land there.
    fn absorb_duplicates(&mut self, e: usize, dups: u16) {
        if dups == 0 {
            return;
        }
        let ep = &self.eps[e];
        let qpn = ep.app_qpn;
        if !self.cfg.absorb_duplicates || u32::from(dups) > ep.init.rq_cap {
            let ev = self.event(TraceKind::CornerCase).with("qpn", qpn).with("action", "not_absorbed").with("count", u32::from(dups));
            self.trace(ev);
            // Copies must not land in application RECVs. Hold those back so
            // the copies meet RNR and the sender sees the error.
            if let Some(b) = self.eps[e].backup_qp {
                if let Ok(rest) = self.cl.take_outstanding_recvs(b) {
                    let mut held: VecDeque<_> = rest
                        .into_iter()
                        .map(|w| w.wr)
                        .filter(|wr| untag(wr.wr_id).is_none_or(|(kind, ..)| kind != K_SHIFT_RECV))
                        .collect();
                    held.append(&mut self.eps[e].spill);
                    self.eps[e].spill = held;
                }
            }
            self.eps[e].shift_recv[Side::Backup.idx()] = false;
            self.eps[e].unabsorbed = self.eps[e].unabsorbed.wrapping_add(dups);
            return;
        }
        let (Some(b), gen) = (ep.backup_qp, ep.gen[Side::Backup.idx()]) else { return };
        let Some(mr) = self.scratch(e) else {
            self.fatal(e, "no scratch buffer for duplicate messages", None);
            return;
        };
        let Ok(rest) = self.cl.take_outstanding_recvs(b) else { return };
        let sink = RecvRequest { wr_id: tag(K_SINK, gen, e), sgl: vec![mr.sge(0, mr.len as u32)] };
        for wr in std::iter::repeat_n(sink, dups.into()) {
            if self.cl.post_recv_ext(b, wr, false).is_err() {
                self.fatal(e, "receive queue overflow while absorbing duplicates", None);
                return;
            }
        }
        // what no longer fits waits for the sinks to complete
        let mut spill: VecDeque<_> = rest
            .into_iter()
            .map(|w| w.wr)
            .filter(|wr| untag(wr.wr_id).is_none_or(|(kind, ..)| kind != K_SHIFT_RECV))
            .collect();
        self.eps[e].shift_recv[Side::Backup.idx()] = false;
        spill.append(&mut self.eps[e].spill);
        self.eps[e].spill = spill;
        self.drain_spill(e);
        if let Ok(idx) = self.cl.rq_indices(b) {
            let _ = self.cl.update_rq_doorbell_record(b, idx.post);
        }
        let ev = self
            .event(TraceKind::CornerCase)
            .with("qpn", qpn)
            .with("action", "absorb")
            .with("count", u32::from(dups))
            .with("host", self.eps[e].host.0)
            .with("addr", mr.addr)
            .with("len", mr.len);
        self.trace(ev);
    }

    fn drain_spill(&mut self, e: usize) {
        let Some(b) = self.eps[e].backup_qp else { return };
        if self.eps[e].unabsorbed > 0 {
            return;
        }
        let mut moved = false;
        while let Some(wr) = self.eps[e].spill.front().cloned() {
            if self.cl.post_recv_ext(b, wr, false).is_err() {
                break;
            }
            self.eps[e].spill.pop_front();
            moved = true;
        }
        if moved {
            if let Ok(idx) = self.cl.rq_indices(b) {
                let _ = self.cl.update_rq_doorbell_record(b, idx.post);
            }
        }
    }

    fn scratch(&mut self, e: usize) -> Option<MemoryRegion> {
        let ep = &self.eps[e];
        let need = u64::from(ep.max_recv.max(1));
        if let Some(mr) = ep.scratch.filter(|m| m.len >= need) {
            return Some(mr);
        }
        let (host, b, old) = (ep.host, ep.backup_qp?, ep.scratch);
        let pd = self.cl.pd_of_qp(b).ok()?;
        let addr = self.cl.alloc_buffer(host, need).ok()?;
        let mr = self.cl.reg_mr(pd, addr, need).ok()?;
        if let Some(old) = old {
            let _ = self.cl.dereg_mr(&old);
        }
        self.eps[e].scratch = Some(mr);
        Some(mr)
    }

    /// Puts a RECV that a notification consumed back at the queue head.
    fn restore_recv(&mut self, e: usize, side: Side, index: u64) {
        let Some(qp) = self.eps[e].qp(side) else { return };
        let Some(w) = self.cl.recv_wqe_at(qp, index) else { return };
        let Ok(rest) = self.cl.take_outstanding_recvs(qp) else { return };
        for wr in std::iter::once(w.wr).chain(rest.into_iter().map(|r| r.wr)) {
            let _ = self.cl.post_recv_ext(qp, wr, false);
        }
        if let Ok(idx) = self.cl.rq_indices(qp) {
            let _ = self.cl.update_rq_doorbell_record(qp, idx.post);
        }
    }

    // ---- key translation ----

    pub(super) fn remap_send(&mut self, e: usize, wr: &WorkRequest) -> Option<WorkRequest> {
        let ep = &self.eps[e];
        let (rnic, host) = (ep.default_rnic, ep.host);
        let peer = ep.snapshot.remote.and_then(|r| r.gid.rnic()).map(|r| self.cl.host_of(r));
        let mut w = wr.clone();
        for s in &mut w.sgl {
            s.lkey = self.mr_fwd.get(&(rnic, s.lkey))?.lkey;
        }
        let zero_write = matches!(w.opcode, Opcode::Write | Opcode::WriteWithImm) && w.is_empty();
        if let (Some(r), false) = (w.remote.as_mut(), zero_write) {
            let now = self.cl.now();
            let KvGet::Value(v) = self.kv.get(host, &mr_key(peer?, r.rkey), now) else { return None };
            r.rkey = decode_rkey(&v)?;
        }
        Some(w)
    }

    fn remap_recv(&self, e: usize, mut wr: RecvRequest, to: Side) -> RecvRequest {
        let ep = &self.eps[e];
        for s in &mut wr.sgl {
            let mapped = match to {
                Side::Backup => self.mr_fwd.get(&(ep.default_rnic, s.lkey)).map(|m| m.lkey),
                Side::Default => self.lkey_rev.get(&(ep.backup_rnic, s.lkey)).copied(),
            };
            // unmapped keys stay put and fail loudly at placement
            if let Some(k) = mapped {
                s.lkey = k;
            }
        }
        wr
    }

    // ---- helpers ----

    fn flush_held(&mut self, e: usize) {
        while self.eps[e].fallback.is_none() && !self.eps[e].fatal {
            let Some(wr) = self.eps[e].held.pop_front() else { break };
            let keep = wr.clone();
            match self.route_send(e, wr) {
                Ok(None) => {}
                Ok(Some(wr)) => {
                    self.eps[e].held.push_front(wr);
                    self.timer(self.cfg.kv_latency, T_REMAP, e);
                    break;
                }
                Err(VerbsError::SendQueueFull) => {
                    // retried on the next poll
                    self.eps[e].held.push_front(keep);
                    break;
                }
                Err(err) => {
                    let qpn = self.eps[e].app_qpn;
                    let ev = self.event(TraceKind::Warning).with("what", "held WR rejected").with("qpn", qpn).with("error", err.to_string());
                    self.trace(ev);
                }
            }
        }
        if self.eps[e].held.is_empty() {
            self.holding.remove(&e);
        }
    }

    fn flush_holding(&mut self) {
        if self.holding.is_empty() {
            return;
        }
        let eps: Vec<usize> = self.holding.iter().copied().collect();
        for e in eps {
            self.flush_held(e);
        }
    }

    fn set_sq(&mut self, e: usize, to: SqState) {
        let ep = &mut self.eps[e];
        let from = std::mem::replace(&mut ep.sq, to);
        let qpn = ep.app_qpn;
        let ev = self
            .event(TraceKind::StateTransition)
            .with("entity", "sq")
            .with("qpn", qpn)
            .with("from", from.as_str())
            .with("to", to.as_str());
        self.trace(ev);
    }

    fn set_rq(&mut self, e: usize, to: RqState) {
        let ep = &mut self.eps[e];
        let from = std::mem::replace(&mut ep.rq, to);
        let qpn = ep.app_qpn;
        let ev = self
            .event(TraceKind::StateTransition)
            .with("entity", "rq")
            .with("qpn", qpn)
            .with("from", from.as_str())
            .with("to", to.as_str());
        self.trace(ev);
    }
}
