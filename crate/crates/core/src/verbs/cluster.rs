use std::collections::{HashMap, VecDeque};

use super::memory::{HostMemory, MrEntry, MrTable};
use super::queues::{Cq, PushOutcome, RecvQueue, RqIndices, SendQueue, SqIndices};
use super::types::*;
use super::Verbs;
use crate::simcore::{
    ArrivalOutcome, EventQueue, Fabric, FaultEvent, FaultScript, HopOutcome, HostId, InFlight, Packet,
    PacketKind, PacketMeta, RnicId, Time, Topology, TraceEvent, TraceKind, TraceLog, WireOp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterConfig {
    pub mtu: u64,
    /// Maximum unacknowledged PSNs per QP.
    pub window_pkts: u64,
    pub timers: QpTimers,
    pub switch_delay_ns: Time,
    /// Emit MSG_PLACED for every message placed in responder memory.
    pub trace_placements: bool,
    /// Emit WQE_START whenever a send WQE starts transmission.
    pub trace_wqe_start: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            mtu: crate::simcore::DEFAULT_MTU,
            window_pkts: 128,
            timers: QpTimers::default(),
            switch_delay_ns: 0,
            trace_placements: true,
            trace_wqe_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QpStats {
    pub wqes_started: u64,
    pub packets_sent: u64,
    pub timeouts: u64,
    pub rnr_naks: u64,
}

enum Event {
    Hop(InFlight),
    Fault(FaultEvent),
    Retransmit { qp: QpHandle, gen: u64 },
    RnrResume { qp: QpHandle, gen: u64 },
    CqEvent(CqHandle),
    Timer(u64),
}

/// A send WQE the engine has started.
struct TxRec {
    wqe_index: u64,
    wr_id: u64,
    opcode: Opcode,
    signaled: bool,
    first_psn: u64,
    span: u64,
    /// Packets emitted in the current pass; for READ, whether the request went out.
    sent: u64,
    /// READ responses received.
    resp: u64,
    len: u64,
    data: Vec<u8>,
    sgl: Vec<Sge>,
    remote: Option<RemoteAddr>,
    imm: Option<u32>,
}

impl TxRec {
    fn end(&self) -> u64 {
        self.first_psn + self.span
    }

    fn is_read(&self) -> bool {
        self.opcode == Opcode::Read
    }

    fn fully_sent(&self) -> bool {
        if self.is_read() {
            self.sent > 0
        } else {
            self.sent == self.span
        }
    }

    fn next_psn(&self) -> u64 {
        if self.is_read() {
            self.first_psn + self.resp
        } else {
            self.first_psn + self.sent
        }
    }
}

struct InMsg {
    op: WireOp,
    recv: Option<u64>,
    head: u64,
    addr: u64,
}

struct Qp {
    rnic: RnicId,
    pd: PdHandle,
    qpn: u32,
    state: QpState,
    init: QpInitAttr,
    attrs: QpAttrs,
    timers: QpTimers,
    remote_rnic: Option<RnicId>,
    sq: SendQueue,
    rq: RecvQueue,
    // requester
    una: u64,
    next_fresh: u64,
    inflight: VecDeque<TxRec>,
    send_pos: usize,
    timer_gen: u64,
    timer_armed: bool,
    retries_left: u8,
    rnr_left: u8,
    rnr_wait: bool,
    // responder
    e_psn: u64,
    in_msg: Option<InMsg>,
    stats: QpStats,
}

impl Qp {
    fn route(&self) -> QpRouteAttrs {
        QpRouteAttrs { gid: Gid::of(self.rnic), qpn: self.qpn, lid: self.rnic.0 as u16 + 1 }
    }

    fn rewind_to_una(&mut self) {
        let una = self.una;
        for rec in &mut self.inflight {
            rec.sent = if rec.is_read() { 0 } else { una.saturating_sub(rec.first_psn).min(rec.span) };
        }
        self.send_pos = self.inflight.iter().position(|r| !r.fully_sent()).unwrap_or(self.inflight.len());
    }

    fn rec_of(&self, psn: u64) -> Option<usize> {
        self.inflight.iter().position(|r| r.first_psn <= psn && psn < r.end())
    }
}

fn span_of(len: u64, mtu: u64) -> u64 {
    len.div_ceil(mtu).max(1)
}

fn head8(bytes: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    let n = bytes.len().min(8);
    b[..n].copy_from_slice(&bytes[..n]);
    u64::from_le_bytes(b)
}

/// Every RNIC, host memory, and the fabric between them, driven by one
/// event queue.
pub struct Cluster {
    cfg: ClusterConfig,
    q: EventQueue<Event>,
    fabric: Fabric,
    trace: TraceLog,
    memory: Vec<HostMemory>,
    mrs: Vec<MrTable>,
    devices: Vec<RnicId>,
    pds: Vec<RnicId>,
    cqs: Vec<Cq>,
    qps: Vec<Qp>,
    by_qpn: HashMap<u32, QpHandle>,
    next_qpn: u32,
}

impl Cluster {
    pub fn new(topo: Topology, cfg: ClusterConfig) -> Self {
        let hosts = topo.hosts().len();
        let rnics = topo.rnic_count();
        let fabric = Fabric::new(topo).with_mtu(cfg.mtu).with_switch_delay(cfg.switch_delay_ns);
        Self {
            cfg,
            q: EventQueue::new(),
            fabric,
            trace: TraceLog::new(),
            memory: (0..hosts).map(|_| HostMemory::new()).collect(),
            mrs: (0..rnics).map(|r| MrTable::with_base((r as u32) << 20)).collect(),
            devices: Vec::new(),
            pds: Vec::new(),
            cqs: Vec::new(),
            qps: Vec::new(),
            by_qpn: HashMap::new(),
            next_qpn: 0x100,
        }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn topology(&self) -> &Topology {
        self.fabric.topology()
    }

    pub fn take_trace(&mut self) -> TraceLog {
        std::mem::take(&mut self.trace)
    }

    /// Events executed so far by the loop.
    pub fn events_executed(&self) -> u64 {
        self.q.executed()
    }

    pub fn install_faults(&mut self, script: &FaultScript) -> Result<()> {
        for e in script.expand() {
            if self.fabric.topology().link(e.link()).is_none() {
                return Err(crate::simcore::SimError::UnknownLink(e.link()).into());
            }
            self.q.schedule(e.time(), Event::Fault(e))?;
        }
        Ok(())
    }

    /// Runs every internal event up to `until`, discarding upcalls.
    pub fn run_until(&mut self, until: Time) -> Vec<Upcall> {
        let mut ups = Vec::new();
        while let Some(u) = self.next_upcall(until) {
            ups.push(u);
        }
        ups
    }

    fn qp(&self, h: QpHandle) -> Result<&Qp> {
        self.qps.get(h.0 as usize).ok_or(VerbsError::InvalidHandle("qp"))
    }

    fn qp_mut(&mut self, h: QpHandle) -> Result<&mut Qp> {
        self.qps.get_mut(h.0 as usize).ok_or(VerbsError::InvalidHandle("qp"))
    }

    fn pd_rnic(&self, pd: PdHandle) -> Result<RnicId> {
        self.pds.get(pd.0 as usize).copied().ok_or(VerbsError::InvalidHandle("pd"))
    }

    pub fn qp_rnic(&self, h: QpHandle) -> Result<RnicId> {
        Ok(self.qp(h)?.rnic)
    }

    pub fn qp_route(&self, h: QpHandle) -> Result<QpRouteAttrs> {
        Ok(self.qp(h)?.route())
    }

    pub fn qp_state(&self, h: QpHandle) -> Result<QpState> {
        Ok(self.qp(h)?.state)
    }

    pub fn qp_stats(&self, h: QpHandle) -> Result<QpStats> {
        Ok(self.qp(h)?.stats)
    }

    pub fn qp_by_qpn(&self, qpn: u32) -> Option<QpHandle> {
        self.by_qpn.get(&qpn).copied()
    }

    pub fn cq_rnic(&self, cq: CqHandle) -> Result<RnicId> {
        self.cqs.get(cq.0 as usize).map(|c| c.rnic).ok_or(VerbsError::InvalidHandle("cq"))
    }

    pub fn cq_len(&self, cq: CqHandle) -> usize {
        self.cqs.get(cq.0 as usize).map_or(0, |c| c.ring.len())
    }

    pub fn cq_overflows(&self, cq: CqHandle) -> u64 {
        self.cqs.get(cq.0 as usize).map_or(0, |c| c.overflows)
    }

    pub fn pd_of_qp(&self, h: QpHandle) -> Result<PdHandle> {
        Ok(self.qp(h)?.pd)
    }

    pub fn sq_indices(&self, h: QpHandle) -> Result<SqIndices> {
        Ok(self.qp(h)?.sq.idx)
    }

    pub fn rq_indices(&self, h: QpHandle) -> Result<RqIndices> {
        Ok(self.qp(h)?.rq.idx)
    }

    /// Reads a send WQE straight from ring memory.
    pub fn send_wqe_at(&self, h: QpHandle, index: u64) -> Option<SendWqe> {
        self.qp(h).ok()?.sq.ring.get(index).cloned()
    }

    pub fn recv_wqe_at(&self, h: QpHandle, index: u64) -> Option<RecvWqe> {
        self.qp(h).ok()?.rq.ring.get(index).cloned()
    }

    /// True when every posted send WQE has finished on the RNIC.
    pub fn sq_idle(&self, h: QpHandle) -> bool {
        self.qp(h).is_ok_and(|q| q.sq.idx.complete == q.sq.idx.post)
    }

    /// Checks the ring-index invariants of every QP.
    pub fn rings_consistent(&self) -> bool {
        self.qps.iter().all(|q| q.sq.check() && q.rq.check())
    }

    /// Appends a send WQE; with `ring` false the RNIC does not see it until
    /// [`Cluster::ring_sq_doorbell`]. Returns the queue index.
    pub fn post_send_ext(&mut self, h: QpHandle, wr: WorkRequest, ring: bool) -> Result<u64> {
        wr.validate().map_err(VerbsError::InvalidWorkRequest)?;
        let qp = self.qp_mut(h)?;
        if qp.state != QpState::Rts {
            return Err(VerbsError::InvalidState(qp.state));
        }
        if qp.sq.is_full() {
            return Err(VerbsError::SendQueueFull);
        }
        let index = qp.sq.idx.post;
        let qpn = qp.qpn;
        qp.sq.ring.put(index, SendWqe { index, qpn, wr });
        qp.sq.idx.post += 1;
        if ring {
            qp.sq.idx.doorbell = qp.sq.idx.post;
            self.pump(h);
        }
        Ok(index)
    }

    pub fn ring_sq_doorbell(&mut self, h: QpHandle, up_to: u64) -> Result<()> {
        let now = self.q.now();
        let qp = self.qp_mut(h)?;
        let (lo, hi) = (qp.sq.idx.doorbell, qp.sq.idx.post);
        if up_to < lo || up_to > hi {
            return Err(VerbsError::DoorbellOutOfRange { index: up_to, lo, hi });
        }
        if up_to == lo {
            return Ok(());
        }
        qp.sq.idx.doorbell = up_to;
        let qpn = qp.qpn;
        self.trace.push(TraceEvent::new(now, TraceKind::Doorbell).with("qpn", qpn).with("from", lo).with("to", up_to));
        self.pump(h);
        Ok(())
    }

    /// Appends a RECV WQE; with `update_record` false the RNIC does not see it
    /// until [`Cluster::update_rq_doorbell_record`].
    pub fn post_recv_ext(&mut self, h: QpHandle, wr: RecvRequest, update_record: bool) -> Result<u64> {
        let qp = self.qp_mut(h)?;
        if matches!(qp.state, QpState::Reset | QpState::Err) {
            return Err(VerbsError::InvalidState(qp.state));
        }
        if qp.rq.is_full() {
            return Err(VerbsError::RecvQueueFull);
        }
        let index = qp.rq.idx.post;
        qp.rq.ring.put(index, RecvWqe { index, wr });
        qp.rq.idx.post += 1;
        if update_record {
            qp.rq.idx.record = qp.rq.idx.post;
        }
        Ok(index)
    }

    pub fn update_rq_doorbell_record(&mut self, h: QpHandle, head: u64) -> Result<()> {
        let qp = self.qp_mut(h)?;
        let (lo, hi) = (qp.rq.idx.record, qp.rq.idx.post);
        if head < lo || head > hi {
            return Err(VerbsError::DoorbellOutOfRange { index: head, lo, hi });
        }
        qp.rq.idx.record = head;
        Ok(())
    }

    /// Removes RECV WQEs the RNIC has not consumed yet and returns them in
    /// queue order. No completions are generated for them.
    pub fn take_outstanding_recvs(&mut self, h: QpHandle) -> Result<Vec<RecvWqe>> {
        let qp = self.qp_mut(h)?;
        let i = qp.rq.idx;
        // a RECV holding a half-received message was never completed
        let from = match qp.in_msg.take() {
            Some(InMsg { recv: Some(k), .. }) => k,
            Some(m) => {
                qp.in_msg = Some(m);
                i.consume
            }
            None => i.consume,
        };
        let out = (from..i.post).filter_map(|k| qp.rq.ring.get(k).cloned()).collect();
        if i.retire >= from {
            qp.rq.idx.retire = i.post;
        }
        qp.rq.idx.consume = i.post;
        qp.rq.idx.record = i.post;
        Ok(out)
    }

    fn trace_ev(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    fn transmit(&mut self, p: Packet) {
        let now = self.q.now();
        match self.fabric.inject(p, now) {
            Ok(hop) => self.handle_hop(hop),
            Err(e) => self.trace_ev(TraceEvent::new(now, TraceKind::Warning).with("msg", e.to_string())),
        }
    }

    fn handle_hop(&mut self, hop: HopOutcome) {
        match hop {
            HopOutcome::Arrive { at, flight } => {
                self.q.schedule(at, Event::Hop(flight)).expect("arrival is never in the past");
            }
            HopOutcome::Dropped { packet, link, reason } => self.trace_drop(&packet, link, reason.as_str()),
        }
    }

    fn trace_drop(&mut self, p: &Packet, link: crate::simcore::LinkId, reason: &str) {
        let ev = TraceEvent::new(self.q.now(), TraceKind::PacketDrop)
            .with("link", link.0)
            .with("reason", reason)
            .with("pkt", p.kind.as_str())
            .with("psn", p.psn)
            .with("src", p.src.0)
            .with("dst", p.dst.0);
        self.trace_ev(ev);
    }

    fn push_wc(&mut self, cq: CqHandle, wc: WorkCompletion) {
        let now = self.q.now();
        let c = &mut self.cqs[cq.0 as usize];
        match c.push(wc) {
            PushOutcome::Stored => {}
            PushOutcome::Notify => {
                self.q.schedule(now, Event::CqEvent(cq)).expect("now is never in the past");
            }
            PushOutcome::Overflow => self.trace_ev(
                TraceEvent::new(now, TraceKind::Warning)
                    .with("msg", "cq overflow")
                    .with("cq", cq.0)
                    .with("wr_id", wc.wr_id),
            ),
        }
    }

    fn arm_timer(&mut self, h: QpHandle) {
        let now = self.q.now();
        let qp = &mut self.qps[h.0 as usize];
        qp.timer_gen += 1;
        qp.timer_armed = true;
        let (gen, at) = (qp.timer_gen, now + qp.timers.timeout_ns);
        self.q.schedule(at, Event::Retransmit { qp: h, gen }).expect("future");
    }

    fn disarm_timer(qp: &mut Qp) {
        qp.timer_gen += 1;
        qp.timer_armed = false;
    }

    /// Moves as many visible WQEs onto the wire as the window allows.
    fn pump(&mut self, h: QpHandle) {
        let now = self.q.now();
        let mtu = self.fabric.mtu();
        let window = self.cfg.window_pkts;
        let host = self.fabric.topology().host_of(self.qps[h.0 as usize].rnic);
        let mem = &self.memory[host.0 as usize];
        let qp = &mut self.qps[h.0 as usize];
        if qp.state != QpState::Rts || qp.rnr_wait {
            return;
        }
        let (Some(remote), Some(dst)) = (qp.attrs.remote, qp.remote_rnic) else {
            return;
        };
        let mrs = &self.mrs[qp.rnic.0 as usize];
        let mut out = Vec::new();
        let mut started = Vec::new();
        let mut fail = None;
        loop {
            if qp.send_pos == qp.inflight.len() {
                if qp.sq.idx.exec >= qp.sq.idx.doorbell || qp.next_fresh - qp.una >= window {
                    break;
                }
                let idx = qp.sq.idx.exec;
                let wr = qp.sq.ring.get(idx).expect("visible WQE is in the ring").wr.clone();
                let len = wr.len();
                let local_ok = wr.sgl.iter().all(|s| mrs.check_local(s.lkey, s.addr, s.len.into()));
                if !local_ok {
                    fail = Some(idx);
                    break;
                }
                let data = if wr.opcode == Opcode::Read {
                    Vec::new()
                } else {
                    let mut d = Vec::with_capacity(len as usize);
                    for s in &wr.sgl {
                        d.extend(mem.read(s.addr, s.len.into()).expect("checked by lkey"));
                    }
                    d
                };
                let span = span_of(len, mtu);
                qp.inflight.push_back(TxRec {
                    wqe_index: idx,
                    wr_id: wr.wr_id,
                    opcode: wr.opcode,
                    signaled: wr.signaled,
                    first_psn: qp.next_fresh,
                    span,
                    sent: 0,
                    resp: 0,
                    len,
                    data,
                    sgl: wr.sgl,
                    remote: wr.remote,
                    imm: wr.imm,
                });
                started.push((idx, qp.next_fresh));
                qp.next_fresh += span;
                qp.sq.idx.exec += 1;
                qp.stats.wqes_started += 1;
            }
            let una = qp.una;
            let rec = &mut qp.inflight[qp.send_pos];
            let psn = rec.next_psn();
            if psn.saturating_sub(una) >= window {
                break;
            }
            let mut p = Packet::control(qp.rnic, dst, qp.qpn, remote.qpn, psn, PacketKind::Data);
            let raddr = rec.remote.map_or(0, |r| r.addr);
            let rkey = rec.remote.map_or(0, |r| r.rkey);
            if rec.is_read() {
                let off = rec.resp * mtu;
                p.kind = PacketKind::ReadReq;
                p.meta = PacketMeta {
                    op: Some(WireOp::Read),
                    raddr: raddr + off,
                    rkey,
                    msg_len: rec.len - off.min(rec.len),
                    offset: off,
                    first: true,
                    last: true,
                    wqe_index: rec.wqe_index,
                };
                rec.sent = 1;
            } else {
                let off = rec.sent * mtu;
                let end = (off + mtu).min(rec.len);
                let last = rec.sent + 1 == rec.span;
                p.payload = rec.data[off.min(rec.len) as usize..end as usize].to_vec();
                p.meta = PacketMeta {
                    op: Some(match rec.opcode {
                        Opcode::Write => WireOp::Write,
                        Opcode::WriteWithImm => WireOp::WriteImm,
                        Opcode::Send => WireOp::Send,
                        Opcode::Read => unreachable!(),
                    }),
                    raddr: raddr + off,
                    rkey,
                    msg_len: rec.len,
                    offset: off,
                    first: rec.sent == 0,
                    last,
                    wqe_index: rec.wqe_index,
                };
                if last {
                    p.imm = rec.imm;
                }
                rec.sent += 1;
            }
            if rec.fully_sent() {
                qp.send_pos += 1;
            }
            qp.stats.packets_sent += 1;
            out.push(p);
        }
        let need_timer = !out.is_empty() && !qp.timer_armed;
        let (qpn, rnic) = (qp.qpn, qp.rnic);
        if self.cfg.trace_wqe_start {
            for (idx, psn) in started {
                self.trace.push(
                    TraceEvent::new(now, TraceKind::WqeStart)
                        .with("qpn", qpn)
                        .with("rnic", rnic.0)
                        .with("wqe", idx)
                        .with("psn", psn),
                );
            }
        }
        if need_timer {
            self.arm_timer(h);
        }
        for p in out {
            self.transmit(p);
        }
        if let Some(idx) = fail {
            self.fail_qp(h, idx, WcStatus::GeneralErr);
        }
    }

    /// Error-completes WQE `idx` and moves the QP to ERR. Later WQEs stay in
    /// the ring untouched; no flush completions are generated.
    fn fail_qp(&mut self, h: QpHandle, idx: u64, status: WcStatus) {
        let now = self.q.now();
        let qp = &mut self.qps[h.0 as usize];
        Self::disarm_timer(qp);
        qp.rnr_wait = false;
        qp.state = QpState::Err;
        let wqe = qp.sq.ring.get(idx).expect("failing WQE is in the ring");
        let wc = WorkCompletion {
            wr_id: wqe.wr.wr_id,
            status,
            opcode: wqe.wr.opcode.into(),
            qp_num: qp.qpn,
            byte_len: 0,
            imm: None,
            wqe_index: idx,
        };
        let (cq, qpn) = (qp.init.send_cq, qp.qpn);
        self.trace_ev(
            TraceEvent::new(now, TraceKind::QpError)
                .with("qpn", qpn)
                .with("status", status.as_str())
                .with("wqe", idx),
        );
        self.push_wc(cq, wc);
    }

    /// Cumulative acknowledgement of everything below `new_una`.
    fn advance(&mut self, h: QpHandle, new_una: u64) {
        let qp = &mut self.qps[h.0 as usize];
        if new_una <= qp.una {
            return;
        }
        qp.una = new_una;
        qp.retries_left = qp.timers.retry_cnt;
        qp.rnr_left = qp.timers.rnr_retry;
        let mut done = Vec::new();
        while qp.inflight.front().is_some_and(|r| r.end() <= new_una) {
            done.push(qp.inflight.pop_front().expect("checked"));
        }
        qp.send_pos = qp.send_pos.saturating_sub(done.len());
        if let Some(front) = qp.inflight.front_mut() {
            if !front.is_read() {
                front.sent = front.sent.max(new_una - front.first_psn);
            }
        }
        let (cq, qpn) = (qp.init.send_cq, qp.qpn);
        let outstanding = !qp.inflight.is_empty();
        if !outstanding {
            Self::disarm_timer(qp);
        }
        for r in done {
            self.qps[h.0 as usize].sq.idx.complete = r.wqe_index + 1;
            if r.signaled {
                let wc = WorkCompletion {
                    wr_id: r.wr_id,
                    status: WcStatus::Success,
                    opcode: r.opcode.into(),
                    qp_num: qpn,
                    byte_len: r.len,
                    imm: None,
                    wqe_index: r.wqe_index,
                };
                self.push_wc(cq, wc);
            }
        }
        if outstanding {
            self.arm_timer(h);
        }
        self.pump(h);
    }

    fn on_timeout(&mut self, h: QpHandle, gen: u64) {
        let qp = &mut self.qps[h.0 as usize];
        if gen != qp.timer_gen || !qp.timer_armed || qp.state != QpState::Rts {
            return;
        }
        qp.timer_armed = false;
        let Some(front) = qp.inflight.front() else {
            return;
        };
        qp.stats.timeouts += 1;
        if qp.retries_left == 0 {
            let idx = front.wqe_index;
            self.fail_qp(h, idx, WcStatus::RetryExcErr);
            return;
        }
        qp.retries_left -= 1;
        qp.rewind_to_una();
        self.arm_timer(h);
        self.pump(h);
    }

    fn reply(&mut self, h: QpHandle, to: &Packet, kind: PacketKind, psn: u64) {
        let qp = &self.qps[h.0 as usize];
        let p = Packet::control(qp.rnic, to.src, qp.qpn, to.src_qpn, psn, kind);
        self.transmit(p);
    }

    fn deliver(&mut self, p: Packet) {
        let Some(&h) = self.by_qpn.get(&p.dst_qpn) else {
            return;
        };
        let qp = &self.qps[h.0 as usize];
        if qp.rnic != p.dst {
            return;
        }
        let from_peer = qp.attrs.remote.is_some_and(|r| r.qpn == p.src_qpn) && qp.remote_rnic == Some(p.src);
        if !from_peer {
            return;
        }
        match p.kind {
            PacketKind::Data => self.on_data(h, p),
            PacketKind::ReadReq => self.on_read_req(h, p),
            PacketKind::Ack | PacketKind::NakRnr | PacketKind::NakAccess | PacketKind::ReadResp => {
                self.on_response(h, p)
            }
        }
    }

    fn on_data(&mut self, h: QpHandle, p: Packet) {
        let now = self.q.now();
        let host = self.fabric.topology().host_of(p.dst);
        let qp = &mut self.qps[h.0 as usize];
        if !matches!(qp.state, QpState::Rtr | QpState::Rts) {
            return;
        }
        if p.psn < qp.e_psn {
            // duplicate: discard, re-acknowledge what we have
            if p.meta.last {
                let psn = qp.e_psn - 1;
                self.reply(h, &p, PacketKind::Ack, psn);
            }
            return;
        }
        if p.psn > qp.e_psn {
            return;
        }
        let op = p.meta.op.expect("DATA carries an opcode");
        let mrs = &self.mrs[p.dst.0 as usize];
        if p.meta.first {
            if matches!(op, WireOp::Write | WireOp::WriteImm)
                && p.meta.msg_len > 0
                && !mrs.check_remote(p.meta.rkey, p.meta.raddr, p.meta.msg_len)
            {
                self.reply(h, &p, PacketKind::NakAccess, p.psn);
                return;
            }
            let recv = if matches!(op, WireOp::Send | WireOp::WriteImm) {
                if qp.rq.idx.consume >= qp.rq.idx.record {
                    self.reply(h, &p, PacketKind::NakRnr, p.psn);
                    return;
                }
                let idx = qp.rq.idx.consume;
                let wqe = qp.rq.ring.get(idx).expect("visible RECV is in the ring");
                let fits = op != WireOp::Send
                    || (p.meta.msg_len <= wqe.wr.capacity()
                        && wqe.wr.sgl.iter().all(|s| mrs.check_local(s.lkey, s.addr, s.len.into())));
                if !fits {
                    self.reply(h, &p, PacketKind::NakAccess, p.psn);
                    return;
                }
                qp.rq.idx.consume += 1;
                Some(idx)
            } else {
                None
            };
            // SEND placements are reported at the RECV buffer
            let addr = match recv {
                Some(i) if op == WireOp::Send => qp.rq.ring.get(i).and_then(|w| w.wr.sgl.first()).map_or(0, |s| s.addr),
                _ => p.meta.raddr,
            };
            qp.in_msg = Some(InMsg { op, recv, head: head8(&p.payload), addr });
        }
        let Some(msg) = qp.in_msg.as_ref() else {
            return;
        };
        let mem = &mut self.memory[host.0 as usize];
        match op {
            WireOp::Write | WireOp::WriteImm => {
                if !p.payload.is_empty() {
                    mem.write(p.meta.raddr, &p.payload).expect("range checked against the MR");
                }
            }
            WireOp::Send => {
                let wqe = qp.rq.ring.get(msg.recv.expect("SEND holds a RECV")).expect("consumed RECV");
                scatter(mem, &wqe.wr.sgl, p.meta.offset, &p.payload);
            }
            WireOp::Read => unreachable!("READ travels as READ_REQ"),
        }
        qp.e_psn += 1;
        if !p.meta.last {
            return;
        }
        let msg = qp.in_msg.take().expect("checked");
        let qpn = qp.qpn;
        let cq = qp.init.recv_cq;
        let recv_wr_id = msg.recv.map(|i| qp.rq.ring.get(i).expect("consumed RECV").wr.wr_id);
        self.reply(h, &p, PacketKind::Ack, p.psn);
        if let (Some(idx), Some(wr_id)) = (msg.recv, recv_wr_id) {
            let wc = WorkCompletion {
                wr_id,
                status: WcStatus::Success,
                opcode: if msg.op == WireOp::WriteImm { WcOpcode::RecvWithImm } else { WcOpcode::Recv },
                qp_num: qpn,
                byte_len: p.meta.msg_len,
                imm: p.imm,
                wqe_index: idx,
            };
            self.push_wc(cq, wc);
        }
        if self.cfg.trace_placements {
            let op = match msg.op {
                WireOp::Write => "WRITE",
                WireOp::WriteImm => "WRITE_IMM",
                WireOp::Send => "SEND",
                WireOp::Read => "READ",
            };
            self.trace_ev(
                TraceEvent::new(now, TraceKind::MsgPlaced)
                    .with("host", host.0)
                    .with("rnic", p.dst.0)
                    .with("qpn", qpn)
                    .with("op", op)
                    .with("addr", msg.addr)
                    .with("len", p.meta.msg_len)
                    .with("stamp", msg.head),
            );
        }
    }

    fn on_read_req(&mut self, h: QpHandle, p: Packet) {
        let mtu = self.fabric.mtu();
        let host = self.fabric.topology().host_of(p.dst);
        let qp = &self.qps[h.0 as usize];
        if !matches!(qp.state, QpState::Rtr | QpState::Rts) || p.psn > qp.e_psn {
            return;
        }
        let len = p.meta.msg_len;
        if len > 0 && !self.mrs[p.dst.0 as usize].check_remote(p.meta.rkey, p.meta.raddr, len) {
            self.reply(h, &p, PacketKind::NakAccess, p.psn);
            return;
        }
        let data = if len > 0 {
            self.memory[host.0 as usize].read(p.meta.raddr, len).expect("checked against the MR")
        } else {
            Vec::new()
        };
        let n = span_of(len, mtu);
        if p.psn == qp.e_psn {
            self.qps[h.0 as usize].e_psn += n;
        }
        let qp = &self.qps[h.0 as usize];
        let (rnic, qpn) = (qp.rnic, qp.qpn);
        for i in 0..n {
            let off = i * mtu;
            let mut r = Packet::control(rnic, p.src, qpn, p.src_qpn, p.psn + i, PacketKind::ReadResp);
            r.payload = data[off.min(len) as usize..(off + mtu).min(len) as usize].to_vec();
            r.meta = PacketMeta {
                op: Some(WireOp::Read),
                raddr: p.meta.raddr + off,
                rkey: 0,
                msg_len: len,
                offset: off,
                first: i == 0,
                last: i + 1 == n,
                wqe_index: p.meta.wqe_index,
            };
            self.transmit(r);
        }
    }

    fn on_response(&mut self, h: QpHandle, p: Packet) {
        let now = self.q.now();
        let mtu = self.fabric.mtu();
        let host = self.fabric.topology().host_of(p.dst);
        let qp = &mut self.qps[h.0 as usize];
        if qp.state != QpState::Rts || p.psn < qp.una || p.psn >= qp.next_fresh {
            return;
        }
        match p.kind {
            PacketKind::Ack => self.advance(h, p.psn + 1),
            PacketKind::NakAccess => {
                let Some(i) = qp.rec_of(p.psn) else { return };
                let idx = qp.inflight[i].wqe_index;
                self.advance(h, p.psn);
                if self.qps[h.0 as usize].state == QpState::Rts {
                    self.fail_qp(h, idx, WcStatus::GeneralErr);
                }
            }
            PacketKind::NakRnr => {
                let Some(i) = qp.rec_of(p.psn) else { return };
                let idx = qp.inflight[i].wqe_index;
                qp.stats.rnr_naks += 1;
                self.advance(h, p.psn);
                let qp = &mut self.qps[h.0 as usize];
                if qp.state != QpState::Rts {
                    return;
                }
                if qp.rnr_left == 0 {
                    self.fail_qp(h, idx, WcStatus::RnrRetryExcErr);
                    return;
                }
                qp.rnr_left -= 1;
                qp.rewind_to_una();
                Self::disarm_timer(qp);
                qp.rnr_wait = true;
                let (gen, at) = (qp.timer_gen, now + qp.timers.rnr_timer_ns);
                self.q.schedule(at, Event::RnrResume { qp: h, gen }).expect("future");
            }
            PacketKind::ReadResp => {
                let Some(i) = qp.rec_of(p.psn) else { return };
                let rec = &mut qp.inflight[i];
                if !rec.is_read() || p.psn != rec.first_psn + rec.resp {
                    return;
                }
                let off = (p.psn - rec.first_psn) * mtu;
                scatter(&mut self.memory[host.0 as usize], &rec.sgl, off, &p.payload);
                rec.resp += 1;
                let placed = (rec.resp == rec.span && self.cfg.trace_placements).then(|| (rec.sgl.first().copied(), rec.len));
                let (qpn, rnic) = (qp.qpn, qp.rnic);
                self.advance(h, p.psn + 1);
                if let Some((first, len)) = placed {
                    let mem = &self.memory[host.0 as usize];
                    let (addr, stamp) = first
                        .map_or((0, 0), |s| (s.addr, mem.read(s.addr, len.min(8)).map_or(0, |b| head8(&b))));
                    self.trace_ev(
                        TraceEvent::new(now, TraceKind::MsgPlaced)
                            .with("host", host.0)
                            .with("rnic", rnic.0)
                            .with("qpn", qpn)
                            .with("op", "READ")
                            .with("addr", addr)
                            .with("len", len)
                            .with("stamp", stamp),
                    );
                }
            }
            PacketKind::Data | PacketKind::ReadReq => unreachable!("requests go to the responder"),
        }
    }

    fn on_rnr_resume(&mut self, h: QpHandle, gen: u64) {
        let qp = &mut self.qps[h.0 as usize];
        if qp.timer_gen != gen || !qp.rnr_wait {
            return;
        }
        qp.rnr_wait = false;
        self.pump(h);
    }

    fn on_fault(&mut self, e: FaultEvent) {
        let now = self.q.now();
        let kind = match e {
            FaultEvent::LinkDown { .. } | FaultEvent::Flap { .. } => "link_down",
            FaultEvent::LinkUp { .. } => "link_up",
            FaultEvent::DropAck { .. } => "drop_ack",
        };
        self.fabric.apply_fault(&e, now).expect("link checked at install");
        self.trace_ev(TraceEvent::new(now, TraceKind::Fault).with("link", e.link().0).with("type", kind));
    }

    fn process(&mut self, ev: Event) -> Option<Upcall> {
        let now = self.q.now();
        match ev {
            Event::Hop(flight) => match self.fabric.arrive(flight, now) {
                ArrivalOutcome::Delivered(p) => self.deliver(p),
                ArrivalOutcome::Forward(hop) => self.handle_hop(hop),
                ArrivalOutcome::Dropped { packet, link, reason } => self.trace_drop(&packet, link, reason.as_str()),
            },
            Event::Fault(e) => self.on_fault(e),
            Event::Retransmit { qp, gen } => self.on_timeout(qp, gen),
            Event::RnrResume { qp, gen } => self.on_rnr_resume(qp, gen),
            Event::CqEvent(cq) => return Some(Upcall::CqEvent(cq)),
            Event::Timer(t) => return Some(Upcall::Timer(t)),
        }
        None
    }
}

/// Writes `data` at byte `offset` of the buffer described by `sgl`.
fn scatter(mem: &mut HostMemory, sgl: &[Sge], mut offset: u64, mut data: &[u8]) {
    for s in sgl {
        if data.is_empty() {
            break;
        }
        let len = u64::from(s.len);
        if offset >= len {
            offset -= len;
            continue;
        }
        let n = ((len - offset) as usize).min(data.len());
        mem.write(s.addr + offset, &data[..n]).expect("sge checked against its MR");
        data = &data[n..];
        offset = 0;
    }
}

impl Verbs for Cluster {
    fn now(&self) -> Time {
        self.q.now()
    }

    fn host_of(&self, rnic: RnicId) -> HostId {
        self.fabric.topology().host_of(rnic)
    }

    fn alloc_buffer(&mut self, host: HostId, len: u64) -> Result<u64> {
        let m = self.memory.get_mut(host.0 as usize).ok_or(VerbsError::InvalidHandle("host"))?;
        Ok(m.alloc(len))
    }

    fn read_memory(&self, host: HostId, addr: u64, len: u64) -> Result<Vec<u8>> {
        self.memory.get(host.0 as usize).ok_or(VerbsError::InvalidHandle("host"))?.read(addr, len)
    }

    fn write_memory(&mut self, host: HostId, addr: u64, data: &[u8]) -> Result<()> {
        self.memory.get_mut(host.0 as usize).ok_or(VerbsError::InvalidHandle("host"))?.write(addr, data)
    }

    fn open_device(&mut self, rnic: RnicId) -> Result<DeviceHandle> {
        if rnic.0 as usize >= self.fabric.topology().rnic_count() {
            return Err(VerbsError::InvalidHandle("rnic"));
        }
        self.devices.push(rnic);
        Ok(DeviceHandle(self.devices.len() as u32 - 1))
    }

    fn alloc_pd(&mut self, dev: DeviceHandle) -> Result<PdHandle> {
        let rnic = *self.devices.get(dev.0 as usize).ok_or(VerbsError::InvalidHandle("device"))?;
        self.pds.push(rnic);
        Ok(PdHandle(self.pds.len() as u32 - 1))
    }

    fn create_cq(&mut self, dev: DeviceHandle, cap: u32) -> Result<CqHandle> {
        let rnic = *self.devices.get(dev.0 as usize).ok_or(VerbsError::InvalidHandle("device"))?;
        if cap == 0 {
            return Err(VerbsError::ZeroCapacity);
        }
        self.cqs.push(Cq::new(rnic, cap));
        Ok(CqHandle(self.cqs.len() as u32 - 1))
    }

    fn create_qp(&mut self, pd: PdHandle, init: QpInitAttr) -> Result<QpHandle> {
        let rnic = self.pd_rnic(pd)?;
        if self.cq_rnic(init.send_cq)? != rnic || self.cq_rnic(init.recv_cq)? != rnic {
            return Err(VerbsError::DeviceMismatch);
        }
        if init.sq_cap == 0 || init.rq_cap == 0 {
            return Err(VerbsError::ZeroCapacity);
        }
        let qpn = self.next_qpn;
        self.next_qpn += 1;
        let h = QpHandle(self.qps.len() as u32);
        self.qps.push(Qp {
            rnic,
            pd,
            qpn,
            state: QpState::Reset,
            init,
            attrs: QpAttrs::default(),
            timers: self.cfg.timers,
            remote_rnic: None,
            sq: SendQueue::new(init.sq_cap),
            rq: RecvQueue::new(init.rq_cap),
            una: 0,
            next_fresh: 0,
            inflight: VecDeque::new(),
            send_pos: 0,
            timer_gen: 0,
            timer_armed: false,
            retries_left: 0,
            rnr_left: 0,
            rnr_wait: false,
            e_psn: 0,
            in_msg: None,
            stats: QpStats::default(),
        });
        self.by_qpn.insert(qpn, h);
        Ok(h)
    }

    fn reg_mr(&mut self, pd: PdHandle, addr: u64, len: u64) -> Result<MemoryRegion> {
        let rnic = self.pd_rnic(pd)?;
        let host = self.fabric.topology().host_of(rnic);
        if !self.memory[host.0 as usize].contains(addr, len) {
            return Err(VerbsError::OutOfRange { addr, len });
        }
        let (lkey, rkey) = self.mrs[rnic.0 as usize].register(MrEntry { pd, addr, len });
        Ok(MemoryRegion { pd, addr, len, lkey, rkey })
    }

    fn dereg_mr(&mut self, mr: &MemoryRegion) -> Result<()> {
        let rnic = self.pd_rnic(mr.pd)?;
        if self.mrs[rnic.0 as usize].deregister(mr.lkey, mr.rkey) {
            Ok(())
        } else {
            Err(VerbsError::InvalidHandle("mr"))
        }
    }

    fn modify_qp(&mut self, h: QpHandle, to: QpState, attrs: &QpAttrs) -> Result<()> {
        let now = self.q.now();
        let rnics = self.fabric.topology().rnic_count();
        let default_timers = self.cfg.timers;
        let qp = self.qp_mut(h)?;
        let from = qp.state;
        if !from.can_transition_to(to) {
            return Err(VerbsError::IllegalTransition { from, to });
        }
        match to {
            QpState::Init => {}
            QpState::Rtr => {
                let remote = attrs.remote.ok_or(VerbsError::MissingRemote)?;
                let rnic = remote
                    .gid
                    .rnic()
                    .filter(|r| (r.0 as usize) < rnics)
                    .ok_or(VerbsError::UnknownGid(remote.gid))?;
                qp.attrs.remote = Some(remote);
                qp.attrs.rq_psn = attrs.rq_psn;
                qp.remote_rnic = Some(rnic);
                qp.e_psn = attrs.rq_psn;
                qp.in_msg = None;
            }
            QpState::Rts => {
                let timers = attrs.timers.unwrap_or(default_timers);
                qp.attrs.sq_psn = attrs.sq_psn;
                qp.attrs.timers = Some(timers);
                qp.timers = timers;
                qp.una = attrs.sq_psn;
                qp.next_fresh = attrs.sq_psn;
                qp.retries_left = timers.retry_cnt;
                qp.rnr_left = timers.rnr_retry;
                qp.inflight.clear();
                qp.send_pos = 0;
            }
            QpState::Err => {
                Self::disarm_timer(qp);
                qp.rnr_wait = false;
            }
            QpState::Reset => {
                Self::disarm_timer(qp);
                qp.rnr_wait = false;
                qp.sq.clear();
                qp.rq.clear();
                qp.inflight.clear();
                qp.send_pos = 0;
                qp.in_msg = None;
                qp.attrs = QpAttrs::default();
                qp.timers = default_timers;
                qp.remote_rnic = None;
                qp.una = 0;
                qp.next_fresh = 0;
                qp.e_psn = 0;
            }
        }
        qp.state = to;
        let qpn = qp.qpn;
        self.trace_ev(
            TraceEvent::new(now, TraceKind::StateTransition)
                .with("entity", "qp")
                .with("qpn", qpn)
                .with("from", from.as_str())
                .with("to", to.as_str()),
        );
        Ok(())
    }

    fn query_qp(&self, h: QpHandle) -> Result<QpSnapshot> {
        let qp = self.qp(h)?;
        Ok(QpSnapshot {
            qpn: qp.qpn,
            route: qp.route(),
            state: qp.state,
            init: qp.init,
            attrs: qp.attrs,
            timers: qp.timers,
        })
    }

    fn post_send(&mut self, h: QpHandle, wr: WorkRequest) -> Result<()> {
        self.post_send_ext(h, wr, true).map(drop)
    }

    fn post_recv(&mut self, h: QpHandle, wr: RecvRequest) -> Result<()> {
        self.post_recv_ext(h, wr, true).map(drop)
    }

    fn poll_cq(&mut self, cq: CqHandle, max: usize) -> Vec<WorkCompletion> {
        let Some(c) = self.cqs.get_mut(cq.0 as usize) else {
            return Vec::new();
        };
        let n = max.min(c.ring.len());
        let wcs: Vec<_> = c.ring.drain(..n).collect();
        for wc in &wcs {
            let Some(&h) = self.by_qpn.get(&wc.qp_num) else { continue };
            let qp = &mut self.qps[h.0 as usize];
            if wc.opcode.is_recv() {
                let to = (wc.wqe_index + 1).min(qp.rq.idx.consume);
                qp.rq.idx.retire = qp.rq.idx.retire.max(to);
            } else {
                // an error completion leaves its own WQE in place
                let to = if wc.status.is_ok() { wc.wqe_index + 1 } else { wc.wqe_index };
                qp.sq.idx.retire = qp.sq.idx.retire.max(to.min(qp.sq.idx.complete));
            }
        }
        wcs
    }

    fn req_notify_cq(&mut self, cq: CqHandle) -> Result<()> {
        self.cqs.get_mut(cq.0 as usize).ok_or(VerbsError::InvalidHandle("cq"))?.armed = true;
        Ok(())
    }

    fn schedule_timer(&mut self, at: Time, token: u64) -> Result<()> {
        self.q.schedule(at, Event::Timer(token))?;
        Ok(())
    }

    fn next_upcall(&mut self, until: Time) -> Option<Upcall> {
        loop {
            match self.q.peek_time() {
                None => return None,
                Some(t) if t > until => {
                    self.q.advance_to(until);
                    return None;
                }
                Some(_) => {}
            }
            let (_, ev) = self.q.pop()?;
            if let Some(u) = self.process(ev) {
                return Some(u);
            }
        }
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    fn trace(&self) -> &TraceLog {
        &self.trace
    }
}
