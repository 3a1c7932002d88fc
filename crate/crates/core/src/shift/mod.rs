//! Transparent RNIC failover on top of [`Cluster`].
//!
//! [`Shift`] implements [`Verbs`], so an application written against the
//! cluster runs on it unchanged. Every control verb issued on a default RNIC
//! is replayed in the background on that RNIC's backup; data verbs go to the
//! default QP until it fails, then the unfinished work is copied onto the
//! backup QP and traffic continues there until the default path answers a
//! probe again.

mod endpoint;
mod flow;
mod shadow;

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Serialize;

pub use endpoint::{RqState, Side, SqState};
pub use flow::{FALLBACK_IMM, RECOVERY_IMM, SWITCH_IMM};
pub use shadow::{ShadowOp, ShadowRecord};

use endpoint::Endpoint;
use shadow::ShadowList;

use crate::kvstore::{KvStore, DEFAULT_KV_LATENCY};
use crate::simcore::{FaultScript, HostId, RnicId, Time, Topology, TraceEvent, TraceKind, TraceLog, MS, US};
use crate::verbs::{
    cq_footprint, qp_footprint, Cluster, ClusterConfig, CqHandle, DeviceHandle, MemoryRegion, PdHandle, QpAttrs,
    QpHandle, QpInitAttr, QpState, RecvRequest, Result, Upcall, Verbs, VerbsError, WorkCompletion, WorkRequest,
};

/// Timer tokens at or above this value belong to the failover layer.
pub const RESERVED_TOKEN_BASE: u64 = 1 << 63;

#[derive(Debug, Clone)]
pub struct ShiftConfig {
    /// Default RNIC → backup RNIC. Must stay on one host.
    pub backups: BTreeMap<RnicId, RnicId>,
    pub probe_interval: Time,
    pub scan_interval: Time,
    /// Blocked scans of one record before a warning is traced.
    pub max_scan_rounds: u32,
    pub kv_latency: Time,
    /// KV polls for a missing key mapping before giving up.
    pub remap_retries: u32,
    /// Execute shadow records strictly in order. Only useful to show why the
    /// default skips blocked records.
    pub strict_shadow_order: bool,
    /// Let the receiver absorb rewound messages it already consumed, using
    /// the message count carried by the fallback notification. Off gives
    /// the plain rewind, where such a message eats the next RECV.
    pub absorb_duplicates: bool,
}

impl ShiftConfig {
    /// Pairs RNICs 0↔1, 2↔3, ... on every host. A host with an odd RNIC
    /// count backs its last RNIC with its first.
    pub fn paired(topo: &Topology) -> Self {
        let mut backups = BTreeMap::new();
        for h in topo.hosts() {
            let r = &h.rnics;
            for pair in r.chunks(2) {
                if let [a, b] = *pair {
                    backups.insert(a, b);
                    backups.insert(b, a);
                }
            }
            if r.len() % 2 == 1 && r.len() > 1 {
                backups.insert(r[r.len() - 1], r[0]);
            }
        }
        Self {
            backups,
            probe_interval: 100 * MS,
            scan_interval: 100 * US,
            max_scan_rounds: 64,
            kv_latency: DEFAULT_KV_LATENCY,
            remap_retries: 50,
            strict_shadow_order: false,
            absorb_duplicates: true,
        }
    }

    fn validate(&self, topo: &Topology) -> Result<()> {
        for (&d, &b) in &self.backups {
            let n = topo.rnic_count() as u32;
            if d.0 >= n || b.0 >= n || d == b || topo.host_of(d) != topo.host_of(b) {
                return Err(VerbsError::InvalidWorkRequest("backup must be another RNIC of the same host"));
            }
        }
        Ok(())
    }
}

/// Operation counters for the data-path overhead checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ShiftCounters {
    pub post_calls: u64,
    /// Routing decisions taken by post wrappers.
    pub post_steps: u64,
    pub poll_calls: u64,
    /// Empty polls of underlying CQs made by poll wrappers.
    pub poll_steps: u64,
    pub wcs_seen: u64,
    pub fallbacks: u64,
    pub recoveries: u64,
    pub probes: u64,
    pub notifies_sent: u64,
    pub rewound_sends: u64,
    pub rewound_recvs: u64,
    pub fatal: u64,
}

#[derive(Debug, Clone, Copy)]
struct DevInfo {
    rnic: RnicId,
    backup: Option<DeviceHandle>,
}

#[derive(Debug, Clone, Copy)]
struct PdInfo {
    rnic: RnicId,
    backup: Option<PdHandle>,
}

#[derive(Debug, Clone)]
struct CqWrap {
    cap: u32,
    backup: Option<CqHandle>,
    buffer: VecDeque<WorkCompletion>,
    app_armed: bool,
}

pub struct Shift {
    cl: Cluster,
    cfg: ShiftConfig,
    kv: KvStore,
    shadows: Vec<ShadowList>,
    shadow_of: HashMap<RnicId, usize>,
    devs: HashMap<DeviceHandle, DevInfo>,
    pds: HashMap<PdHandle, PdInfo>,
    cqs: HashMap<CqHandle, CqWrap>,
    /// Backup CQ → the application CQ it stands in for.
    cq_owner: HashMap<CqHandle, CqHandle>,
    /// (default RNIC, default lkey) → backup region.
    mr_fwd: HashMap<(RnicId, u32), MemoryRegion>,
    /// (backup RNIC, backup lkey) → default lkey.
    lkey_rev: HashMap<(RnicId, u32), u32>,
    eps: Vec<Endpoint>,
    ep_of_qp: HashMap<QpHandle, usize>,
    ep_of_qpn: HashMap<u32, (usize, Side)>,
    /// Endpoints with parked application posts.
    holding: BTreeSet<usize>,
    pending: VecDeque<Upcall>,
    counters: ShiftCounters,
}

impl Shift {
    pub fn new(topo: Topology, ccfg: ClusterConfig, cfg: ShiftConfig) -> Result<Self> {
        Self::over(Cluster::new(topo, ccfg), cfg)
    }

    pub fn over(cl: Cluster, cfg: ShiftConfig) -> Result<Self> {
        cfg.validate(cl.topology())?;
        let mut shadows = Vec::new();
        let mut shadow_of = HashMap::new();
        for (&d, &b) in &cfg.backups {
            shadow_of.insert(d, shadows.len());
            shadows.push(ShadowList::new(d, b));
        }
        Ok(Self {
            kv: KvStore::local(cfg.kv_latency),
            cl,
            cfg,
            shadows,
            shadow_of,
            devs: HashMap::new(),
            pds: HashMap::new(),
            cqs: HashMap::new(),
            cq_owner: HashMap::new(),
            mr_fwd: HashMap::new(),
            lkey_rev: HashMap::new(),
            eps: Vec::new(),
            ep_of_qp: HashMap::new(),
            ep_of_qpn: HashMap::new(),
            holding: BTreeSet::new(),
            pending: VecDeque::new(),
            counters: ShiftCounters::default(),
        })
    }

    pub fn config(&self) -> &ShiftConfig {
        &self.cfg
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cl
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn counters(&self) -> ShiftCounters {
        self.counters
    }

    pub fn install_faults(&mut self, script: &FaultScript) -> Result<()> {
        self.cl.install_faults(script)
    }

    pub fn take_trace(&mut self) -> TraceLog {
        self.cl.take_trace()
    }

    pub fn backup_of(&self, rnic: RnicId) -> Option<RnicId> {
        self.cfg.backups.get(&rnic).copied()
    }

    pub fn endpoint_state(&self, qp: QpHandle) -> Option<(SqState, RqState)> {
        self.ep_of_qp.get(&qp).map(|&e| (self.eps[e].sq, self.eps[e].rq))
    }

    pub fn backup_qp(&self, qp: QpHandle) -> Option<QpHandle> {
        self.ep_of_qp.get(&qp).and_then(|&e| self.eps[e].backup_qp)
    }

    /// True once the backup QP is in RTS with its internal receiver armed.
    pub fn backup_ready(&self, qp: QpHandle) -> bool {
        self.ep_of_qp.get(&qp).is_some_and(|&e| self.eps[e].backup_ready)
    }

    pub fn is_fatal(&self, qp: QpHandle) -> bool {
        self.ep_of_qp.get(&qp).is_some_and(|&e| self.eps[e].fatal)
    }

    /// RNIC memory held by backup QPs and CQs.
    pub fn backup_memory_bytes(&self) -> u64 {
        let qps: u64 = self
            .eps
            .iter()
            .filter(|e| e.backup_qp.is_some())
            .map(|e| qp_footprint(e.init.sq_cap.into(), e.init.rq_cap.into()))
            .sum();
        let cqs: u64 = self.cqs.values().filter(|c| c.backup.is_some()).map(|c| cq_footprint(c.cap.into())).sum();
        qps + cqs
    }

    fn trace(&mut self, ev: TraceEvent) {
        self.cl.emit(ev);
    }

    fn event(&self, kind: TraceKind) -> TraceEvent {
        TraceEvent::new(self.cl.now(), kind)
    }

    fn timer(&mut self, delay: Time, kind: u64, id: usize) {
        let token = RESERVED_TOKEN_BASE | kind << 32 | id as u64;
        let at = self.cl.now() + delay;
        self.cl.schedule_timer(at, token).expect("timer in the future");
    }

    fn on_timer(&mut self, token: u64) {
        let kind = (token & !RESERVED_TOKEN_BASE) >> 32;
        let id = (token & 0xffff_ffff) as usize;
        match kind {
            shadow::T_SCAN => self.scan_shadow(id),
            flow::T_PROBE => self.probe_timer(id),
            flow::T_REMAP => self.remap_timer(id),
            _ => {}
        }
    }

    fn deliver(&mut self, app_cq: CqHandle, wc: WorkCompletion) {
        let Some(w) = self.cqs.get_mut(&app_cq) else { return };
        w.buffer.push_back(wc);
        if std::mem::take(&mut w.app_armed) {
            self.pending.push_back(Upcall::CqEvent(app_cq));
        }
    }

    fn cluster_cq(&self, app_cq: CqHandle, side: Side) -> Option<CqHandle> {
        match side {
            Side::Default => Some(app_cq),
            Side::Backup => self.cqs.get(&app_cq)?.backup,
        }
    }
}

impl Verbs for Shift {
    fn now(&self) -> Time {
        self.cl.now()
    }

    fn host_of(&self, rnic: RnicId) -> HostId {
        self.cl.host_of(rnic)
    }

    fn alloc_buffer(&mut self, host: HostId, len: u64) -> Result<u64> {
        self.cl.alloc_buffer(host, len)
    }

    fn read_memory(&self, host: HostId, addr: u64, len: u64) -> Result<Vec<u8>> {
        self.cl.read_memory(host, addr, len)
    }

    fn write_memory(&mut self, host: HostId, addr: u64, data: &[u8]) -> Result<()> {
        self.cl.write_memory(host, addr, data)
    }

    fn open_device(&mut self, rnic: RnicId) -> Result<DeviceHandle> {
        let dev = self.cl.open_device(rnic)?;
        self.devs.insert(dev, DevInfo { rnic, backup: None });
        self.record(rnic, ShadowOp::OpenDevice { dev });
        Ok(dev)
    }

    fn alloc_pd(&mut self, dev: DeviceHandle) -> Result<PdHandle> {
        let pd = self.cl.alloc_pd(dev)?;
        let rnic = self.devs[&dev].rnic;
        self.pds.insert(pd, PdInfo { rnic, backup: None });
        self.record(rnic, ShadowOp::AllocPd { pd, dev });
        Ok(pd)
    }

    fn create_cq(&mut self, dev: DeviceHandle, cap: u32) -> Result<CqHandle> {
        let cq = self.cl.create_cq(dev, cap)?;
        let rnic = self.devs[&dev].rnic;
        self.cqs.insert(cq, CqWrap { cap, backup: None, buffer: VecDeque::new(), app_armed: false });
        self.record(rnic, ShadowOp::CreateCq { cq, dev, cap });
        Ok(cq)
    }

    fn create_qp(&mut self, pd: PdHandle, init: QpInitAttr) -> Result<QpHandle> {
        let qp = self.cl.create_qp(pd, init)?;
        let rnic = self.pds[&pd].rnic;
        if let Some(backup) = self.backup_of(rnic) {
            let e = self.eps.len();
            let app_qpn = self.cl.qp_route(qp)?.qpn;
            self.eps.push(Endpoint {
                app_qp: qp,
                app_qpn,
                host: self.cl.host_of(rnic),
                default_rnic: rnic,
                backup_rnic: backup,
                init,
                backup_qp: None,
                backup_qpn: 0,
                snapshot: QpAttrs::default(),
                backup_attrs: QpAttrs::default(),
                backup_ready: false,
                sq: SqState::Default,
                rq: RqState::Default,
                fallback: None,
                held: VecDeque::new(),
                sink: None,
                pinned: false,
                probe_scheduled: false,
                probe_in_flight: false,
                fatal: false,
                shift_recv: [false; 2],
                internal_sends: [0; 2],
                gen: [0; 2],
                rc_posted: 0,
                rc_received: 0,
                max_recv: 0,
                scratch: None,
                spill: VecDeque::new(),
                early: VecDeque::new(),
                unabsorbed: 0,
            });
            self.ep_of_qp.insert(qp, e);
            self.ep_of_qpn.insert(app_qpn, (e, Side::Default));
        }
        self.record(rnic, ShadowOp::CreateQp { qp, pd, init });
        Ok(qp)
    }

    fn reg_mr(&mut self, pd: PdHandle, addr: u64, len: u64) -> Result<MemoryRegion> {
        let mr = self.cl.reg_mr(pd, addr, len)?;
        let rnic = self.pds[&pd].rnic;
        self.record(rnic, ShadowOp::RegMr { mr });
        Ok(mr)
    }

    fn dereg_mr(&mut self, mr: &MemoryRegion) -> Result<()> {
        self.cl.dereg_mr(mr)?;
        let rnic = self.pds[&mr.pd].rnic;
        self.forget_mr(rnic, mr);
        Ok(())
    }

    fn modify_qp(&mut self, qp: QpHandle, to: QpState, attrs: &QpAttrs) -> Result<()> {
        self.cl.modify_qp(qp, to, attrs)?;
        if let Some(&e) = self.ep_of_qp.get(&qp) {
            if matches!(to, QpState::Rtr | QpState::Rts) {
                self.eps[e].snapshot = self.cl.query_qp(qp)?.attrs;
            }
            let rnic = self.eps[e].default_rnic;
            self.record(rnic, ShadowOp::ModifyQp { qp, to, attrs: *attrs });
        }
        Ok(())
    }

    fn query_qp(&self, qp: QpHandle) -> Result<crate::verbs::QpSnapshot> {
        self.cl.query_qp(qp)
    }

    fn post_send(&mut self, qp: QpHandle, wr: WorkRequest) -> Result<()> {
        self.shift_post_send(qp, wr)
    }

    fn post_recv(&mut self, qp: QpHandle, wr: RecvRequest) -> Result<()> {
        self.shift_post_recv(qp, wr)
    }

    fn poll_cq(&mut self, cq: CqHandle, max: usize) -> Vec<WorkCompletion> {
        self.shift_poll_cq(cq, max)
    }

    fn req_notify_cq(&mut self, cq: CqHandle) -> Result<()> {
        let Some(w) = self.cqs.get_mut(&cq) else {
            return self.cl.req_notify_cq(cq);
        };
        w.app_armed = true;
        self.rearm(cq);
        Ok(())
    }

    fn schedule_timer(&mut self, at: Time, token: u64) -> Result<()> {
        if token >= RESERVED_TOKEN_BASE {
            return Err(VerbsError::ReservedToken);
        }
        self.cl.schedule_timer(at, token)
    }

    fn next_upcall(&mut self, until: Time) -> Option<Upcall> {
        loop {
            if let Some(u) = self.pending.pop_front() {
                return Some(u);
            }
            match self.cl.next_upcall(until)? {
                Upcall::Timer(t) if t >= RESERVED_TOKEN_BASE => self.on_timer(t),
                Upcall::CqEvent(c) => {
                    let app = self.cq_owner.get(&c).copied().unwrap_or(c);
                    if !self.cqs.contains_key(&app) {
                        return Some(Upcall::CqEvent(c));
                    }
                    self.service(app);
                }
                u => return Some(u),
            }
        }
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.cl.emit(ev);
    }

    fn trace(&self) -> &TraceLog {
        self.cl.trace()
    }
}
