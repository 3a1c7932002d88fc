//! Builds a run's verbs backend (plain cluster or shift on top) and the
//! application endpoints workloads use.

use anyhow::{Context, Result};
use shift_core::shift::{Shift, ShiftConfig, ShiftCounters, SqState};
use shift_core::simcore::{FaultScript, HostId, LinkId, RnicId, Time, Topology, TraceLog};
use shift_core::verbs::{
    self, Cluster, ClusterConfig, CqHandle, MemoryRegion, QpAttrs, QpHandle, QpInitAttr, QpState, Upcall, Verbs,
};

use crate::scenario::{ms, us, RoleLinks, Scenario};

/// What a workload needs beyond the verbs surface.
pub trait Sim: Verbs {
    fn topology(&self) -> &Topology;
    fn install(&mut self, script: &FaultScript) -> verbs::Result<()>;
    fn take_log(&mut self) -> TraceLog;
    fn link_up(&self, link: LinkId) -> bool;
    /// WQEs started on the backup QP of `qp`; 0 without shift.
    fn backup_wqes(&self, qp: QpHandle) -> u64;
    fn on_backup(&self, qp: QpHandle) -> bool;
    fn shift_counters(&self) -> Option<ShiftCounters>;
}

impl Sim for Cluster {
    fn topology(&self) -> &Topology {
        Cluster::topology(self)
    }
    fn install(&mut self, script: &FaultScript) -> verbs::Result<()> {
        self.install_faults(script)
    }
    fn take_log(&mut self) -> TraceLog {
        self.take_trace()
    }
    fn link_up(&self, link: LinkId) -> bool {
        self.fabric().link_up(link)
    }
    fn backup_wqes(&self, _: QpHandle) -> u64 {
        0
    }
    fn on_backup(&self, _: QpHandle) -> bool {
        false
    }
    fn shift_counters(&self) -> Option<ShiftCounters> {
        None
    }
}

impl Sim for Shift {
    fn topology(&self) -> &Topology {
        self.cluster().topology()
    }
    fn install(&mut self, script: &FaultScript) -> verbs::Result<()> {
        self.install_faults(script)
    }
    fn take_log(&mut self) -> TraceLog {
        self.take_trace()
    }
    fn link_up(&self, link: LinkId) -> bool {
        self.cluster().fabric().link_up(link)
    }
    fn backup_wqes(&self, qp: QpHandle) -> u64 {
        self.backup_qp(qp).and_then(|b| self.cluster().qp_stats(b).ok()).map_or(0, |s| s.wqes_started)
    }
    fn on_backup(&self, qp: QpHandle) -> bool {
        self.endpoint_state(qp).is_some_and(|(sq, _)| sq != SqState::Default)
    }
    fn shift_counters(&self) -> Option<ShiftCounters> {
        Some(self.counters())
    }
}

pub fn shift_config(sc: &Scenario, topo: &Topology) -> ShiftConfig {
    let mut cfg = ShiftConfig::paired(topo);
    cfg.probe_interval = ms(sc.shift.probe_interval_ms);
    cfg.scan_interval = us(sc.shift.scan_interval_us);
    cfg.strict_shadow_order = sc.shift.strict_shadow_order;
    cfg.absorb_duplicates = sc.shift.absorb_duplicates;
    cfg
}

/// Runs `f` on the backend the scenario asks for.
pub fn with_backend<R>(sc: &Scenario, f: impl FnOnce(&mut dyn Sim) -> Result<R>) -> Result<R> {
    let topo = sc.topology.build();
    let ccfg = ClusterConfig::default();
    if sc.shift_enabled {
        let cfg = shift_config(sc, &topo);
        let mut s = Shift::new(topo, ccfg, cfg).context("building shift layer")?;
        f(&mut s)
    } else {
        let mut c = Cluster::new(topo, ccfg);
        f(&mut c)
    }
}

/// One side of a connection: its RNIC, queues and a registered buffer.
#[derive(Debug, Clone, Copy)]
pub struct Endpoint {
    pub rnic: RnicId,
    pub host: HostId,
    pub cq: CqHandle,
    pub qp: QpHandle,
    pub buf: u64,
    pub len: u64,
    pub mr: MemoryRegion,
}

pub fn open_endpoint(v: &mut (impl Verbs + ?Sized), rnic: RnicId, depth: u32, buf_len: u64) -> verbs::Result<Endpoint> {
    let host = v.host_of(rnic);
    let dev = v.open_device(rnic)?;
    let pd = v.alloc_pd(dev)?;
    let cq = v.create_cq(dev, 4 * depth.max(16))?;
    let qp = v.create_qp(pd, QpInitAttr { send_cq: cq, recv_cq: cq, sq_cap: depth.max(16), rq_cap: 2 * depth.max(16) })?;
    let len = buf_len.max(64);
    let buf = v.alloc_buffer(host, len)?;
    let mr = v.reg_mr(pd, buf, len)?;
    Ok(Endpoint { rnic, host, cq, qp, buf, len, mr })
}

pub fn connect(v: &mut (impl Verbs + ?Sized), a: &Endpoint, b: &Endpoint, psn: u64) -> verbs::Result<()> {
    let ra = v.query_qp(a.qp)?.route;
    let rb = v.query_qp(b.qp)?.route;
    v.connect_qp(a.qp, &QpAttrs { remote: Some(rb), rq_psn: psn + 1, sq_psn: psn, timers: None })?;
    v.connect_qp(b.qp, &QpAttrs { remote: Some(ra), rq_psn: psn, sq_psn: psn + 1, timers: None })?;
    debug_assert_eq!(v.query_qp(a.qp)?.state, QpState::Rts);
    Ok(())
}

/// RNIC `i` of `host`.
pub fn rnic(topo: &Topology, host: usize, i: usize) -> RnicId {
    topo.hosts()[host].rnics[i]
}

/// Client on host 0, server on host 1, both on their first RNIC.
pub fn role_links(topo: &Topology) -> RoleLinks {
    RoleLinks {
        local_default: topo.access_link(rnic(topo, 0, 0)),
        local_backup: topo.access_link(rnic(topo, 0, 1)),
        remote_default: topo.access_link(rnic(topo, 1, 0)),
        remote_backup: topo.access_link(rnic(topo, 1, 1)),
    }
}

const SETTLED: u64 = u64::MAX >> 1;

/// Lets background setup (shadow resources, KV exchange) finish; the clock
/// lands on `now + d` with either backend.
pub fn settle(v: &mut (impl Verbs + ?Sized), d: Time) {
    let until = v.now() + d;
    v.schedule_timer(until, SETTLED).expect("settle timer");
    while let Some(u) = v.next_upcall(until) {
        if u == Upcall::Timer(SETTLED) {
            return;
        }
        debug_assert!(!matches!(u, Upcall::Timer(_)), "no app timers during setup");
    }
}

pub fn fault_script(sc: &Scenario, topo: &Topology, t0: Time) -> Result<FaultScript> {
    let links = role_links(topo);
    let evs = sc.faults.iter().map(|f| f.resolve(&links, t0)).collect::<Result<Vec<_>>>()?;
    Ok(FaultScript::new(evs))
}
