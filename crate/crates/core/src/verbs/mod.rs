//! Simulated RDMA verbs over the [`crate::simcore`] fabric.
//!
//! [`Cluster`] owns every RNIC, host memory and the event loop. Applications
//! program against the [`Verbs`] trait; the failover layer implements the same
//! trait on top of a `Cluster`.

mod cluster;
mod memory;
mod queues;
mod types;

pub use cluster::{Cluster, ClusterConfig, QpStats};
pub use memory::HostMemory;
pub use queues::{RqIndices, SqIndices};
pub use types::*;

use crate::simcore::{HostId, RnicId, Time, TraceEvent, TraceLog};

/// Bytes of RNIC memory for one QP context.
pub const QP_CONTEXT_BYTES: u64 = 3120;
pub const SEND_WQE_BYTES: u64 = 256;
pub const RECV_WQE_BYTES: u64 = 16;
pub const CQ_CONTEXT_BYTES: u64 = 592;
pub const CQE_BYTES: u64 = 64;

pub fn qp_footprint(sq_cap: u64, rq_cap: u64) -> u64 {
    QP_CONTEXT_BYTES + sq_cap * SEND_WQE_BYTES + rq_cap * RECV_WQE_BYTES
}

pub fn cq_footprint(cqes: u64) -> u64 {
    CQ_CONTEXT_BYTES + cqes * CQE_BYTES
}

/// The application-facing verbs surface.
///
/// Everything runs inside one event loop: the caller drives time by pulling
/// [`Upcall`]s with [`Verbs::next_upcall`] and reacting to them.
pub trait Verbs {
    fn now(&self) -> Time;
    fn host_of(&self, rnic: RnicId) -> HostId;

    fn alloc_buffer(&mut self, host: HostId, len: u64) -> Result<u64>;
    fn read_memory(&self, host: HostId, addr: u64, len: u64) -> Result<Vec<u8>>;
    fn write_memory(&mut self, host: HostId, addr: u64, data: &[u8]) -> Result<()>;

    fn open_device(&mut self, rnic: RnicId) -> Result<DeviceHandle>;
    fn alloc_pd(&mut self, dev: DeviceHandle) -> Result<PdHandle>;
    fn create_cq(&mut self, dev: DeviceHandle, cap: u32) -> Result<CqHandle>;
    fn create_qp(&mut self, pd: PdHandle, init: QpInitAttr) -> Result<QpHandle>;
    fn reg_mr(&mut self, pd: PdHandle, addr: u64, len: u64) -> Result<MemoryRegion>;
    fn dereg_mr(&mut self, mr: &MemoryRegion) -> Result<()>;
    fn modify_qp(&mut self, qp: QpHandle, to: QpState, attrs: &QpAttrs) -> Result<()>;
    fn query_qp(&self, qp: QpHandle) -> Result<QpSnapshot>;

    fn post_send(&mut self, qp: QpHandle, wr: WorkRequest) -> Result<()>;
    fn post_recv(&mut self, qp: QpHandle, wr: RecvRequest) -> Result<()>;
    fn poll_cq(&mut self, cq: CqHandle, max: usize) -> Vec<WorkCompletion>;
    /// Arms `cq`: the next completion added raises one [`Upcall::CqEvent`].
    /// Completions already queued do not; poll once after arming.
    fn req_notify_cq(&mut self, cq: CqHandle) -> Result<()>;

    /// Raises [`Upcall::Timer`] with `token` at virtual time `at`.
    fn schedule_timer(&mut self, at: Time, token: u64) -> Result<()>;
    /// Runs the event loop until the next upcall, or returns `None` once
    /// nothing is due at or before `until`.
    fn next_upcall(&mut self, until: Time) -> Option<Upcall>;

    fn emit(&mut self, ev: TraceEvent);
    fn trace(&self) -> &TraceLog;

    /// Convenience: RESET→INIT→RTR→RTS with one attribute set.
    fn connect_qp(&mut self, qp: QpHandle, attrs: &QpAttrs) -> Result<()> {
        self.modify_qp(qp, QpState::Init, attrs)?;
        self.modify_qp(qp, QpState::Rtr, attrs)?;
        self.modify_qp(qp, QpState::Rts, attrs)
    }
}
