use std::collections::VecDeque;

use serde::Serialize;

use crate::simcore::{HostId, RnicId};
use crate::verbs::{
    CqHandle, MemoryRegion, Opcode, QpAttrs, QpHandle, QpInitAttr, RecvRequest, WorkCompletion, WorkRequest,
};

/// Whether `wr` consumes a RECV at the peer.
pub(crate) fn consumes_recv(wr: &WorkRequest) -> bool {
    matches!(wr.opcode, Opcode::Send | Opcode::WriteWithImm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SqState {
    Default,
    Fallback,
    WaitSignaled,
    WaitSinked,
}

impl SqState {
    pub fn as_str(&self) -> &'static str {
        match self {
            SqState::Default => "DEFAULT",
            SqState::Fallback => "FALLBACK",
            SqState::WaitSignaled => "WAIT_SIGNALED",
            SqState::WaitSinked => "WAIT_SINKED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RqState {
    Default,
    Fallback,
}

impl RqState {
    pub fn as_str(&self) -> &'static str {
        match self {
            RqState::Default => "DEFAULT",
            RqState::Fallback => "FALLBACK",
        }
    }
}

/// Which of an endpoint's two QPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Side {
    Default,
    Backup,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Default => Side::Backup,
            Side::Backup => Side::Default,
        }
    }

    pub(crate) fn idx(self) -> usize {
        self as usize
    }
}

/// Errored default QP waiting for the fallback notification to complete.
#[derive(Debug, Clone)]
pub(crate) struct PendingFallback {
    /// Unfinished application WRs in post order, default-side keys.
    pub outstanding: Vec<WorkRequest>,
    /// Handed to the application if the backup path is dead too.
    pub err_wc: Option<WorkCompletion>,
    pub notified: bool,
    pub remap_retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SinkKind {
    /// Probe succeeded; move back to the default QP.
    Recovery,
    /// Operator-requested move onto the backup QP.
    ToBackup,
    /// Operator-requested move back onto the default QP.
    ToDefault,
}

impl SinkKind {
    pub fn target(self) -> Side {
        match self {
            SinkKind::ToBackup => Side::Backup,
            SinkKind::Recovery | SinkKind::ToDefault => Side::Default,
        }
    }
}

/// Drain-then-switch bookkeeping for WAIT_SIGNALED / WAIT_SINKED.
#[derive(Debug, Clone)]
pub(crate) struct Sink {
    pub kind: SinkKind,
    /// Index on the current QP of the signaled WR whose completion marks
    /// the current QP as drained.
    pub marker: Option<u64>,
    pub notify_idx: Option<u64>,
    pub notify_rung: bool,
    /// WRs parked on the target QP without a doorbell, as the app posted them.
    pub deferred: Vec<WorkRequest>,
}

#[derive(Debug, Clone)]
pub(crate) struct Endpoint {
    pub app_qp: QpHandle,
    pub app_qpn: u32,
    pub host: HostId,
    pub default_rnic: RnicId,
    pub backup_rnic: RnicId,
    pub init: QpInitAttr,
    pub backup_qp: Option<QpHandle>,
    pub backup_qpn: u32,
    /// Default-side attributes captured at RTR/RTS, replayed on reset.
    pub snapshot: QpAttrs,
    pub backup_attrs: QpAttrs,
    pub backup_ready: bool,
    pub sq: SqState,
    pub rq: RqState,
    pub fallback: Option<PendingFallback>,
    /// App posts accepted while the QP switch is in progress.
    pub held: VecDeque<WorkRequest>,
    pub sink: Option<Sink>,
    /// Switched by request; no probing while pinned to the backup.
    pub pinned: bool,
    pub probe_scheduled: bool,
    pub probe_in_flight: bool,
    pub fatal: bool,
    /// Internal RECV currently posted, per side.
    pub shift_recv: [bool; 2],
    /// Internal send WRs awaiting completion, per side.
    pub internal_sends: [u32; 2],
    /// Bumped on every reset of a side; internal WCs from before are stale.
    pub gen: [u8; 2],
    /// RECV-consuming application sends accepted, and RECV completions seen.
    /// Both wrap; only their difference across a fallback matters.
    pub rc_posted: u16,
    pub rc_received: u16,
    /// Largest application RECV, sizing the scratch buffer.
    pub max_recv: u32,
    /// Backup-side buffer for RECVs that absorb duplicates.
    pub scratch: Option<MemoryRegion>,
    /// Backup-side RECVs waiting for absorbed copies to free queue slots.
    pub spill: VecDeque<RecvRequest>,
    /// Messages that landed on the parked backup RECV before the application
    /// had one posted; the next application RECVs take them in order.
    pub early: VecDeque<(Vec<u8>, WorkCompletion)>,
    /// Duplicate copies announced but not absorbed. Nothing is parked on
    /// the backup while they may still arrive.
    pub unabsorbed: u16,
}

impl Endpoint {
    pub fn qp(&self, side: Side) -> Option<QpHandle> {
        match side {
            Side::Default => Some(self.app_qp),
            Side::Backup => self.backup_qp,
        }
    }

    #[allow(dead_code)]
    pub fn rnic(&self, side: Side) -> RnicId {
        match side {
            Side::Default => self.default_rnic,
            Side::Backup => self.backup_rnic,
        }
    }

    pub fn send_cq(&self) -> CqHandle {
        self.init.send_cq
    }

    pub fn recv_cq(&self) -> CqHandle {
        self.init.recv_cq
    }
}
