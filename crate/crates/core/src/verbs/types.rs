use std::fmt;

use serde::{Deserialize, Serialize};

use crate::simcore::{RnicId, Time, MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceHandle(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PdHandle(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CqHandle(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QpHandle(pub u32);

/// Global identifier of an RNIC port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Gid(pub u64);

impl Gid {
    const PREFIX: u64 = 0xfe80_0000_0000_0000;

    pub fn of(rnic: RnicId) -> Self {
        Gid(Self::PREFIX | u64::from(rnic.0))
    }

    pub fn rnic(&self) -> Option<RnicId> {
        (self.0 & !0xffff_ffff == Self::PREFIX).then_some(RnicId(self.0 as u32))
    }
}

impl fmt::Display for Gid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// What a peer needs to connect to a QP: (GID, QPN, LID).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QpRouteAttrs {
    pub gid: Gid,
    pub qpn: u32,
    pub lid: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QpState {
    Reset,
    Init,
    Rtr,
    Rts,
    Err,
}

impl QpState {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpState::Reset => "RESET",
            QpState::Init => "INIT",
            QpState::Rtr => "RTR",
            QpState::Rts => "RTS",
            QpState::Err => "ERR",
        }
    }

    /// RESET→INIT→RTR→RTS, any→ERR, ERR→RESET.
    pub fn can_transition_to(self, to: QpState) -> bool {
        use QpState::*;
        matches!(
            (self, to),
            (Reset, Init) | (Init, Rtr) | (Rtr, Rts) | (_, Err) | (Err, Reset)
        )
    }
}

/// Reliability timers for the requester side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpTimers {
    pub timeout_ns: Time,
    pub retry_cnt: u8,
    pub rnr_retry: u8,
    pub rnr_timer_ns: Time,
}

impl Default for QpTimers {
    fn default() -> Self {
        Self { timeout_ns: 4 * MS, retry_cnt: 7, rnr_retry: 7, rnr_timer_ns: MS / 10 }
    }
}

/// Attributes applied by `modify_qp`. Fields not needed by a transition
/// are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QpAttrs {
    /// Required for RTR.
    pub remote: Option<QpRouteAttrs>,
    /// First PSN the responder expects (RTR).
    pub rq_psn: u64,
    /// First PSN the requester sends (RTS).
    pub sq_psn: u64,
    /// Overrides the cluster defaults when set (RTS).
    pub timers: Option<QpTimers>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpInitAttr {
    pub send_cq: CqHandle,
    pub recv_cq: CqHandle,
    pub sq_cap: u32,
    pub rq_cap: u32,
}

/// Full attribute snapshot returned by `query_qp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpSnapshot {
    pub qpn: u32,
    pub route: QpRouteAttrs,
    pub state: QpState,
    pub init: QpInitAttr,
    pub attrs: QpAttrs,
    pub timers: QpTimers,
}

impl QpSnapshot {
    /// Equality ignoring identity fields, for comparing a QP to its re-creation.
    pub fn same_config(&self, other: &QpSnapshot) -> bool {
        self.state == other.state
            && self.init.sq_cap == other.init.sq_cap
            && self.init.rq_cap == other.init.rq_cap
            && self.attrs == other.attrs
            && self.timers == other.timers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Write,
    Send,
    Read,
    WriteWithImm,
}

/// Scatter/gather element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sge {
    pub addr: u64,
    pub len: u32,
    pub lkey: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteAddr {
    pub addr: u64,
    pub rkey: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkRequest {
    pub wr_id: u64,
    pub opcode: Opcode,
    pub sgl: Vec<Sge>,
    pub remote: Option<RemoteAddr>,
    pub imm: Option<u32>,
    pub signaled: bool,
}

impl WorkRequest {
    pub fn write(wr_id: u64, local: Sge, remote: RemoteAddr) -> Self {
        Self { wr_id, opcode: Opcode::Write, sgl: vec![local], remote: Some(remote), imm: None, signaled: true }
    }

    pub fn write_with_imm(wr_id: u64, local: Option<Sge>, remote: RemoteAddr, imm: u32) -> Self {
        Self {
            wr_id,
            opcode: Opcode::WriteWithImm,
            sgl: local.into_iter().collect(),
            remote: Some(remote),
            imm: Some(imm),
            signaled: true,
        }
    }

    pub fn send(wr_id: u64, local: Sge) -> Self {
        Self { wr_id, opcode: Opcode::Send, sgl: vec![local], remote: None, imm: None, signaled: true }
    }

    pub fn read(wr_id: u64, local: Sge, remote: RemoteAddr) -> Self {
        Self { wr_id, opcode: Opcode::Read, sgl: vec![local], remote: Some(remote), imm: None, signaled: true }
    }

    pub fn unsignaled(mut self) -> Self {
        self.signaled = false;
        self
    }

    pub fn len(&self) -> u64 {
        self.sgl.iter().map(|s| u64::from(s.len)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        match self.opcode {
            Opcode::Send if self.remote.is_some() => Err("SEND must not carry a remote address"),
            Opcode::Write | Opcode::Read | Opcode::WriteWithImm if self.remote.is_none() => {
                Err("one-sided opcode requires a remote address")
            }
            Opcode::WriteWithImm if self.imm.is_none() => Err("WRITE_WITH_IMM requires an immediate"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecvRequest {
    pub wr_id: u64,
    pub sgl: Vec<Sge>,
}

impl RecvRequest {
    pub fn capacity(&self) -> u64 {
        self.sgl.iter().map(|s| u64::from(s.len)).sum()
    }
}

/// Send-queue resident form of a work request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendWqe {
    pub index: u64,
    pub qpn: u32,
    pub wr: WorkRequest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecvWqe {
    pub index: u64,
    pub wr: RecvRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WcStatus {
    Success,
    RetryExcErr,
    RnrRetryExcErr,
    GeneralErr,
}

impl WcStatus {
    pub fn is_ok(&self) -> bool {
        *self == WcStatus::Success
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WcStatus::Success => "SUCCESS",
            WcStatus::RetryExcErr => "RETRY_EXC_ERR",
            WcStatus::RnrRetryExcErr => "RNR_RETRY_EXC_ERR",
            WcStatus::GeneralErr => "GENERAL_ERR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WcOpcode {
    Write,
    Send,
    Read,
    WriteWithImm,
    Recv,
    RecvWithImm,
}

impl WcOpcode {
    pub fn is_recv(&self) -> bool {
        matches!(self, WcOpcode::Recv | WcOpcode::RecvWithImm)
    }
}

impl From<Opcode> for WcOpcode {
    fn from(op: Opcode) -> Self {
        match op {
            Opcode::Write => WcOpcode::Write,
            Opcode::Send => WcOpcode::Send,
            Opcode::Read => WcOpcode::Read,
            Opcode::WriteWithImm => WcOpcode::WriteWithImm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCompletion {
    pub wr_id: u64,
    pub status: WcStatus,
    pub opcode: WcOpcode,
    pub qp_num: u32,
    pub byte_len: u64,
    pub imm: Option<u32>,
    /// Queue index of the WQE this completion retires.
    pub wqe_index: u64,
}

/// Asynchronous notification handed back to whoever drives the event loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upcall {
    /// An armed CQ received a completion.
    CqEvent(CqHandle),
    /// A timer scheduled with `schedule_timer` fired.
    Timer(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRegion {
    pub pd: PdHandle,
    pub addr: u64,
    pub len: u64,
    pub lkey: u32,
    pub rkey: u32,
}

impl MemoryRegion {
    pub fn sge(&self, offset: u64, len: u32) -> Sge {
        Sge { addr: self.addr + offset, len, lkey: self.lkey }
    }

    pub fn remote(&self, offset: u64) -> RemoteAddr {
        RemoteAddr { addr: self.addr + offset, rkey: self.rkey }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerbsError {
    #[error("invalid {0} handle")]
    InvalidHandle(&'static str),
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("illegal QP transition {from:?} -> {to:?}")]
    IllegalTransition { from: QpState, to: QpState },
    #[error("RTR requires remote route attributes")]
    MissingRemote,
    #[error("unknown remote GID {0}")]
    UnknownGid(Gid),
    #[error("send queue full")]
    SendQueueFull,
    #[error("receive queue full")]
    RecvQueueFull,
    #[error("QP is in state {0:?}")]
    InvalidState(QpState),
    #[error("invalid work request: {0}")]
    InvalidWorkRequest(&'static str),
    #[error("doorbell index {index} outside [{lo}, {hi}]")]
    DoorbellOutOfRange { index: u64, lo: u64, hi: u64 },
    #[error("address range {addr:#x}+{len} not inside one buffer")]
    OutOfRange { addr: u64, len: u64 },
    #[error("resources belong to different devices")]
    DeviceMismatch,
    #[error("timer token collides with the reserved range")]
    ReservedToken,
    #[error(transparent)]
    Sim(#[from] crate::simcore::SimError),
}

pub type Result<T, E = VerbsError> = std::result::Result<T, E>;
