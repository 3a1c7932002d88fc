//! Deterministic discrete-event engine and simulated fabric.
//!
//! Time is virtual and measured in integer nanoseconds. One [`EventQueue`]
//! drives everything; there is no wall-clock dependence and no hidden
//! randomness, so identical inputs replay to identical traces.

mod fabric;
mod queue;
mod topology;
mod trace;

pub use fabric::{
    ArrivalOutcome, DropReason, Fabric, FabricCounters, FaultEvent, FaultScript, HopOutcome,
    InFlight, Packet, PacketKind, PacketMeta, WireOp, DEFAULT_MTU,
};
pub use queue::{EventQueue, SimClock, TaskHandle};
pub use topology::{
    Bandwidth, Dir, Hop, Host, HostId, Link, LinkId, LinkParams, Node, RnicId, SwitchId, Topology,
    TopologyBuilder,
};
pub use trace::{AttrValue, TraceEvent, TraceKind, TraceLog, TraceParseError};

use rand::SeedableRng;

/// Virtual time in nanoseconds.
pub type Time = u64;

pub const NS: Time = 1;
pub const US: Time = 1_000;
pub const MS: Time = 1_000_000;
pub const SEC: Time = 1_000_000_000;

/// The single seeded generator every random choice must come from.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("cannot schedule at {at} ns: clock is already at {now} ns")]
    ScheduleInPast { at: Time, now: Time },
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("no route from {0} to {1}")]
    NoRoute(RnicId, RnicId),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}
