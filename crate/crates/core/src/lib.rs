//! Simulated RDMA fabric with a transparent NIC-failover layer.
//!
//! * [`simcore`] - event loop, fabric, fault injection, traces.
//! * [`verbs`] - RC queue pairs, completion queues, memory regions and the
//!   RNIC transport engine.
//! * [`kvstore`] - out-of-band attribute store on the management network.
//! * [`shift`] - the failover layer: shadow resources, work-queue rewind,
//!   probing and order-preserving recovery, behind the same [`verbs::Verbs`]
//!   surface applications already use.

pub mod kvstore;
pub mod shift;
pub mod simcore;
pub mod verbs;
