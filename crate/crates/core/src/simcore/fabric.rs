use serde::{Deserialize, Serialize};

use super::topology::{Dir, Hop, LinkId, RnicId, Topology};
use super::{SimError, Time};

/// Largest payload carried by one packet.
pub const DEFAULT_MTU: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PacketKind {
    Data,
    Ack,
    NakRnr,
    NakAccess,
    ReadReq,
    ReadResp,
}

impl PacketKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PacketKind::Data => "DATA",
            PacketKind::Ack => "ACK",
            PacketKind::NakRnr => "NAK_RNR",
            PacketKind::NakAccess => "NAK_ACCESS",
            PacketKind::ReadReq => "READ_REQ",
            PacketKind::ReadResp => "READ_RESP",
        }
    }
}

/// Transport opcode carried by DATA packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WireOp {
    Write,
    WriteImm,
    Send,
    Read,
}

/// Per-packet transport header fields the RC engine needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PacketMeta {
    pub op: Option<WireOp>,
    /// Remote address of this packet's first payload byte (or of the read target).
    pub raddr: u64,
    pub rkey: u32,
    /// Total length of the message this packet belongs to.
    pub msg_len: u64,
    /// Byte offset of this packet within the message.
    pub offset: u64,
    pub first: bool,
    pub last: bool,
    /// Sender-side work-queue index, for diagnostics only.
    pub wqe_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: RnicId,
    pub dst: RnicId,
    pub src_qpn: u32,
    pub dst_qpn: u32,
    pub psn: u64,
    pub kind: PacketKind,
    pub payload: Vec<u8>,
    pub meta: PacketMeta,
    pub imm: Option<u32>,
}

impl Packet {
    pub fn control(src: RnicId, dst: RnicId, src_qpn: u32, dst_qpn: u32, psn: u64, kind: PacketKind) -> Self {
        Self {
            src,
            dst,
            src_qpn,
            dst_qpn,
            psn,
            kind,
            payload: Vec::new(),
            meta: PacketMeta::default(),
            imm: None,
        }
    }

    /// Bytes on the wire; headers are not modeled.
    pub fn wire_len(&self) -> u64 {
        self.payload.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultEvent {
    LinkDown { link: LinkId, at: Time },
    LinkUp { link: LinkId, at: Time },
    /// Down at `at`, back up at `at + duration`.
    Flap { link: LinkId, at: Time, duration: Time },
    /// ACK packets entering `link` during `[start, end)` are lost.
    DropAck { link: LinkId, start: Time, end: Time },
}

impl FaultEvent {
    pub fn time(&self) -> Time {
        match *self {
            FaultEvent::LinkDown { at, .. }
            | FaultEvent::LinkUp { at, .. }
            | FaultEvent::Flap { at, .. } => at,
            FaultEvent::DropAck { start, .. } => start,
        }
    }

    pub fn link(&self) -> LinkId {
        match *self {
            FaultEvent::LinkDown { link, .. }
            | FaultEvent::LinkUp { link, .. }
            | FaultEvent::Flap { link, .. }
            | FaultEvent::DropAck { link, .. } => link,
        }
    }
}

/// Time-ordered list of fault injections.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScript {
    events: Vec<FaultEvent>,
}

impl FaultScript {
    pub fn new(mut events: Vec<FaultEvent>) -> Self {
        events.sort_by_key(FaultEvent::time);
        Self { events }
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Flattens flaps into their down/up pair, keeping time order.
    pub fn expand(&self) -> Vec<FaultEvent> {
        let mut out = Vec::with_capacity(self.events.len() * 2);
        for e in &self.events {
            match *e {
                FaultEvent::Flap { link, at, duration } => {
                    out.push(FaultEvent::LinkDown { link, at });
                    out.push(FaultEvent::LinkUp { link, at: at + duration });
                }
                other => out.push(other),
            }
        }
        out.sort_by_key(FaultEvent::time);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    LinkDown,
    AckWindow,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::LinkDown => "link_down",
            DropReason::AckWindow => "ack_drop_window",
        }
    }
}

/// A packet currently traversing hop `hop` of its route.
#[derive(Debug, Clone)]
pub struct InFlight {
    pub packet: Packet,
    hop: usize,
    hop_start: Time,
}

#[derive(Debug)]
pub enum HopOutcome {
    /// Packet reaches the far end of the current hop at `at`.
    Arrive { at: Time, flight: InFlight },
    Dropped { packet: Packet, link: LinkId, reason: DropReason },
}

#[derive(Debug)]
pub enum ArrivalOutcome {
    Delivered(Packet),
    Forward(HopOutcome),
    Dropped { packet: Packet, link: LinkId, reason: DropReason },
}

#[derive(Debug, Clone, Default)]
struct LinkState {
    up: bool,
    /// Closed or open-ended down intervals, in time order.
    down: Vec<(Time, Option<Time>)>,
    ack_drop: Vec<(Time, Time)>,
    busy_until: [Time; 2],
}

impl LinkState {
    fn down_during(&self, from: Time, to: Time) -> bool {
        self.down
            .iter()
            .rev()
            .any(|&(s, e)| s <= to && e.is_none_or(|e| e > from))
    }

    fn drops_ack_at(&self, t: Time) -> bool {
        self.ack_drop.iter().any(|&(s, e)| s <= t && t < e)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FabricCounters {
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_delivered: u64,
}

/// Link state plus per-hop transit arithmetic. Scheduling of the returned
/// arrival times is the caller's job.
#[derive(Debug, Clone)]
pub struct Fabric {
    topo: Topology,
    links: Vec<LinkState>,
    switch_delay_ns: Time,
    mtu: u64,
    counters: FabricCounters,
}

impl Fabric {
    pub fn new(topo: Topology) -> Self {
        let links = topo
            .links()
            .iter()
            .map(|_| LinkState { up: true, ..Default::default() })
            .collect();
        Self { topo, links, switch_delay_ns: 0, mtu: DEFAULT_MTU, counters: FabricCounters::default() }
    }

    pub fn with_switch_delay(mut self, ns: Time) -> Self {
        self.switch_delay_ns = ns;
        self
    }

    pub fn with_mtu(mut self, mtu: u64) -> Self {
        assert!(mtu > 0);
        self.mtu = mtu;
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn mtu(&self) -> u64 {
        self.mtu
    }

    pub fn counters(&self) -> FabricCounters {
        self.counters
    }

    pub fn in_flight(&self) -> u64 {
        self.counters.injected - self.counters.delivered - self.counters.dropped
    }

    pub fn link_up(&self, link: LinkId) -> bool {
        self.links.get(link.0 as usize).is_some_and(|l| l.up)
    }

    /// Applies one fault at time `now`. Flaps must be expanded first, or
    /// their up half is applied at `at + duration` by the caller.
    pub fn apply_fault(&mut self, e: &FaultEvent, now: Time) -> Result<(), SimError> {
        let link = e.link();
        let st = self
            .links
            .get_mut(link.0 as usize)
            .ok_or(SimError::UnknownLink(link))?;
        match *e {
            FaultEvent::LinkDown { .. } | FaultEvent::Flap { .. } => {
                if st.up {
                    st.up = false;
                    st.down.push((now, None));
                }
            }
            FaultEvent::LinkUp { .. } => {
                if !st.up {
                    st.up = true;
                    if let Some(last) = st.down.last_mut() {
                        last.1 = Some(now);
                    }
                }
            }
            FaultEvent::DropAck { start, end, .. } => st.ack_drop.push((start, end)),
        }
        Ok(())
    }

    /// Puts `packet` on the wire at `now`.
    pub fn inject(&mut self, packet: Packet, now: Time) -> Result<HopOutcome, SimError> {
        assert!(packet.wire_len() <= self.mtu, "payload exceeds MTU");
        if self.topo.route(packet.src, packet.dst).is_none() {
            return Err(SimError::NoRoute(packet.src, packet.dst));
        }
        self.counters.injected += 1;
        let flight = InFlight { packet, hop: 0, hop_start: now };
        Ok(self.start_hop(flight, now))
    }

    fn hop_of(&self, f: &InFlight) -> Hop {
        self.topo.route(f.packet.src, f.packet.dst).expect("route checked on inject")[f.hop]
    }

    fn start_hop(&mut self, mut flight: InFlight, now: Time) -> HopOutcome {
        let hop = self.hop_of(&flight);
        let st = &mut self.links[hop.link.0 as usize];
        if !st.up {
            self.counters.dropped += 1;
            return HopOutcome::Dropped { packet: flight.packet, link: hop.link, reason: DropReason::LinkDown };
        }
        if flight.packet.kind == PacketKind::Ack && st.drops_ack_at(now) {
            self.counters.dropped += 1;
            return HopOutcome::Dropped { packet: flight.packet, link: hop.link, reason: DropReason::AckWindow };
        }
        let params = self.topo.links()[hop.link.0 as usize].params;
        let lane = match hop.dir {
            Dir::AtoB => 0,
            Dir::BtoA => 1,
        };
        let start = now.max(st.busy_until[lane]);
        let ser = params.bandwidth.serialization_ns(flight.packet.wire_len());
        st.busy_until[lane] = start + ser;
        flight.hop_start = start;
        HopOutcome::Arrive { at: start + ser + params.latency_ns, flight }
    }

    /// Handles the arrival of `flight` at the far end of its current hop.
    /// Returns the next hop's outcome, a delivery, or a drop if the link went
    /// down while the packet was on it.
    pub fn arrive(&mut self, mut flight: InFlight, now: Time) -> ArrivalOutcome {
        let hop = self.hop_of(&flight);
        if self.links[hop.link.0 as usize].down_during(flight.hop_start, now) {
            self.counters.dropped += 1;
            return ArrivalOutcome::Dropped { packet: flight.packet, link: hop.link, reason: DropReason::LinkDown };
        }
        let route_len = self.topo.route(flight.packet.src, flight.packet.dst).map_or(0, <[Hop]>::len);
        if flight.hop + 1 == route_len {
            self.counters.delivered += 1;
            self.counters.bytes_delivered += flight.packet.wire_len();
            return ArrivalOutcome::Delivered(flight.packet);
        }
        flight.hop += 1;
        // zero-buffer switch: the next hop starts once processing is done
        ArrivalOutcome::Forward(self.start_hop(flight, now + self.switch_delay_ns))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::topology::{Bandwidth, LinkParams};
    use crate::simcore::EventQueue;

    fn pkt(kind: PacketKind, len: usize) -> Packet {
        let mut p = Packet::control(RnicId(0), RnicId(1), 1, 2, 0, kind);
        p.payload = vec![0xab; len];
        p
    }

    /// Drives packets to completion through an event queue.
    fn run(fabric: &mut Fabric, sends: Vec<(Time, Packet)>, faults: Vec<FaultEvent>) -> Vec<(Time, Result<Packet, DropReason>)> {
        enum Ev {
            Send(Packet),
            Arrive(InFlight),
            Fault(FaultEvent),
        }
        let mut q = EventQueue::new();
        for f in FaultScript::new(faults).expand() {
            q.schedule(f.time(), Ev::Fault(f)).unwrap();
        }
        for (t, p) in sends {
            q.schedule(t, Ev::Send(p)).unwrap();
        }
        let mut out = Vec::new();
        while let Some((now, ev)) = q.pop() {
            let hop = match ev {
                Ev::Fault(f) => {
                    fabric.apply_fault(&f, now).unwrap();
                    continue;
                }
                Ev::Send(p) => fabric.inject(p, now).unwrap(),
                Ev::Arrive(f) => match fabric.arrive(f, now) {
                    ArrivalOutcome::Delivered(p) => {
                        out.push((now, Ok(p)));
                        continue;
                    }
                    ArrivalOutcome::Dropped { reason, .. } => {
                        out.push((now, Err(reason)));
                        continue;
                    }
                    ArrivalOutcome::Forward(h) => h,
                },
            };
            match hop {
                HopOutcome::Arrive { at, flight } => {
                    q.schedule(at, Ev::Arrive(flight)).unwrap();
                }
                HopOutcome::Dropped { reason, .. } => out.push((now, Err(reason))),
            }
        }
        out
    }

    fn fabric(latency: Time, bw: Bandwidth) -> Fabric {
        Fabric::new(Topology::single_switch(2, 1, LinkParams { latency_ns: latency, bandwidth: bw }))
    }

    /// Independent per-hop oracle: each hop costs latency + ceil(len / bw).
    fn oracle_delay(hops: u64, latency: u64, len: u64, bytes_per_ns: u64) -> u64 {
        let per_hop = latency + len.div_ceil(bytes_per_ns);
        hops * per_hop
    }

    #[test]
    fn single_hop_delay_matches_hand_computation() {
        let bw = Bandwidth::from_bytes_per_ns(4);
        // one hop: 1000 + 4096/4
        assert_eq!(1000 + bw.serialization_ns(4096), 2024);
        assert_eq!(oracle_delay(1, 1000, 4096, 4), 2024);
    }

    #[test]
    fn two_hop_delivery_time() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let out = run(&mut f, vec![(100, pkt(PacketKind::Data, 4096))], vec![]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 100 + oracle_delay(2, 1000, 4096, 4));
        assert!(out[0].1.is_ok());
    }

    #[test]
    fn back_to_back_packets_queue_behind_each_other() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let out = run(
            &mut f,
            vec![(0, pkt(PacketKind::Data, 4096)), (0, pkt(PacketKind::Data, 4096))],
            vec![],
        );
        // second packet waits 1024 ns for the first to serialize on each hop
        assert_eq!(out[0].0, 4048);
        assert_eq!(out[1].0, 4048 + 1024);
    }

    #[test]
    fn down_link_drops_at_transmit() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let l = f.topology().access_link(RnicId(0));
        let out = run(
            &mut f,
            vec![(11, pkt(PacketKind::Data, 10))],
            vec![FaultEvent::LinkDown { link: l, at: 10 }],
        );
        assert_eq!(out, vec![(11, Err(DropReason::LinkDown))]);
        assert_eq!(f.counters().dropped, 1);
    }

    #[test]
    fn in_flight_packet_dropped_when_link_goes_down() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let l = f.topology().access_link(RnicId(1));
        // second hop is in use during [2024, 4048]; a blip in the middle kills it
        let out = run(
            &mut f,
            vec![(0, pkt(PacketKind::Data, 4096))],
            vec![FaultEvent::Flap { link: l, at: 3000, duration: 10 }],
        );
        assert_eq!(out, vec![(4048, Err(DropReason::LinkDown))]);
    }

    #[test]
    fn flap_restores_link() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let l = f.topology().access_link(RnicId(0));
        let out = run(
            &mut f,
            vec![(5, pkt(PacketKind::Data, 1)), (2_000_000_000 + 5, pkt(PacketKind::Data, 1))],
            vec![FaultEvent::Flap { link: l, at: 0, duration: 2_000_000_000 }],
        );
        assert!(out[0].1.is_err());
        assert!(out[1].1.is_ok());
        assert!(f.link_up(l));
    }

    #[test]
    fn ack_window_drops_only_acks() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let l = f.topology().access_link(RnicId(0));
        let out = run(
            &mut f,
            vec![(10, pkt(PacketKind::Ack, 0)), (10, pkt(PacketKind::Data, 8))],
            vec![FaultEvent::DropAck { link: l, start: 0, end: 100 }],
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], (10, Err(DropReason::AckWindow)));
        assert!(out[1].1.is_ok());
    }

    #[test]
    fn unknown_link_rejected() {
        let mut f = fabric(1000, Bandwidth::from_bytes_per_ns(4));
        let e = FaultEvent::LinkDown { link: LinkId(99), at: 0 };
        assert!(matches!(f.apply_fault(&e, 0), Err(SimError::UnknownLink(LinkId(99)))));
    }

    #[test]
    fn conservation() {
        let mut f = fabric(500, Bandwidth::from_bytes_per_ns(1));
        let l = f.topology().access_link(RnicId(0));
        let sends = (0..200).map(|i| (i * 300, pkt(PacketKind::Data, 256))).collect();
        let out = run(&mut f, sends, vec![FaultEvent::Flap { link: l, at: 20_000, duration: 15_000 }]);
        let c = f.counters();
        assert_eq!(out.len(), 200);
        assert_eq!(c.injected, c.delivered + c.dropped);
        assert!(c.dropped > 0 && c.delivered > 0);
    }
}
