use super::*;
use crate::simcore::{FaultEvent, LinkParams, SEC};
use crate::verbs::{QpState, Sge, WcOpcode, WcStatus};

const BUF: u64 = 256 * 1024;

#[derive(Clone, Copy)]
struct App {
    rnic: RnicId,
    host: HostId,
    cq: CqHandle,
    qp: QpHandle,
    buf: u64,
    mr: MemoryRegion,
}

fn app(s: &mut impl Verbs, rnic: RnicId, sq: u32, rq: u32) -> App {
    let host = s.host_of(rnic);
    let dev = s.open_device(rnic).unwrap();
    let pd = s.alloc_pd(dev).unwrap();
    let cq = s.create_cq(dev, 1024).unwrap();
    let qp = s.create_qp(pd, QpInitAttr { send_cq: cq, recv_cq: cq, sq_cap: sq, rq_cap: rq }).unwrap();
    let buf = s.alloc_buffer(host, BUF).unwrap();
    let mr = s.reg_mr(pd, buf, BUF).unwrap();
    App { rnic, host, cq, qp, buf, mr }
}

fn connect(s: &mut impl Verbs, a: &App, b: &App) {
    let ra = s.query_qp(a.qp).unwrap().route;
    let rb = s.query_qp(b.qp).unwrap().route;
    s.connect_qp(a.qp, &QpAttrs { remote: Some(rb), rq_psn: 7, sq_psn: 3, timers: None }).unwrap();
    s.connect_qp(b.qp, &QpAttrs { remote: Some(ra), rq_psn: 3, sq_psn: 7, timers: None }).unwrap();
}

/// Two hosts with two RNICs each; `a` on host 0's first RNIC, `b` on host 1's.
fn world() -> (Shift, App, App) {
    world_with(|_| {})
}

fn world_with(f: impl FnOnce(&mut ShiftConfig)) -> (Shift, App, App) {
    let topo = Topology::single_switch(2, 2, LinkParams::default());
    let mut cfg = ShiftConfig::paired(&topo);
    f(&mut cfg);
    let mut s = Shift::new(topo, ClusterConfig::default(), cfg).unwrap();
    let a = app(&mut s, RnicId(0), 256, 512);
    let b = app(&mut s, RnicId(2), 256, 512);
    connect(&mut s, &a, &b);
    settle(&mut s, 5 * MS);
    (s, a, b)
}

fn settle(s: &mut Shift, d: Time) {
    let until = s.now() + d;
    while s.next_upcall(until).is_some() {}
}

fn link_of(s: &Shift, r: RnicId) -> crate::simcore::LinkId {
    s.cluster().topology().access_link(r)
}

#[derive(Clone, Copy, PartialEq)]
enum Op {
    Write,
    Send,
    Read,
}

/// Posts `count` stamped WRs from `a` to `b`, one every `gap`, and polls
/// both CQs on events until `end`. Returns each side's polled completions.
fn paced(s: &mut Shift, a: &App, b: &App, op: Op, count: u64, gap: Time, end: Time) -> (Vec<WorkCompletion>, Vec<WorkCompletion>) {
    const SZ: u64 = 64;
    if op == Op::Send {
        for i in 0..count {
            let sge = b.mr.sge(i * SZ, SZ as u32);
            s.post_recv(b.qp, RecvRequest { wr_id: 1_000_000 + i, sgl: vec![sge] }).unwrap();
        }
    }
    if op == Op::Read {
        for i in 0..count {
            s.write_memory(b.host, b.buf + i * SZ, &stamp(i)).unwrap();
        }
    }
    s.req_notify_cq(a.cq).unwrap();
    s.req_notify_cq(b.cq).unwrap();
    let t0 = s.now();
    s.schedule_timer(t0 + gap, 0).unwrap();
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    let mut posted = 0;
    while let Some(u) = s.next_upcall(end) {
        match u {
            Upcall::Timer(_) => {
                let i = posted;
                posted += 1;
                let wr = match op {
                    Op::Write => {
                        s.write_memory(a.host, a.buf + i * SZ, &stamp(i)).unwrap();
                        WorkRequest::write(i, a.mr.sge(i * SZ, SZ as u32), b.mr.remote(i * SZ))
                    }
                    Op::Send => {
                        s.write_memory(a.host, a.buf + i * SZ, &stamp(i)).unwrap();
                        WorkRequest::send(i, a.mr.sge(i * SZ, SZ as u32))
                    }
                    Op::Read => WorkRequest::read(i, a.mr.sge(i * SZ, SZ as u32), b.mr.remote(i * SZ)),
                };
                s.post_send(a.qp, wr).unwrap();
                if posted < count {
                    let t = s.now() + gap;
                    s.schedule_timer(t, 0).unwrap();
                }
            }
            Upcall::CqEvent(cq) => {
                let out = if cq == a.cq { &mut wa } else { &mut wb };
                out.extend(s.poll_cq(cq, usize::MAX));
                s.req_notify_cq(cq).unwrap();
                out.extend(s.poll_cq(cq, usize::MAX));
            }
        }
    }
    wa.extend(s.poll_cq(a.cq, usize::MAX));
    wb.extend(s.poll_cq(b.cq, usize::MAX));
    (wa, wb)
}

fn stamp(i: u64) -> Vec<u8> {
    let mut v = i.to_le_bytes().to_vec();
    v.resize(64, (i % 251) as u8);
    v
}

fn ids_ok(wcs: &[WorkCompletion], count: u64) -> bool {
    wcs.iter().all(|w| w.status == WcStatus::Success) && wcs.iter().map(|w| w.wr_id).eq(0..count)
}

fn sq_path(s: &Shift, qpn: u32) -> Vec<String> {
    s.trace()
        .events()
        .iter()
        .filter(|e| e.kind == TraceKind::StateTransition && e.str("entity") == Some("sq") && e.int("qpn") == Some(qpn.into()))
        .map(|e| e.str("to").unwrap().to_owned())
        .collect()
}

#[test]
fn shadow_builds_backup_resources() {
    let (s, a, b) = world();
    for x in [&a, &b] {
        assert!(s.backup_ready(x.qp));
        let bq = s.backup_qp(x.qp).unwrap();
        assert_eq!(s.cluster().qp_state(bq).unwrap(), QpState::Rts);
        assert_eq!(s.cluster().qp_rnic(bq).unwrap(), s.backup_of(x.rnic).unwrap());
        let snap = s.cluster().query_qp(bq).unwrap();
        assert_eq!((snap.init.sq_cap, snap.init.rq_cap), (256, 512));
        assert!(s.shadow_complete(x.rnic));
    }
    // backup QPs point at each other
    let ba = s.backup_qp(a.qp).unwrap();
    let bb = s.backup_qp(b.qp).unwrap();
    assert_eq!(s.cluster().query_qp(ba).unwrap().attrs.remote, Some(s.cluster().qp_route(bb).unwrap()));
    let kinds: Vec<_> = s.shadow_records(a.rnic).iter().map(|r| r.op.kind()).collect();
    assert_eq!(kinds, ["OPEN_DEVICE", "ALLOC_PD", "CREATE_CQ", "CREATE_QP", "REG_MR", "MODIFY_QP", "MODIFY_QP", "MODIFY_QP"]);
    assert_eq!(s.backup_memory_bytes(), 2 * (qp_footprint(256, 512) + cq_footprint(1024)));
}

#[test]
fn no_fault_run_leaves_backup_idle() {
    let (mut s, a, b) = world();
    let before = s.counters();
    let end = s.now() + 100 * MS;
    let (wa, _) = paced(&mut s, &a, &b, Op::Write, 50, MS, end);
    assert!(ids_ok(&wa, 50));
    let c = s.counters();
    assert_eq!(c.post_steps - before.post_steps, c.post_calls - before.post_calls);
    assert!(c.poll_steps - before.poll_steps <= 2 * (c.poll_calls - before.poll_calls) + 4 * 50);
    for x in [&a, &b] {
        let bq = s.backup_qp(x.qp).unwrap();
        assert_eq!(s.cluster().qp_stats(bq).unwrap().wqes_started, 0);
    }
    assert_eq!(c.fallbacks, 0);
}

#[test]
fn fatal_local_failure_moves_writes_to_backup() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t0 + 50 * MS }])).unwrap();
    let (wa, _) = paced(&mut s, &a, &b, Op::Write, 100, MS, t0 + 300 * MS);
    assert!(ids_ok(&wa, 100), "{:?}", wa.iter().filter(|w| !w.status.is_ok()).collect::<Vec<_>>());
    let mem = s.read_memory(b.host, b.buf, 100 * 64).unwrap();
    let want: Vec<u8> = (0..100).flat_map(stamp).collect();
    assert_eq!(mem, want);
    assert_eq!(s.endpoint_state(a.qp).unwrap().0, SqState::Fallback);
    assert_eq!(s.counters().fallbacks, 2, "both sides fall back");
    let path = sq_path(&s, s.query_qp(a.qp).unwrap().qpn);
    assert_eq!(path, ["FALLBACK"]);
    assert!(wa.iter().all(|w| w.qp_num == s.query_qp(a.qp).unwrap().qpn));
}

#[test]
fn remote_failure_is_symmetric() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let link = link_of(&s, b.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t0 + 50 * MS }])).unwrap();
    let (wa, _) = paced(&mut s, &a, &b, Op::Write, 100, MS, t0 + 300 * MS);
    assert!(ids_ok(&wa, 100));
    let want: Vec<u8> = (0..100).flat_map(stamp).collect();
    assert_eq!(s.read_memory(b.host, b.buf, 100 * 64).unwrap(), want);
}

#[test]
fn sends_keep_receive_order_across_fallback() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t0 + 20 * MS }])).unwrap();
    let (wa, wb) = paced(&mut s, &a, &b, Op::Send, 60, MS, t0 + 300 * MS);
    assert!(ids_ok(&wa, 60));
    assert_eq!(wb.len(), 60);
    assert!(wb.iter().all(|w| w.opcode == WcOpcode::Recv && w.status.is_ok()));
    assert!(wb.iter().map(|w| w.wr_id).eq(1_000_000..1_000_060));
    let want: Vec<u8> = (0..60).flat_map(stamp).collect();
    assert_eq!(s.read_memory(b.host, b.buf, 60 * 64).unwrap(), want);
    assert_eq!(s.endpoint_state(b.qp).unwrap().1, RqState::Fallback);
}

#[test]
fn reads_survive_failure() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t0 + 30 * MS }])).unwrap();
    let (wa, _) = paced(&mut s, &a, &b, Op::Read, 80, MS, t0 + 300 * MS);
    assert!(ids_ok(&wa, 80));
    let want: Vec<u8> = (0..80).flat_map(stamp).collect();
    assert_eq!(s.read_memory(a.host, a.buf, 80 * 64).unwrap(), want);
}

#[test]
fn flap_recovers_to_default() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::Flap { link, at: t0 + 100 * MS, duration: 2 * SEC }]))
        .unwrap();
    let (wa, _) = paced(&mut s, &a, &b, Op::Write, 400, 10 * MS, t0 + 5 * SEC);
    assert!(ids_ok(&wa, 400));
    let want: Vec<u8> = (0..400).flat_map(stamp).collect();
    assert_eq!(s.read_memory(b.host, b.buf, 400 * 64).unwrap(), want);
    let qpn = s.query_qp(a.qp).unwrap().qpn;
    assert_eq!(sq_path(&s, qpn), ["FALLBACK", "WAIT_SIGNALED", "WAIT_SINKED", "DEFAULT"]);
    assert_eq!(s.endpoint_state(a.qp).unwrap().0, SqState::Default);
    // b only receives, so its own send side waits for a signaled post
    assert_eq!(s.endpoint_state(b.qp).unwrap(), (SqState::WaitSignaled, RqState::Default));
    // later traffic leaves through the default RNIC again
    let started = s.cluster().qp_stats(a.qp).unwrap().wqes_started;
    let end = s.now() + 100 * MS;
    let (wa2, _) = paced(&mut s, &a, &b, Op::Write, 5, MS, end);
    assert!(wa2.iter().all(|w| w.status.is_ok()));
    assert_eq!(s.cluster().qp_stats(a.qp).unwrap().wqes_started, started + 5);
}

#[test]
fn both_paths_down_is_fatal_and_visible() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let l1 = link_of(&s, a.rnic);
    let l2 = link_of(&s, s.backup_of(a.rnic).unwrap());
    s.install_faults(&FaultScript::new(vec![
        FaultEvent::LinkDown { link: l1, at: t0 + 10 * MS },
        FaultEvent::LinkDown { link: l2, at: t0 + 10 * MS },
    ]))
    .unwrap();
    let (wa, _) = paced(&mut s, &a, &b, Op::Write, 30, MS, t0 + 300 * MS);
    assert!(wa.iter().any(|w| !w.status.is_ok()));
    assert!(s.is_fatal(a.qp));
    assert!(s.trace().events().iter().any(|e| e.kind == TraceKind::Fatal));
}

#[test]
fn crisscross_initialization_completes() {
    let (rounds, done) = crisscross(false);
    assert!(done, "best-effort executor finishes");
    assert!(rounds.iter().all(|&r| r <= 10), "{rounds:?}");
    let (_, done) = crisscross(true);
    assert!(!done, "strict in-order execution deadlocks");
}

/// Host A lists [create a1, connect a1, create a2, connect a2]; host B lists
/// [create b2, connect b2, create b1, connect b1]. In order, each host's
/// first RTR waits on a QP the other host only creates later.
fn crisscross(strict: bool) -> ([u32; 2], bool) {
    let topo = Topology::single_switch(2, 2, LinkParams::default());
    let mut cfg = ShiftConfig::paired(&topo);
    cfg.strict_shadow_order = strict;
    let mut s = Shift::new(topo, ClusterConfig::default(), cfg).unwrap();
    let (ra, rb) = (RnicId(0), RnicId(2));
    let res = |s: &mut Shift, r: RnicId| {
        let dev = s.open_device(r).unwrap();
        let pd = s.alloc_pd(dev).unwrap();
        let cq = s.create_cq(dev, 64).unwrap();
        (pd, cq)
    };
    let (pa, ca) = res(&mut s, ra);
    let (pb, cb) = res(&mut s, rb);
    let init = |cq| QpInitAttr { send_cq: cq, recv_cq: cq, sq_cap: 16, rq_cap: 16 };
    let a1 = s.create_qp(pa, init(ca)).unwrap();
    let b1 = s.create_qp(pb, init(cb)).unwrap();
    let a2 = s.create_qp(pa, init(ca)).unwrap();
    let b2 = s.create_qp(pb, init(cb)).unwrap();
    let route = |s: &Shift, q| s.query_qp(q).unwrap().route;
    for (x, y) in [(a1, b1), (b1, a1), (a2, b2), (b2, a2)] {
        let attrs = QpAttrs { remote: Some(route(&s, y)), rq_psn: 0, sq_psn: 0, timers: None };
        s.connect_qp(x, &attrs).unwrap();
    }
    // A: 0 dev, 1 pd, 2 cq, 3 create a1, 4 create a2, 5..8 a1, 8..11 a2
    s.reorder_shadow_list(ra, &[0, 1, 2, 3, 5, 6, 7, 4, 8, 9, 10]).unwrap();
    // B: 3 create b1, 4 create b2, 5..8 b1, 8..11 b2
    s.reorder_shadow_list(rb, &[0, 1, 2, 4, 8, 9, 10, 3, 5, 6, 7]).unwrap();
    settle(&mut s, 20 * MS);
    let done = s.shadow_complete(ra) && s.shadow_complete(rb);
    ([s.shadow_rounds(ra), s.shadow_rounds(rb)], done)
}

#[test]
fn absent_peer_never_blocks_other_records() {
    let topo = Topology::single_switch(2, 2, LinkParams::default());
    let mut s = Shift::new(topo.clone(), ClusterConfig::default(), ShiftConfig::paired(&topo)).unwrap();
    let a = app(&mut s, RnicId(0), 16, 16);
    // peer route of a QP whose backup is never published
    let fake = crate::verbs::QpRouteAttrs { gid: crate::verbs::Gid::of(RnicId(2)), qpn: 4242, lid: 2 };
    s.connect_qp(a.qp, &QpAttrs { remote: Some(fake), rq_psn: 0, sq_psn: 0, timers: None }).unwrap();
    let dev = s.open_device(RnicId(0)).unwrap();
    let pd = s.alloc_pd(dev).unwrap();
    settle(&mut s, 20 * MS);
    let recs = s.shadow_records(RnicId(0));
    let pending: Vec<_> = recs.iter().filter(|r| !r.done).map(|r| r.op.kind()).collect();
    assert_eq!(pending, ["MODIFY_QP", "MODIFY_QP"], "RTR and RTS stay pending");
    assert!(matches!(recs.last().unwrap().op, ShadowOp::AllocPd { pd: p, .. } if p == pd));
    assert!(recs.last().unwrap().done);
    assert!(s.trace().events().iter().any(|e| e.kind == TraceKind::Warning));
}

/// One RECV at b; the ACK of the SEND that consumes it is lost, then a's
/// default link dies and the SEND is rewound. Returns both sides' WCs.
fn ack_drop_then_failover(absorb: bool) -> (Shift, Vec<WorkCompletion>, Vec<WorkCompletion>) {
    let (mut s, a, b) = world_with(|c| c.absorb_duplicates = absorb);
    let t0 = s.now();
    let (la, lb) = (link_of(&s, a.rnic), link_of(&s, b.rnic));
    let sge = b.mr.sge(0, 64);
    s.post_recv(b.qp, RecvRequest { wr_id: 77, sgl: vec![sge] }).unwrap();
    s.install_faults(&FaultScript::new(vec![
        FaultEvent::DropAck { link: lb, start: t0, end: t0 + 10 * MS },
        FaultEvent::LinkDown { link: la, at: t0 + 5 * MS },
    ]))
    .unwrap();
    s.post_send(a.qp, WorkRequest::send(1, a.mr.sge(0, 64))).unwrap();
    s.req_notify_cq(a.cq).unwrap();
    s.req_notify_cq(b.cq).unwrap();
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    let end = t0 + 500 * MS;
    while let Some(u) = s.next_upcall(end) {
        if let Upcall::CqEvent(cq) = u {
            let out = if cq == a.cq { &mut wa } else { &mut wb };
            out.extend(s.poll_cq(cq, usize::MAX));
            s.req_notify_cq(cq).unwrap();
        }
    }
    wa.extend(s.poll_cq(a.cq, usize::MAX));
    wb.extend(s.poll_cq(b.cq, usize::MAX));
    (s, wa, wb)
}

fn corner_actions(s: &Shift) -> Vec<String> {
    s.trace().of_kind(TraceKind::CornerCase).map(|e| e.str("action").unwrap_or("rnr").to_owned()).collect()
}

#[test]
fn ack_drop_then_failover_surfaces_rnr_without_absorption() {
    let (s, wa, wb) = ack_drop_then_failover(false);
    assert_eq!(wb.len(), 1, "consumed exactly once");
    assert_eq!(wa.len(), 1);
    assert_eq!(wa[0].status, WcStatus::RnrRetryExcErr);
    assert_eq!(corner_actions(&s), ["not_absorbed", "rnr"]);
}

#[test]
fn ack_drop_then_failover_absorbs_the_copy() {
    let (s, wa, wb) = ack_drop_then_failover(true);
    assert_eq!(wb.len(), 1, "consumed exactly once");
    assert_eq!((wb[0].wr_id, wb[0].status), (77, WcStatus::Success));
    assert_eq!(wa.len(), 1);
    assert_eq!(wa[0].status, WcStatus::Success);
    assert_eq!(corner_actions(&s), ["absorb", "absorbed"]);
}

#[test]
fn saturated_sends_survive_lost_acks() {
    // back-to-back small SENDs: the link dies with ACKs of delivered
    // messages still in flight
    let (mut s, a, b) = world();
    let t0 = s.now();
    let (n, sz) = (400u64, 512u64);
    for i in 0..n {
        s.post_recv(b.qp, RecvRequest { wr_id: 1_000_000 + i, sgl: vec![b.mr.sge(i * sz, sz as u32)] }).unwrap();
        s.write_memory(a.host, a.buf + i * sz, &stamp(i)).unwrap();
    }
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t0 + 20 * US + 3 }])).unwrap();
    s.req_notify_cq(a.cq).unwrap();
    s.req_notify_cq(b.cq).unwrap();
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    let mut posted = 0;
    let post = |s: &mut Shift, posted: &mut u64, done: u64| {
        while *posted < n && *posted < done + 32 {
            s.post_send(a.qp, WorkRequest::send(*posted, a.mr.sge(*posted * sz, sz as u32))).unwrap();
            *posted += 1;
        }
    };
    post(&mut s, &mut posted, 0);
    while let Some(u) = s.next_upcall(t0 + 400 * MS) {
        if let Upcall::CqEvent(cq) = u {
            let got = s.poll_cq(cq, usize::MAX);
            if cq == a.cq { wa.extend(got) } else { wb.extend(got) }
            s.req_notify_cq(cq).unwrap();
            post(&mut s, &mut posted, wa.len() as u64);
        }
    }
    assert!(ids_ok(&wa, n));
    assert!(wb.iter().all(|w| w.status.is_ok()) && wb.iter().map(|w| w.wr_id).eq(1_000_000..1_000_000 + n));
    for i in 0..n {
        assert_eq!(s.read_memory(b.host, b.buf + i * sz, 64).unwrap(), stamp(i), "slot {i}");
    }
    assert!(corner_actions(&s).iter().any(|a| a == "absorb"), "the fault must hit delivered-but-unacked SENDs");
}

#[test]
fn absorbed_copies_wait_behind_a_full_receive_queue() {
    // receiver keeps its 32-deep RQ full, so the sinks cannot all fit
    let topo = Topology::single_switch(2, 2, LinkParams::default());
    let cfg = ShiftConfig::paired(&topo);
    let mut s = Shift::new(topo, ClusterConfig::default(), cfg).unwrap();
    let a = app(&mut s, RnicId(0), 32, 32);
    let b = app(&mut s, RnicId(2), 32, 32);
    connect(&mut s, &a, &b);
    settle(&mut s, 5 * MS);
    let t0 = s.now();
    let (n, sz) = (400u64, 512u64);
    for i in 0..n {
        s.write_memory(a.host, a.buf + i * sz, &stamp(i)).unwrap();
    }
    let recv = |s: &mut Shift, i: u64| {
        s.post_recv(b.qp, RecvRequest { wr_id: 1_000_000 + i, sgl: vec![b.mr.sge(i * sz, sz as u32)] }).unwrap();
    };
    for i in 0..32 {
        recv(&mut s, i);
    }
    let mut recvs = 32;
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t0 + 20 * US + 3 }])).unwrap();
    s.req_notify_cq(a.cq).unwrap();
    s.req_notify_cq(b.cq).unwrap();
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    let mut posted = 0;
    let post = |s: &mut Shift, posted: &mut u64, done: u64| {
        while *posted < n && *posted < done + 32 {
            s.post_send(a.qp, WorkRequest::send(*posted, a.mr.sge(*posted * sz, sz as u32))).unwrap();
            *posted += 1;
        }
    };
    post(&mut s, &mut posted, 0);
    while let Some(u) = s.next_upcall(t0 + 400 * MS) {
        if let Upcall::CqEvent(cq) = u {
            let got = s.poll_cq(cq, usize::MAX);
            if cq == a.cq {
                wa.extend(got);
            } else {
                wb.extend(got);
                while recvs < n && recvs < wb.len() as u64 + 32 {
                    recv(&mut s, recvs);
                    recvs += 1;
                }
            }
            s.req_notify_cq(cq).unwrap();
            post(&mut s, &mut posted, wa.len() as u64);
        }
    }
    assert!(ids_ok(&wa, n));
    assert!(wb.iter().all(|w| w.status.is_ok()) && wb.iter().map(|w| w.wr_id).eq(1_000_000..1_000_000 + n));
    for i in 0..n {
        assert_eq!(s.read_memory(b.host, b.buf + i * sz, 64).unwrap(), stamp(i), "slot {i}");
    }
    assert!(corner_actions(&s).iter().any(|a| a == "absorb"));
}

#[test]
fn proactive_switch_round_trip() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    s.schedule_timer(t0 + 30 * MS, 99).unwrap();
    // switch mid-stream
    let qp = a.qp;
    let end = t0 + 200 * MS;
    let mut wa = Vec::new();
    s.req_notify_cq(a.cq).unwrap();
    let mut posted = 0u64;
    s.schedule_timer(t0 + MS, 0).unwrap();
    while let Some(u) = s.next_upcall(end) {
        match u {
            Upcall::Timer(99) => s.proactive_switch(qp, Side::Backup).unwrap(),
            Upcall::Timer(_) => {
                let i = posted;
                posted += 1;
                s.write_memory(a.host, a.buf + i * 64, &stamp(i)).unwrap();
                s.post_send(qp, WorkRequest::write(i, a.mr.sge(i * 64, 64), b.mr.remote(i * 64))).unwrap();
                if posted < 100 {
                    let t = s.now() + MS;
                    s.schedule_timer(t, 0).unwrap();
                }
            }
            Upcall::CqEvent(cq) => {
                wa.extend(s.poll_cq(cq, usize::MAX));
                s.req_notify_cq(cq).unwrap();
            }
        }
    }
    wa.extend(s.poll_cq(a.cq, usize::MAX));
    assert!(ids_ok(&wa, 100));
    assert_eq!(s.endpoint_state(qp).unwrap().0, SqState::Fallback);
    let bq = s.backup_qp(qp).unwrap();
    assert!(s.cluster().qp_stats(bq).unwrap().wqes_started > 0);
    let want: Vec<u8> = (0..100).flat_map(stamp).collect();
    assert_eq!(s.read_memory(b.host, b.buf, 100 * 64).unwrap(), want);

    // the default link dying no longer matters
    let link = link_of(&s, a.rnic);
    let t1 = s.now();
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t1 + MS }])).unwrap();
    s.proactive_switch(qp, Side::Backup).unwrap();
    let end = t1 + 50 * MS;
    let (wa2, _) = paced(&mut s, &a, &b, Op::Write, 10, MS, end);
    assert!(wa2.iter().all(|w| w.status.is_ok()) && wa2.len() == 10);
    assert_eq!(s.counters().fallbacks, 0);
}

#[test]
fn idle_switch_completes_after_one_round_trip() {
    let (mut s, a, _) = world();
    s.proactive_switch(a.qp, Side::Backup).unwrap();
    assert_eq!(s.endpoint_state(a.qp).unwrap().0, SqState::WaitSinked);
    settle(&mut s, MS);
    assert_eq!(s.endpoint_state(a.qp).unwrap().0, SqState::Fallback);
    s.proactive_switch(a.qp, Side::Default).unwrap();
    settle(&mut s, MS);
    assert_eq!(s.endpoint_state(a.qp).unwrap().0, SqState::Default);
}

#[test]
fn switch_to_dead_backup_aborts() {
    let (mut s, a, b) = world();
    let t0 = s.now();
    let l = link_of(&s, s.backup_of(a.rnic).unwrap());
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link: l, at: t0 + MS }])).unwrap();
    settle(&mut s, 2 * MS);
    s.proactive_switch(a.qp, Side::Backup).unwrap();
    let end = s.now() + 200 * MS;
    let (wa, _) = paced(&mut s, &a, &b, Op::Write, 20, MS, end);
    assert!(ids_ok(&wa, 20));
    assert_eq!(s.endpoint_state(a.qp).unwrap().0, SqState::Default);
}

#[test]
fn reserved_ranges_are_rejected() {
    let (mut s, a, b) = world();
    assert_eq!(s.schedule_timer(s.now() + 1, RESERVED_TOKEN_BASE), Err(VerbsError::ReservedToken));
    let wr = WorkRequest::write(u64::MAX, a.mr.sge(0, 8), b.mr.remote(0));
    assert!(s.post_send(a.qp, wr).is_err());
}

#[test]
fn transparent_over_generic_app() {
    // the same app code drives a bare cluster and the failover layer
    fn drive(v: &mut impl Verbs, a: &App, b: &App) -> Vec<u64> {
        for i in 0..20u64 {
            v.post_send(a.qp, WorkRequest::write(i, a.mr.sge(i * 8, 8), b.mr.remote(i * 8))).unwrap();
        }
        let end = v.now() + 10 * MS;
        while v.next_upcall(end).is_some() {}
        v.poll_cq(a.cq, usize::MAX).iter().map(|w| w.wr_id).collect()
    }
    let (mut s, a, b) = world();
    let got = drive(&mut s, &a, &b);
    let topo = Topology::single_switch(2, 2, LinkParams::default());
    let mut c = Cluster::new(topo, ClusterConfig::default());
    let ca = app(&mut c, RnicId(0), 256, 512);
    let cb = app(&mut c, RnicId(2), 256, 512);
    connect(&mut c, &ca, &cb);
    assert_eq!(drive(&mut c, &ca, &cb), got);
}

#[test]
fn sge_remap_targets_backup_keys() {
    let (mut s, a, _) = world();
    let wr = WorkRequest { wr_id: 1, opcode: crate::verbs::Opcode::Send, sgl: vec![Sge { addr: a.buf, len: 8, lkey: a.mr.lkey }], remote: None, imm: None, signaled: true };
    let e = s.ep_of_qp[&a.qp];
    let w = s.remap_send(e, &wr).unwrap();
    assert_eq!(w.sgl[0].lkey, s.mr_fwd[&(a.rnic, a.mr.lkey)].lkey);
    assert_ne!(w.sgl[0].lkey, a.mr.lkey);
}



#[test]
fn send_ahead_of_any_backup_recv_waits_for_the_next_post() {
    let (mut s, a, b) = world();
    s.req_notify_cq(a.cq).unwrap();
    s.req_notify_cq(b.cq).unwrap();
    s.post_recv(b.qp, RecvRequest { wr_id: 500, sgl: vec![b.mr.sge(0, 64)] }).unwrap();
    s.post_send(a.qp, WorkRequest::send(0, a.mr.sge(0, 64))).unwrap();
    settle(&mut s, MS);
    let t = s.now();
    let link = link_of(&s, a.rnic);
    s.install_faults(&FaultScript::new(vec![FaultEvent::LinkDown { link, at: t + MS }])).unwrap();
    settle(&mut s, 2 * MS);
    s.post_send(a.qp, WorkRequest::write(1, a.mr.sge(0, 64), b.mr.remote(64))).unwrap();
    settle(&mut s, 50 * MS);
    let _ = (s.poll_cq(a.cq, 16), s.poll_cq(b.cq, 16));
    settle(&mut s, 50 * MS);
    let _ = (s.poll_cq(a.cq, 16), s.poll_cq(b.cq, 16));
    assert_eq!(s.endpoint_state(b.qp).unwrap().1, RqState::Fallback);

    // b has nothing posted when this arrives
    s.write_memory(a.host, a.buf + 128, &stamp(9)).unwrap();
    s.post_send(a.qp, WorkRequest::send(2, a.mr.sge(128, 64))).unwrap();
    settle(&mut s, 10 * MS);
    let wa = s.poll_cq(a.cq, 16);
    assert_eq!(wa.len(), 1);
    assert!(wa[0].status.is_ok());
    assert!(s.poll_cq(b.cq, 16).is_empty());

    s.post_recv(b.qp, RecvRequest { wr_id: 501, sgl: vec![b.mr.sge(256, 64)] }).unwrap();
    let wb = s.poll_cq(b.cq, 16);
    assert_eq!(wb.len(), 1);
    assert_eq!((wb[0].wr_id, wb[0].status, wb[0].byte_len), (501, WcStatus::Success, 64));
    assert_eq!(s.read_memory(b.host, b.buf + 256, 64).unwrap(), stamp(9));
}
