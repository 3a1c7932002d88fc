#![allow(dead_code)]

use shift_core::shift::{Shift, ShiftConfig};
use shift_core::simcore::{HostId, LinkParams, RnicId, Time, Topology, MS};
use shift_core::verbs::{ClusterConfig, CqHandle, MemoryRegion, QpAttrs, QpHandle, QpInitAttr, Upcall, Verbs};

pub const BUF: u64 = 1 << 20;

#[derive(Clone, Copy)]
pub struct App {
    pub rnic: RnicId,
    pub host: HostId,
    pub cq: CqHandle,
    pub qp: QpHandle,
    pub buf: u64,
    pub mr: MemoryRegion,
}

pub fn app(v: &mut impl Verbs, rnic: RnicId, depth: u32) -> App {
    let host = v.host_of(rnic);
    let dev = v.open_device(rnic).unwrap();
    let pd = v.alloc_pd(dev).unwrap();
    let cq = v.create_cq(dev, 4 * depth).unwrap();
    let qp = v.create_qp(pd, QpInitAttr { send_cq: cq, recv_cq: cq, sq_cap: depth, rq_cap: depth }).unwrap();
    let buf = v.alloc_buffer(host, BUF).unwrap();
    let mr = v.reg_mr(pd, buf, BUF).unwrap();
    App { rnic, host, cq, qp, buf, mr }
}

pub fn pair(v: &mut impl Verbs, depth: u32) -> (App, App) {
    let a = app(v, RnicId(0), depth);
    let b = app(v, RnicId(2), depth);
    let ra = v.query_qp(a.qp).unwrap().route;
    let rb = v.query_qp(b.qp).unwrap().route;
    v.connect_qp(a.qp, &QpAttrs { remote: Some(rb), rq_psn: 11, sq_psn: 5, timers: None }).unwrap();
    v.connect_qp(b.qp, &QpAttrs { remote: Some(ra), rq_psn: 5, sq_psn: 11, timers: None }).unwrap();
    (a, b)
}

pub fn topo() -> Topology {
    Topology::single_switch(2, 2, LinkParams::default())
}

pub fn shift() -> Shift {
    let t = topo();
    let cfg = ShiftConfig::paired(&t);
    Shift::new(t, ClusterConfig::default(), cfg).unwrap()
}

/// Runs the loop until `d` from now, discarding upcalls.
pub fn settle(v: &mut impl Verbs, d: Time) {
    let until = v.now() + d;
    while v.next_upcall(until).is_some() {}
}

pub fn settle_ms(v: &mut impl Verbs, ms: u64) {
    settle(v, ms * MS)
}

/// Drives `a` -> `b` WRITEs of the given sizes, `depth` outstanding, until
/// all complete or `budget` runs out. Returns the completed wr_ids in
/// completion order.
pub fn writes(v: &mut impl Verbs, a: &App, b: &App, sizes: &[u32], depth: usize, budget: Time) -> Vec<u64> {
    use shift_core::verbs::WorkRequest;
    let mut off = Vec::with_capacity(sizes.len());
    let mut o = 0u64;
    for &s in sizes {
        off.push(o);
        o += u64::from(s);
    }
    assert!(o <= BUF);
    let end = v.now() + budget;
    let mut done = Vec::new();
    let mut posted = 0usize;
    v.req_notify_cq(a.cq).unwrap();
    loop {
        while posted < sizes.len() && posted - done.len() < depth {
            let wr = WorkRequest::write(posted as u64, a.mr.sge(off[posted], sizes[posted]), b.mr.remote(off[posted]));
            v.post_send(a.qp, wr).unwrap();
            posted += 1;
        }
        if done.len() == sizes.len() {
            return done;
        }
        match v.next_upcall(end) {
            None => return done,
            Some(Upcall::CqEvent(cq)) => {
                v.req_notify_cq(cq).unwrap();
                for wc in v.poll_cq(cq, usize::MAX) {
                    assert!(wc.status.is_ok(), "{wc:?}");
                    done.push(wc.wr_id);
                }
            }
            Some(Upcall::Timer(_)) => {}
        }
    }
}
