use serde::Serialize;

use super::endpoint::Side;
use super::{PdInfo, Shift};
use crate::kvstore::{decode_qp, encode_qp, encode_rkey, mr_key, qp_key, KvGet};
use crate::simcore::{RnicId, Time, TraceKind};
use crate::verbs::{
    CqHandle, DeviceHandle, MemoryRegion, PdHandle, QpAttrs, QpHandle, QpInitAttr, QpState, Verbs, VerbsError,
};

pub(super) const T_SCAN: u64 = 1;

/// A control verb as the application issued it on a default RNIC.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ShadowOp {
    OpenDevice { dev: DeviceHandle },
    AllocPd { pd: PdHandle, dev: DeviceHandle },
    CreateCq { cq: CqHandle, dev: DeviceHandle, cap: u32 },
    RegMr { mr: MemoryRegion },
    CreateQp { qp: QpHandle, pd: PdHandle, init: QpInitAttr },
    ModifyQp { qp: QpHandle, to: QpState, attrs: QpAttrs },
}

impl ShadowOp {
    pub fn kind(&self) -> &'static str {
        match self {
            ShadowOp::OpenDevice { .. } => "OPEN_DEVICE",
            ShadowOp::AllocPd { .. } => "ALLOC_PD",
            ShadowOp::CreateCq { .. } => "CREATE_CQ",
            ShadowOp::RegMr { .. } => "REG_MR",
            ShadowOp::CreateQp { .. } => "CREATE_QP",
            ShadowOp::ModifyQp { .. } => "MODIFY_QP",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShadowRecord {
    pub op: ShadowOp,
    pub done: bool,
    /// Scans that found this record blocked.
    pub blocked: u32,
}

#[derive(Debug, Clone)]
pub(super) struct ShadowList {
    pub rnic: RnicId,
    pub backup: RnicId,
    pub records: Vec<ShadowRecord>,
    pub rounds: u32,
    pub scheduled: bool,
    pub finished_at: Option<Time>,
}

impl ShadowList {
    pub fn new(rnic: RnicId, backup: RnicId) -> Self {
        Self { rnic, backup, records: Vec::new(), rounds: 0, scheduled: false, finished_at: None }
    }
}

enum Exec {
    Done,
    Blocked,
}

impl Shift {
    pub(super) fn record(&mut self, rnic: RnicId, op: ShadowOp) {
        let Some(&li) = self.shadow_of.get(&rnic) else { return };
        let list = &mut self.shadows[li];
        list.records.push(ShadowRecord { op, done: false, blocked: 0 });
        list.finished_at = None;
        if !list.scheduled {
            list.scheduled = true;
            let d = self.cfg.scan_interval;
            self.timer(d, T_SCAN, li);
        }
    }

    pub fn shadow_records(&self, rnic: RnicId) -> &[ShadowRecord] {
        self.shadow_of.get(&rnic).map_or(&[], |&li| &self.shadows[li].records)
    }

    /// Scan rounds run so far for `rnic`'s list.
    pub fn shadow_rounds(&self, rnic: RnicId) -> u32 {
        self.shadow_of.get(&rnic).map_or(0, |&li| self.shadows[li].rounds)
    }

    pub fn shadow_complete(&self, rnic: RnicId) -> bool {
        self.shadow_records(rnic).iter().all(|r| r.done)
    }

    /// Reorders the not-yet-executed list of `rnic`. Models application
    /// threads whose control verbs reach the list in a racy order; `order`
    /// is a permutation of record positions.
    pub fn reorder_shadow_list(&mut self, rnic: RnicId, order: &[usize]) -> crate::verbs::Result<()> {
        let li = *self.shadow_of.get(&rnic).ok_or(VerbsError::InvalidHandle("rnic"))?;
        let recs = &mut self.shadows[li].records;
        let mut seen = vec![false; recs.len()];
        if order.len() != recs.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(VerbsError::InvalidWorkRequest("not a permutation of the shadow list"));
        }
        if recs.iter().any(|r| r.done) {
            return Err(VerbsError::InvalidWorkRequest("shadow execution already started"));
        }
        *recs = order.iter().map(|&i| recs[i].clone()).collect();
        Ok(())
    }

    pub(super) fn scan_shadow(&mut self, li: usize) {
        self.shadows[li].scheduled = false;
        self.shadows[li].rounds += 1;
        let strict = self.cfg.strict_shadow_order;
        for i in 0..self.shadows[li].records.len() {
            if self.shadows[li].records[i].done {
                continue;
            }
            let op = self.shadows[li].records[i].op.clone();
            let rnic = self.shadows[li].rnic;
            match self.exec(li, &op) {
                Ok(Exec::Done) => {
                    self.shadows[li].records[i].done = true;
                    let ev = self.event(TraceKind::ShadowRecord).with("rnic", rnic.0).with("verb", op.kind()).with("pos", i);
                    self.trace(ev);
                }
                Ok(Exec::Blocked) => {
                    let r = &mut self.shadows[li].records[i];
                    r.blocked += 1;
                    if r.blocked == self.cfg.max_scan_rounds {
                        let ev = self
                            .event(TraceKind::Warning)
                            .with("what", "shadow record still blocked")
                            .with("rnic", rnic.0)
                            .with("verb", op.kind())
                            .with("pos", i);
                        self.trace(ev);
                    }
                    if strict {
                        break;
                    }
                }
                Err(err) => {
                    // the backup resource cannot exist; stop retrying it
                    self.shadows[li].records[i].done = true;
                    let ev = self
                        .event(TraceKind::Warning)
                        .with("what", "shadow record failed")
                        .with("rnic", rnic.0)
                        .with("verb", op.kind())
                        .with("error", err.to_string());
                    self.trace(ev);
                }
            }
        }
        let list = &mut self.shadows[li];
        if list.records.iter().all(|r| r.done) {
            list.finished_at = Some(self.cl.now());
            let (rnic, rounds) = (list.rnic, list.rounds);
            let ev = self.event(TraceKind::ShadowDone).with("rnic", rnic.0).with("rounds", rounds);
            self.trace(ev);
        } else if !list.scheduled {
            list.scheduled = true;
            let d = self.cfg.scan_interval;
            self.timer(d, T_SCAN, li);
        }
    }

    fn exec(&mut self, li: usize, op: &ShadowOp) -> crate::verbs::Result<Exec> {
        let (rnic, backup) = (self.shadows[li].rnic, self.shadows[li].backup);
        let host = self.cl.host_of(rnic);
        let now = self.cl.now();
        match *op {
            ShadowOp::OpenDevice { dev } => {
                let b = self.cl.open_device(backup)?;
                self.devs.get_mut(&dev).expect("recorded device").backup = Some(b);
            }
            ShadowOp::AllocPd { pd, dev } => {
                let Some(bdev) = self.devs[&dev].backup else { return Ok(Exec::Blocked) };
                let b = self.cl.alloc_pd(bdev)?;
                self.pds.insert(pd, PdInfo { rnic, backup: Some(b) });
            }
            ShadowOp::CreateCq { cq, dev, cap } => {
                let Some(bdev) = self.devs[&dev].backup else { return Ok(Exec::Blocked) };
                let b = self.cl.create_cq(bdev, cap)?;
                self.cqs.get_mut(&cq).expect("recorded cq").backup = Some(b);
                self.cq_owner.insert(b, cq);
            }
            ShadowOp::RegMr { mr } => {
                let Some(bpd) = self.pds[&mr.pd].backup else { return Ok(Exec::Blocked) };
                let b = self.cl.reg_mr(bpd, mr.addr, mr.len)?;
                self.mr_fwd.insert((rnic, mr.lkey), b);
                self.lkey_rev.insert((backup, b.lkey), mr.lkey);
                self.kv.put(host, &mr_key(host, mr.rkey), &encode_rkey(b.rkey), now);
            }
            ShadowOp::CreateQp { qp, pd, init } => {
                let Some(bpd) = self.pds[&pd].backup else { return Ok(Exec::Blocked) };
                let (Some(scq), Some(rcq)) = (self.cqs[&init.send_cq].backup, self.cqs[&init.recv_cq].backup) else {
                    return Ok(Exec::Blocked);
                };
                let b = self.cl.create_qp(bpd, QpInitAttr { send_cq: scq, recv_cq: rcq, ..init })?;
                let route = self.cl.qp_route(b)?;
                let e = self.ep_of_qp[&qp];
                self.eps[e].backup_qp = Some(b);
                self.eps[e].backup_qpn = route.qpn;
                self.ep_of_qpn.insert(route.qpn, (e, Side::Backup));
                let default_route = self.cl.qp_route(qp)?;
                self.kv.put(host, &qp_key(&default_route), &encode_qp(&route), now);
            }
            ShadowOp::ModifyQp { qp, to, attrs } => {
                let e = self.ep_of_qp[&qp];
                let Some(b) = self.eps[e].backup_qp else { return Ok(Exec::Blocked) };
                if !self.cl.qp_state(b)?.can_transition_to(to) {
                    return Ok(Exec::Blocked);
                }
                let mut battrs = attrs;
                match to {
                    QpState::Rtr => {
                        let remote = attrs.remote.ok_or(VerbsError::MissingRemote)?;
                        let KvGet::Value(v) = self.kv.get(host, &qp_key(&remote), now) else {
                            return Ok(Exec::Blocked);
                        };
                        battrs.remote = Some(decode_qp(&v).ok_or(VerbsError::InvalidWorkRequest("bad KV value"))?);
                    }
                    QpState::Rts => {
                        battrs.remote = self.eps[e].backup_attrs.remote;
                        battrs.rq_psn = self.eps[e].backup_attrs.rq_psn;
                    }
                    _ => {}
                }
                self.cl.modify_qp(b, to, &battrs)?;
                let ep = &mut self.eps[e];
                match to {
                    QpState::Rtr => {
                        ep.backup_attrs.remote = battrs.remote;
                        ep.backup_attrs.rq_psn = battrs.rq_psn;
                    }
                    QpState::Rts => {
                        ep.backup_attrs.sq_psn = battrs.sq_psn;
                        ep.backup_attrs.timers = battrs.timers;
                        ep.backup_ready = true;
                        self.ensure_shift_recvs(e);
                    }
                    QpState::Reset | QpState::Err => {
                        ep.backup_ready = false;
                        ep.shift_recv[Side::Backup.idx()] = false;
                    }
                    QpState::Init => {}
                }
            }
        }
        Ok(Exec::Done)
    }

    pub(super) fn forget_mr(&mut self, rnic: RnicId, mr: &MemoryRegion) {
        if let Some(b) = self.mr_fwd.remove(&(rnic, mr.lkey)) {
            let _ = self.cl.dereg_mr(&b);
            if let Some(backup) = self.backup_of(rnic) {
                self.lkey_rev.remove(&(backup, b.lkey));
            }
            return;
        }
        // not shadowed yet: drop the pending registration instead
        if let Some(&li) = self.shadow_of.get(&rnic) {
            for r in &mut self.shadows[li].records {
                if matches!(r.op, ShadowOp::RegMr { mr: m } if m == *mr) {
                    r.done = true;
                }
            }
        }
    }
}
