use std::collections::VecDeque;

use serde::Serialize;

use super::types::{RecvWqe, SendWqe, WorkCompletion};
use crate::simcore::RnicId;

/// Fixed-capacity ring addressed by monotonically increasing indices.
/// Slots keep their last contents after retirement, like real WQE memory.
#[derive(Debug, Clone)]
pub(crate) struct Ring<W> {
    slots: Vec<Option<(u64, W)>>,
}

impl<W: Clone> Ring<W> {
    pub fn new(cap: u32) -> Self {
        Self { slots: vec![None; cap as usize] }
    }

    pub fn cap(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn put(&mut self, index: u64, w: W) {
        let n = self.slots.len() as u64;
        self.slots[(index % n) as usize] = Some((index, w));
    }

    pub fn get(&self, index: u64) -> Option<&W> {
        let n = self.slots.len() as u64;
        match &self.slots[(index % n) as usize] {
            Some((i, w)) if *i == index => Some(w),
            _ => None,
        }
    }
}

/// Send-queue indices. `retire <= complete <= exec <= doorbell <= post`;
/// `complete` is how far the RNIC has finished, polled or not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SqIndices {
    pub post: u64,
    pub doorbell: u64,
    pub exec: u64,
    pub complete: u64,
    pub retire: u64,
}

/// Receive-queue indices. `retire <= consume <= record <= post`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RqIndices {
    pub post: u64,
    pub record: u64,
    pub consume: u64,
    pub retire: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct SendQueue {
    pub ring: Ring<SendWqe>,
    pub idx: SqIndices,
}

impl SendQueue {
    pub fn new(cap: u32) -> Self {
        Self { ring: Ring::new(cap), idx: SqIndices::default() }
    }

    pub fn is_full(&self) -> bool {
        self.idx.post - self.idx.retire >= self.ring.cap()
    }

    /// Marks everything posted so far as gone.
    pub fn clear(&mut self) {
        let p = self.idx.post;
        self.idx = SqIndices { post: p, doorbell: p, exec: p, complete: p, retire: p };
    }

    pub fn check(&self) -> bool {
        let i = self.idx;
        i.retire <= i.complete
            && i.complete <= i.exec
            && i.exec <= i.doorbell
            && i.doorbell <= i.post
            && i.post - i.retire <= self.ring.cap()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RecvQueue {
    pub ring: Ring<RecvWqe>,
    pub idx: RqIndices,
}

impl RecvQueue {
    pub fn new(cap: u32) -> Self {
        Self { ring: Ring::new(cap), idx: RqIndices::default() }
    }

    pub fn is_full(&self) -> bool {
        self.idx.post - self.idx.retire >= self.ring.cap()
    }

    pub fn clear(&mut self) {
        let p = self.idx.post;
        self.idx = RqIndices { post: p, record: p, consume: p, retire: p };
    }

    pub fn check(&self) -> bool {
        let i = self.idx;
        i.retire <= i.consume && i.consume <= i.record && i.record <= i.post && i.post - i.retire <= self.ring.cap()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Cq {
    pub rnic: RnicId,
    pub cap: usize,
    pub ring: VecDeque<WorkCompletion>,
    pub armed: bool,
    pub overflows: u64,
}

pub(crate) enum PushOutcome {
    Stored,
    /// Stored and the CQ was armed: one event must be raised.
    Notify,
    Overflow,
}

impl Cq {
    pub fn new(rnic: RnicId, cap: u32) -> Self {
        Self { rnic, cap: cap as usize, ring: VecDeque::new(), armed: false, overflows: 0 }
    }

    pub fn push(&mut self, wc: WorkCompletion) -> PushOutcome {
        if self.ring.len() >= self.cap {
            self.overflows += 1;
            return PushOutcome::Overflow;
        }
        self.ring.push_back(wc);
        if std::mem::take(&mut self.armed) {
            PushOutcome::Notify
        } else {
            PushOutcome::Stored
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_slots_wrap_and_validate_index() {
        let mut r: Ring<u32> = Ring::new(4);
        for i in 0..6 {
            r.put(i, i as u32 * 10);
        }
        assert_eq!(r.get(5), Some(&50));
        assert_eq!(r.get(1), None, "overwritten by index 5");
        assert_eq!(r.get(3), Some(&30));
    }
}
