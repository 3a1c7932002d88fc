use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use super::{SimError, Time};

/// Virtual clock. Only moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Time,
}

impl SimClock {
    pub fn now(&self) -> Time {
        self.now
    }

    fn advance_to(&mut self, t: Time) {
        debug_assert!(t >= self.now, "clock moved backwards: {} -> {}", self.now, t);
        self.now = t;
    }
}

/// Opaque handle returned by [`EventQueue::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskHandle(u64);

struct Entry<E> {
    at: Time,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Discrete-event queue. Events at equal times run in insertion order.
pub struct EventQueue<E> {
    clock: SimClock,
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    cancelled: HashSet<u64>,
    executed: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            clock: SimClock::default(),
            heap: BinaryHeap::new(),
            next_seq: 0,
            cancelled: HashSet::new(),
            executed: 0,
        }
    }

    pub fn now(&self) -> Time {
        self.clock.now()
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    /// Schedules `event` to fire at absolute time `at`.
    pub fn schedule(&mut self, at: Time, event: E) -> Result<TaskHandle, SimError> {
        let now = self.clock.now();
        if at < now {
            return Err(SimError::ScheduleInPast { at, now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, event });
        Ok(TaskHandle(seq))
    }

    /// Schedules `event` after `delay` nanoseconds. Never fails.
    pub fn schedule_in(&mut self, delay: Time, event: E) -> TaskHandle {
        let at = self.clock.now().saturating_add(delay);
        self.schedule(at, event)
            .expect("relative schedule is never in the past")
    }

    /// Cancels a pending task. Returns false if it already ran or was cancelled.
    pub fn cancel(&mut self, handle: TaskHandle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        let pending = self.heap.iter().any(|e| e.seq == handle.0);
        pending && self.cancelled.insert(handle.0)
    }

    /// Removes the next due event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<(Time, E)> {
        while let Some(entry) = self.heap.pop() {
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            self.clock.advance_to(entry.at);
            self.executed += 1;
            return Some((entry.at, entry.event));
        }
        None
    }

    /// Moves the clock forward to `t` without running anything.
    pub fn advance_to(&mut self, t: Time) {
        if t > self.clock.now() {
            self.clock.advance_to(t);
        }
    }

    pub fn peek_time(&self) -> Option<Time> {
        self.heap.peek().map(|e| e.at)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.len() == self.cancelled.len()
    }

    pub fn len(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    /// Number of events popped so far.
    pub fn executed(&self) -> u64 {
        self.executed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fifo_tie_break() {
        let mut q = EventQueue::new();
        q.schedule(0, "A").unwrap();
        q.schedule(0, "B").unwrap();
        assert_eq!(q.pop().unwrap().1, "A");
        assert_eq!(q.pop().unwrap().1, "B");
    }

    #[test]
    fn time_order() {
        let mut q = EventQueue::new();
        q.schedule(5, "A").unwrap();
        q.schedule(1, "B").unwrap();
        assert_eq!(q.pop(), Some((1, "B")));
        assert_eq!(q.pop(), Some((5, "A")));
        assert_eq!(q.now(), 5);
    }

    #[test]
    fn rejects_past() {
        let mut q = EventQueue::new();
        q.schedule(10, ()).unwrap();
        q.pop();
        assert!(matches!(
            q.schedule(9, ()),
            Err(SimError::ScheduleInPast { at: 9, now: 10 })
        ));
        assert!(q.schedule(10, ()).is_ok());
    }

    #[test]
    fn cancel_skips_task() {
        let mut q = EventQueue::new();
        let a = q.schedule(1, 'a').unwrap();
        q.schedule(2, 'b').unwrap();
        assert!(q.cancel(a));
        assert!(!q.cancel(a));
        assert_eq!(q.len(), 1);
        assert_eq!(q.pop(), Some((2, 'b')));
        assert!(q.pop().is_none());
    }

    fn replay(seed: u64) -> Vec<(Time, u32)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut q = EventQueue::new();
        for i in 0..10_000u32 {
            q.schedule(rng.gen_range(0..1_000), i).unwrap();
        }
        std::iter::from_fn(|| q.pop()).collect()
    }

    #[test]
    fn ten_thousand_tasks_replay_identically() {
        let a = replay(7);
        let b = replay(7);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1)));
    }
}
