use std::collections::{BTreeMap, HashMap};

use super::types::{PdHandle, Result, VerbsError};

const BASE_ADDR: u64 = 0x1000;
const ALIGN: u64 = 0x1000;

/// Byte-addressable memory of one host, carved into non-overlapping buffers.
#[derive(Debug, Clone, Default)]
pub struct HostMemory {
    buffers: BTreeMap<u64, Vec<u8>>,
    next: u64,
}

impl HostMemory {
    pub fn new() -> Self {
        Self { buffers: BTreeMap::new(), next: BASE_ADDR }
    }

    /// Allocates a zeroed buffer and returns its base address.
    pub fn alloc(&mut self, len: u64) -> u64 {
        let base = self.next;
        self.buffers.insert(base, vec![0; len as usize]);
        // keep a guard page between buffers
        self.next = (base + len.max(1) + ALIGN).div_ceil(ALIGN) * ALIGN;
        base
    }

    fn locate(&self, addr: u64, len: u64) -> Option<(u64, usize)> {
        let (&base, buf) = self.buffers.range(..=addr).next_back()?;
        let off = addr - base;
        (off + len <= buf.len() as u64).then_some((base, off as usize))
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        self.locate(addr, len).is_some()
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>> {
        let (base, off) = self.locate(addr, len).ok_or(VerbsError::OutOfRange { addr, len })?;
        Ok(self.buffers[&base][off..off + len as usize].to_vec())
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        let len = data.len() as u64;
        let (base, off) = self.locate(addr, len).ok_or(VerbsError::OutOfRange { addr, len })?;
        let buf = self.buffers.get_mut(&base).expect("located");
        buf[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MrEntry {
    pub pd: PdHandle,
    pub addr: u64,
    pub len: u64,
}

impl MrEntry {
    fn covers(&self, addr: u64, len: u64) -> bool {
        addr >= self.addr && addr.checked_add(len).is_some_and(|end| end <= self.addr + self.len)
    }
}

/// Per-RNIC access-control table. lkeys and rkeys share one key space so a
/// key is never valid in both roles. `base` keeps keys of different RNICs
/// disjoint, so a (host, rkey) pair names one region.
#[derive(Debug, Clone, Default)]
pub(crate) struct MrTable {
    lkeys: HashMap<u32, MrEntry>,
    rkeys: HashMap<u32, MrEntry>,
    base: u32,
    next_key: u32,
}

impl MrTable {
    pub fn with_base(base: u32) -> Self {
        Self { base, ..Self::default() }
    }

    pub fn register(&mut self, entry: MrEntry) -> (u32, u32) {
        let lkey = self.base + 0x100 + 2 * self.next_key;
        let rkey = lkey + 1;
        self.next_key += 1;
        self.lkeys.insert(lkey, entry);
        self.rkeys.insert(rkey, entry);
        (lkey, rkey)
    }

    pub fn deregister(&mut self, lkey: u32, rkey: u32) -> bool {
        let a = self.lkeys.remove(&lkey).is_some();
        let b = self.rkeys.remove(&rkey).is_some();
        a && b
    }

    pub fn check_local(&self, lkey: u32, addr: u64, len: u64) -> bool {
        self.lkeys.get(&lkey).is_some_and(|m| m.covers(addr, len))
    }

    pub fn check_remote(&self, rkey: u32, addr: u64, len: u64) -> bool {
        self.rkeys.get(&rkey).is_some_and(|m| m.covers(addr, len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_do_not_overlap() {
        let mut m = HostMemory::new();
        let a = m.alloc(4096);
        let b = m.alloc(1);
        let c = m.alloc(10_000);
        assert!(a + 4096 < b && b + 1 < c);
        assert!(!m.contains(a + 4000, 200));
    }

    #[test]
    fn read_write_round_trip() {
        let mut m = HostMemory::new();
        let a = m.alloc(64);
        m.write(a + 8, b"hello").unwrap();
        assert_eq!(m.read(a + 8, 5).unwrap(), b"hello");
        assert!(m.write(a + 62, b"abc").is_err());
    }

    #[test]
    fn keys_are_distinct_and_checked() {
        let mut t = MrTable::default();
        let e = MrEntry { pd: PdHandle(0), addr: 0x1000, len: 4096 };
        let (l1, r1) = t.register(e);
        let (l2, r2) = t.register(e);
        assert_ne!((l1, r1), (l2, r2));
        assert!(t.check_remote(r1, 0x1000, 4096));
        assert!(!t.check_remote(l1, 0x1000, 1));
        assert!(!t.check_remote(r1, 0x1fff, 2));
        assert!(t.deregister(l1, r1));
        assert!(!t.check_remote(r1, 0x1000, 1));
        assert!(t.check_remote(r2, 0x1000, 1));
    }
}
