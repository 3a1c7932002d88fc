//! Out-of-band attribute store reached over the management network.
//!
//! One logical store; a value written by host A becomes visible to other
//! hosts after a fixed management-network delay and to A immediately. Reads
//! never block: a missing or not-yet-visible key is [`KvGet::NotYet`].
//! Nothing here touches the simulated data-plane fabric.

use std::collections::HashMap;

use crate::simcore::{HostId, Time, US};
use crate::verbs::{Gid, QpRouteAttrs};

pub const DEFAULT_KV_LATENCY: Time = 100 * US;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvGet {
    Value(Vec<u8>),
    NotYet,
}

impl KvGet {
    pub fn value(self) -> Option<Vec<u8>> {
        match self {
            KvGet::Value(v) => Some(v),
            KvGet::NotYet => None,
        }
    }
}

/// Storage behind the client-side cache. A networked store can implement
/// this in place of [`LocalStore`].
pub trait KvBackend {
    fn put(&mut self, from: HostId, key: &[u8], value: &[u8], now: Time);
    fn get(&mut self, at: HostId, key: &[u8], now: Time) -> KvGet;
}

struct Entry {
    value: Vec<u8>,
    writer: HostId,
    written: Time,
}

/// In-simulation store with per-host visibility latency.
pub struct LocalStore {
    latency: Time,
    entries: HashMap<Vec<u8>, Vec<Entry>>,
}

impl LocalStore {
    pub fn new(latency: Time) -> Self {
        Self { latency, entries: HashMap::new() }
    }
}

impl KvBackend for LocalStore {
    fn put(&mut self, from: HostId, key: &[u8], value: &[u8], now: Time) {
        self.entries
            .entry(key.to_vec())
            .or_default()
            .push(Entry { value: value.to_vec(), writer: from, written: now });
    }

    fn get(&mut self, at: HostId, key: &[u8], now: Time) -> KvGet {
        let Some(versions) = self.entries.get(key) else {
            return KvGet::NotYet;
        };
        // newest version this reader can already see
        versions
            .iter()
            .rev()
            .find(|e| e.writer == at || e.written + self.latency <= now)
            .map_or(KvGet::NotYet, |e| KvGet::Value(e.value.clone()))
    }
}

/// Store plus per-host read cache. Only successful reads are cached, so a
/// cached key never needs a second backend access.
pub struct KvStore<B: KvBackend = LocalStore> {
    backend: B,
    cache: HashMap<(HostId, Vec<u8>), Vec<u8>>,
    accesses: u64,
}

impl KvStore<LocalStore> {
    pub fn local(latency: Time) -> Self {
        Self::with_backend(LocalStore::new(latency))
    }
}

impl<B: KvBackend> KvStore<B> {
    pub fn with_backend(backend: B) -> Self {
        Self { backend, cache: HashMap::new(), accesses: 0 }
    }

    pub fn put(&mut self, from: HostId, key: &[u8], value: &[u8], now: Time) {
        self.accesses += 1;
        self.cache.insert((from, key.to_vec()), value.to_vec());
        self.backend.put(from, key, value, now);
    }

    pub fn get(&mut self, at: HostId, key: &[u8], now: Time) -> KvGet {
        if let Some(v) = self.cache.get(&(at, key.to_vec())) {
            return KvGet::Value(v.clone());
        }
        self.accesses += 1;
        let r = self.backend.get(at, key, now);
        if let KvGet::Value(v) = &r {
            self.cache.insert((at, key.to_vec()), v.clone());
        }
        r
    }

    /// Backend round trips so far (puts and uncached gets).
    pub fn accesses(&self) -> u64 {
        self.accesses
    }
}

fn push_field(out: &mut Vec<u8>, field: &str) {
    out.extend_from_slice(field.len().to_string().as_bytes());
    out.push(b':');
    out.extend_from_slice(field.as_bytes());
    out.push(b':');
}

fn encode(tag: &str, fields: &[String]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(tag.as_bytes());
    out.push(b':');
    for f in fields {
        push_field(&mut out, f);
    }
    out
}

fn decode(tag: &str, bytes: &[u8]) -> Option<Vec<String>> {
    let s = std::str::from_utf8(bytes).ok()?;
    let mut rest = s.strip_prefix(tag)?.strip_prefix(':')?;
    let mut fields = Vec::new();
    while !rest.is_empty() {
        let (len, tail) = rest.split_once(':')?;
        let len: usize = len.parse().ok()?;
        let field = tail.get(..len)?;
        rest = tail.get(len..)?.strip_prefix(':')?;
        fields.push(field.to_owned());
    }
    Some(fields)
}

/// `QP:<gid>:<qpn>:<lid>`, each field length-prefixed.
pub fn qp_key(attrs: &QpRouteAttrs) -> Vec<u8> {
    encode("QP", &[attrs.gid.to_string(), attrs.qpn.to_string(), attrs.lid.to_string()])
}

/// `MR:<host>:<rkey>`, each field length-prefixed.
pub fn mr_key(host: HostId, rkey: u32) -> Vec<u8> {
    encode("MR", &[host.0.to_string(), rkey.to_string()])
}

pub fn encode_qp(attrs: &QpRouteAttrs) -> Vec<u8> {
    qp_key(attrs)
}

pub fn decode_qp(bytes: &[u8]) -> Option<QpRouteAttrs> {
    let f = decode("QP", bytes)?;
    let [gid, qpn, lid] = f.as_slice() else { return None };
    Some(QpRouteAttrs {
        gid: Gid(u64::from_str_radix(gid, 16).ok()?),
        qpn: qpn.parse().ok()?,
        lid: lid.parse().ok()?,
    })
}

pub fn encode_rkey(rkey: u32) -> Vec<u8> {
    encode("RKEY", &[rkey.to_string()])
}

pub fn decode_rkey(bytes: &[u8]) -> Option<u32> {
    let f = decode("RKEY", bytes)?;
    let [k] = f.as_slice() else { return None };
    k.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: HostId = HostId(0);
    const B: HostId = HostId(1);

    #[test]
    fn get_before_put_is_not_yet() {
        let mut kv = KvStore::local(DEFAULT_KV_LATENCY);
        assert_eq!(kv.get(A, b"k", 0), KvGet::NotYet);
    }

    #[test]
    fn same_host_sees_put_immediately() {
        let mut kv = KvStore::local(DEFAULT_KV_LATENCY);
        kv.put(A, b"k", b"v", 10);
        assert_eq!(kv.get(A, b"k", 10), KvGet::Value(b"v".to_vec()));
    }

    #[test]
    fn remote_host_waits_for_management_latency() {
        let mut kv = KvStore::local(DEFAULT_KV_LATENCY);
        kv.put(A, b"k", b"v", 10);
        assert_eq!(kv.get(B, b"k", 10 + DEFAULT_KV_LATENCY - 1), KvGet::NotYet);
        assert_eq!(kv.get(B, b"k", 10 + DEFAULT_KV_LATENCY), KvGet::Value(b"v".to_vec()));
    }

    #[test]
    fn last_write_wins() {
        let mut kv = KvStore::local(0);
        kv.put(A, b"k", b"1", 0);
        kv.put(A, b"k", b"2", 1);
        assert_eq!(kv.get(B, b"k", 5), KvGet::Value(b"2".to_vec()));
    }

    #[test]
    fn cached_reads_skip_the_store() {
        let mut kv = KvStore::local(0);
        kv.put(A, b"k", b"v", 0);
        let before = kv.accesses();
        kv.get(B, b"k", 1);
        kv.get(B, b"k", 2);
        kv.get(B, b"k", 3);
        assert_eq!(kv.accesses(), before + 1);
    }

    #[test]
    fn not_yet_is_not_cached() {
        let mut kv = KvStore::local(0);
        kv.get(B, b"k", 0);
        kv.put(A, b"k", b"v", 1);
        assert_eq!(kv.get(B, b"k", 1), KvGet::Value(b"v".to_vec()));
    }

    #[test]
    fn canonical_key_shape() {
        let attrs = QpRouteAttrs { gid: Gid(0xfe80_0000_0000_0003), qpn: 257, lid: 4 };
        assert_eq!(qp_key(&attrs), b"QP:16:fe80000000000003:3:257:1:4:".to_vec());
        assert_eq!(mr_key(HostId(2), 0x101), b"MR:1:2:3:257:".to_vec());
    }

    proptest! {
        #[test]
        fn qp_attrs_round_trip(gid in any::<u64>(), qpn in any::<u32>(), lid in any::<u16>()) {
            let a = QpRouteAttrs { gid: Gid(gid), qpn, lid };
            prop_assert_eq!(decode_qp(&encode_qp(&a)), Some(a));
            prop_assert_eq!(qp_key(&a), qp_key(&a.clone()));
        }

        #[test]
        fn distinct_attrs_give_distinct_keys(
            a in (any::<u64>(), any::<u32>(), any::<u16>()),
            b in (any::<u64>(), any::<u32>(), any::<u16>()),
        ) {
            let ka = qp_key(&QpRouteAttrs { gid: Gid(a.0), qpn: a.1, lid: a.2 });
            let kb = qp_key(&QpRouteAttrs { gid: Gid(b.0), qpn: b.1, lid: b.2 });
            prop_assert_eq!(ka == kb, a == b);
        }

        #[test]
        fn rkey_round_trip(k in any::<u32>()) {
            prop_assert_eq!(decode_rkey(&encode_rkey(k)), Some(k));
        }
    }
}
