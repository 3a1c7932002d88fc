use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{SimError, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HostId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RnicId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SwitchId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl std::fmt::Display for RnicId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rnic{}", self.0)
    }
}

impl std::fmt::Display for LinkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "link{}", self.0)
    }
}

/// Link bandwidth in thousandths of a byte per nanosecond, so 12.5 B/ns is
/// representable without floating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bandwidth {
    milli_bytes_per_ns: u64,
}

impl Bandwidth {
    pub const fn from_milli_bytes_per_ns(v: u64) -> Self {
        assert!(v > 0);
        Self { milli_bytes_per_ns: v }
    }

    pub const fn from_bytes_per_ns(v: u64) -> Self {
        Self::from_milli_bytes_per_ns(v * 1000)
    }

    pub fn bytes_per_ns(&self) -> f64 {
        self.milli_bytes_per_ns as f64 / 1000.0
    }

    /// Serialization delay of `len` bytes, rounded up to whole nanoseconds.
    pub fn serialization_ns(&self, len: u64) -> Time {
        (len * 1000).div_ceil(self.milli_bytes_per_ns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkParams {
    pub latency_ns: Time,
    pub bandwidth: Bandwidth,
}

impl Default for LinkParams {
    /// 1 µs, ~100 Gb/s.
    fn default() -> Self {
        Self {
            latency_ns: 1_000,
            bandwidth: Bandwidth::from_milli_bytes_per_ns(12_500),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    Rnic(RnicId),
    Switch(SwitchId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub a: Node,
    pub b: Node,
    pub params: LinkParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub id: HostId,
    pub rnics: Vec<RnicId>,
}

/// Direction of traversal over a full-duplex link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dir {
    AtoB,
    BtoA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub link: LinkId,
    pub dir: Dir,
}

/// Static fabric layout with a precomputed single-path route table.
#[derive(Debug, Clone)]
pub struct Topology {
    hosts: Vec<Host>,
    switches: Vec<SwitchId>,
    links: Vec<Link>,
    rnic_host: Vec<HostId>,
    rnic_link: Vec<LinkId>,
    routes: BTreeMap<(RnicId, RnicId), Vec<Hop>>,
}

#[derive(Debug, Default)]
pub struct TopologyBuilder {
    hosts: Vec<Host>,
    switches: Vec<SwitchId>,
    links: Vec<Link>,
    rnic_host: Vec<HostId>,
}

impl TopologyBuilder {
    pub fn add_host(&mut self, rnics: usize) -> HostId {
        let id = HostId(self.hosts.len() as u32);
        let mut list = Vec::with_capacity(rnics);
        for _ in 0..rnics {
            let r = RnicId(self.rnic_host.len() as u32);
            self.rnic_host.push(id);
            list.push(r);
        }
        self.hosts.push(Host { id, rnics: list });
        id
    }

    pub fn add_switch(&mut self) -> SwitchId {
        let id = SwitchId(self.switches.len() as u32);
        self.switches.push(id);
        id
    }

    pub fn connect(&mut self, a: Node, b: Node, params: LinkParams) -> LinkId {
        let id = LinkId(self.links.len() as u32);
        self.links.push(Link { id, a, b, params });
        id
    }

    pub fn build(self) -> Result<Topology, SimError> {
        let n_rnics = self.rnic_host.len();
        let mut rnic_link: Vec<Option<LinkId>> = vec![None; n_rnics];
        for link in &self.links {
            for (me, other) in [(link.a, link.b), (link.b, link.a)] {
                if let Node::Rnic(r) = me {
                    if !matches!(other, Node::Switch(_)) {
                        return Err(SimError::InvalidTopology(format!(
                            "{r} must attach to a switch"
                        )));
                    }
                    let slot = rnic_link
                        .get_mut(r.0 as usize)
                        .ok_or_else(|| SimError::InvalidTopology(format!("unknown {r}")))?;
                    if slot.replace(link.id).is_some() {
                        return Err(SimError::InvalidTopology(format!(
                            "{r} has more than one link"
                        )));
                    }
                }
            }
        }
        let rnic_link = rnic_link
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| SimError::InvalidTopology(format!("rnic{i} has no link")))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut topo = Topology {
            hosts: self.hosts,
            switches: self.switches,
            links: self.links,
            rnic_host: self.rnic_host,
            rnic_link,
            routes: BTreeMap::new(),
        };
        topo.compute_routes()?;
        Ok(topo)
    }
}

impl Topology {
    pub fn builder() -> TopologyBuilder {
        TopologyBuilder::default()
    }

    /// Every RNIC of every host hangs off one shared switch.
    pub fn single_switch(hosts: usize, rnics_per_host: usize, params: LinkParams) -> Self {
        let mut b = Self::builder();
        let sw = b.add_switch();
        for _ in 0..hosts {
            let h = b.add_host(rnics_per_host);
            for r in b.hosts[h.0 as usize].rnics.clone() {
                b.connect(Node::Rnic(r), Node::Switch(sw), params);
            }
        }
        b.build().expect("single-switch layout is valid")
    }

    /// RNIC `i` of every host attaches to rail switch `i`; rail switches are
    /// joined through one spine switch.
    pub fn rail_optimized(hosts: usize, rails: usize, params: LinkParams) -> Self {
        let mut b = Self::builder();
        let rail_sw: Vec<SwitchId> = (0..rails).map(|_| b.add_switch()).collect();
        let spine = b.add_switch();
        for &sw in &rail_sw {
            b.connect(Node::Switch(sw), Node::Switch(spine), params);
        }
        for _ in 0..hosts {
            let h = b.add_host(rails);
            for (i, r) in b.hosts[h.0 as usize].rnics.clone().into_iter().enumerate() {
                b.connect(Node::Rnic(r), Node::Switch(rail_sw[i]), params);
            }
        }
        b.build().expect("rail-optimized layout is valid")
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn switches(&self) -> &[SwitchId] {
        &self.switches
    }

    pub fn link(&self, id: LinkId) -> Option<&Link> {
        self.links.get(id.0 as usize)
    }

    pub fn rnic_count(&self) -> usize {
        self.rnic_host.len()
    }

    pub fn host_of(&self, r: RnicId) -> HostId {
        self.rnic_host[r.0 as usize]
    }

    /// The access link between `r` and its switch.
    pub fn access_link(&self, r: RnicId) -> LinkId {
        self.rnic_link[r.0 as usize]
    }

    pub fn route(&self, src: RnicId, dst: RnicId) -> Option<&[Hop]> {
        self.routes.get(&(src, dst)).map(Vec::as_slice)
    }

    fn compute_routes(&mut self) -> Result<(), SimError> {
        // adjacency in link-id order keeps BFS deterministic
        let mut adj: BTreeMap<Node, Vec<(Node, Hop)>> = BTreeMap::new();
        for l in &self.links {
            adj.entry(l.a).or_default().push((l.b, Hop { link: l.id, dir: Dir::AtoB }));
            adj.entry(l.b).or_default().push((l.a, Hop { link: l.id, dir: Dir::BtoA }));
        }
        let n = self.rnic_host.len() as u32;
        for s in 0..n {
            let src = Node::Rnic(RnicId(s));
            let mut prev: BTreeMap<Node, (Node, Hop)> = BTreeMap::new();
            let mut seen = std::collections::BTreeSet::from([src]);
            let mut q = VecDeque::from([src]);
            while let Some(u) = q.pop_front() {
                // RNICs are endpoints only, never transit nodes
                if u != src && matches!(u, Node::Rnic(_)) {
                    continue;
                }
                for &(v, hop) in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                    if seen.insert(v) {
                        prev.insert(v, (u, hop));
                        q.push_back(v);
                    }
                }
            }
            for d in 0..n {
                if d == s {
                    continue;
                }
                let dst = Node::Rnic(RnicId(d));
                let mut path = Vec::new();
                let mut cur = dst;
                while cur != src {
                    let (p, hop) = *prev.get(&cur).ok_or_else(|| {
                        SimError::InvalidTopology(format!("no route rnic{s} -> rnic{d}"))
                    })?;
                    path.push(hop);
                    cur = p;
                }
                path.reverse();
                self.routes.insert((RnicId(s), RnicId(d)), path);
            }
        }
        Ok(())
    }
}
