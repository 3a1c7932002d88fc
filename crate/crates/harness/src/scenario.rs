//! Scenario files: TOML, validated on load. `seed` and the file together
//! fix a run completely.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use shift_core::simcore::{Bandwidth, FaultEvent, LinkId, LinkParams, Time, Topology, MS, US};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shift_enabled: bool,
    /// Virtual-time budget for the workload, measured from its start.
    pub duration_ms: f64,
    #[serde(default)]
    pub topology: TopologySpec,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub shift: ShiftSpec,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    SingleSwitch,
    RailOptimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: Layout,
    pub hosts: usize,
    pub rnics_per_host: usize,
    pub latency_ns: Time,
    pub bandwidth_gbps: f64,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self { kind: Layout::SingleSwitch, hosts: 2, rnics_per_host: 2, latency_ns: 1000, bandwidth_gbps: 100.0 }
    }
}

impl TopologySpec {
    pub fn build(&self) -> Topology {
        let mbpns = (self.bandwidth_gbps * 125.0).round() as u64;
        let params = LinkParams { latency_ns: self.latency_ns, bandwidth: Bandwidth::from_milli_bytes_per_ns(mbpns) };
        match self.kind {
            Layout::SingleSwitch => Topology::single_switch(self.hosts, self.rnics_per_host, params),
            Layout::RailOptimized => Topology::rail_optimized(self.hosts, self.rnics_per_host, params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkloadKind {
    WriteBw,
    SendBw,
    ReadBw,
    WriteLat,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    #[serde(default = "default_msg")]
    pub msg_size: u32,
    #[serde(default = "default_depth")]
    pub queue_depth: u32,
    #[serde(default = "default_iters")]
    pub iterations: u64,
    /// Minimum spacing between posts; 0 posts as fast as the queue allows.
    #[serde(default)]
    pub gap_us: f64,
}

fn default_msg() -> u32 {
    4096
}
fn default_depth() -> u32 {
    16
}
fn default_iters() -> u64 {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    NoShiftCkptRestart,
    ShiftBusyBackup,
    ShiftIdleBackup,
    ShiftFlap,
}

impl TrainMode {
    pub fn uses_shift(self) -> bool {
        self != TrainMode::NoShiftCkptRestart
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub mode: TrainMode,
    pub epochs: u64,
    pub iterations_per_epoch: u64,
    pub iter_compute_ms: f64,
    pub bytes_per_allreduce: u32,
    /// In iterations.
    pub checkpoint_interval: u64,
    pub checkpoint_cost_ms: f64,
    pub restart_cost_ms: f64,
    /// Competing flow on the backup link in `shift_busy_backup`: message
    /// size and spacing. The intensity is left to the scenario.
    #[serde(default = "default_bg_msg")]
    pub background_msg_size: u32,
    #[serde(default = "default_bg_gap")]
    pub background_gap_us: f64,
}

fn default_bg_msg() -> u32 {
    65536
}
fn default_bg_gap() -> f64 {
    1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    /// The requester's default RNIC link.
    LocalDefault,
    LocalBackup,
    RemoteDefault,
    RemoteBackup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    LinkDown,
    LinkUp,
    Flap,
    DropAck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    #[serde(default)]
    pub target: Option<FaultTarget>,
    /// Raw link id; overrides `target`.
    #[serde(default)]
    pub link: Option<u32>,
    /// Relative to the workload start.
    pub at_ms: f64,
    #[serde(default)]
    pub duration_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub probe_interval_ms: f64,
    pub scan_interval_us: f64,
    pub strict_shadow_order: bool,
    pub absorb_duplicates: bool,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self { probe_interval_ms: 100.0, scan_interval_us: 100.0, strict_shadow_order: false, absorb_duplicates: true }
    }
}

pub fn ms(v: f64) -> Time {
    (v * MS as f64).round() as Time
}

pub fn us(v: f64) -> Time {
    (v * US as f64).round() as Time
}

/// The four links a two-party run can fault, by role.
#[derive(Debug, Clone, Copy)]
pub struct RoleLinks {
    pub local_default: LinkId,
    pub local_backup: LinkId,
    pub remote_default: LinkId,
    pub remote_backup: LinkId,
}

impl FaultSpec {
    pub fn resolve(&self, links: &RoleLinks, t0: Time) -> Result<FaultEvent> {
        let link = match (self.link, self.target) {
            (Some(l), _) => LinkId(l),
            (None, Some(FaultTarget::LocalDefault)) => links.local_default,
            (None, Some(FaultTarget::LocalBackup)) => links.local_backup,
            (None, Some(FaultTarget::RemoteDefault)) => links.remote_default,
            (None, Some(FaultTarget::RemoteBackup)) => links.remote_backup,
            (None, None) => bail!("fault needs `target` or `link`"),
        };
        let at = t0 + ms(self.at_ms);
        let dur = || self.duration_ms.map(ms).context("fault needs `duration_ms`");
        Ok(match self.kind {
            FaultKind::LinkDown => FaultEvent::LinkDown { link, at },
            FaultKind::LinkUp => FaultEvent::LinkUp { link, at },
            FaultKind::Flap => FaultEvent::Flap { link, at, duration: dur()? },
            FaultKind::DropAck => FaultEvent::DropAck { link, start: at, end: at + dur()? },
        })
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).context("scenario schema")?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if t.hosts < 2 {
            bail!("topology needs at least two hosts");
        }
        if t.rnics_per_host < 2 {
            bail!("topology needs a default and a backup RNIC per host");
        }
        if !(t.bandwidth_gbps > 0.0) || t.bandwidth_gbps * 125.0 < 1.0 {
            bail!("bandwidth_gbps too small");
        }
        if !(self.duration_ms > 0.0) {
            bail!("duration_ms must be positive");
        }
        let w = &self.workload;
        if w.queue_depth == 0 || w.iterations == 0 {
            bail!("queue_depth and iterations must be positive");
        }
        if w.msg_size < 8 && w.kind != WorkloadKind::Train {
            bail!("msg_size must hold the 8-byte stamp");
        }
        if w.gap_us < 0.0 {
            bail!("gap_us must be non-negative");
        }
        match (&self.train, w.kind) {
            (None, WorkloadKind::Train) => bail!("TRAIN workload needs a [train] table"),
            (Some(_), k) if k != WorkloadKind::Train => bail!("[train] only applies to TRAIN"),
            (Some(tr), _) => {
                if tr.epochs == 0 || tr.iterations_per_epoch == 0 || tr.checkpoint_interval == 0 {
                    bail!("epochs, iterations_per_epoch and checkpoint_interval must be positive");
                }
                if tr.bytes_per_allreduce < 8 {
                    bail!("bytes_per_allreduce must hold the 8-byte stamp");
                }
                if tr.mode.uses_shift() != self.shift_enabled {
                    bail!("train mode {:?} disagrees with shift_enabled = {}", tr.mode, self.shift_enabled);
                }
            }
            (None, _) => {}
        }
        for f in &self.faults {
            if f.at_ms < 0.0 {
                bail!("fault at_ms must be non-negative");
            }
            if matches!(f.kind, FaultKind::Flap | FaultKind::DropAck) && f.duration_ms.is_none_or(|d| d <= 0.0) {
                bail!("{:?} needs a positive duration_ms", f.kind);
            }
            if f.link.is_none() && f.target.is_none() {
                bail!("fault needs `target` or `link`");
            }
        }
        if self.shift.probe_interval_ms <= 0.0 || self.shift.scan_interval_us <= 0.0 {
            bail!("shift intervals must be positive");
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        match &self.train {
            Some(t) => t.epochs * t.iterations_per_epoch,
            None => self.workload.iterations,
        }
    }
}
