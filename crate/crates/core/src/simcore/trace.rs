use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::Time;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceKind {
    WcPolled,
    StateTransition,
    Doorbell,
    WqeStart,
    PacketDrop,
    Probe,
    Checkpoint,
    Fault,
    MsgPlaced,
    QpError,
    Notify,
    Rewind,
    ShadowRecord,
    ShadowDone,
    Warning,
    Fatal,
    CornerCase,
    OpLatency,
    Iteration,
    Restart,
    AppError,
    RunStart,
    RunEnd,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::WcPolled => "WC_POLLED",
            TraceKind::StateTransition => "STATE_TRANSITION",
            TraceKind::Doorbell => "DOORBELL",
            TraceKind::WqeStart => "WQE_START",
            TraceKind::PacketDrop => "PACKET_DROP",
            TraceKind::Probe => "PROBE",
            TraceKind::Checkpoint => "CHECKPOINT",
            TraceKind::Fault => "FAULT",
            TraceKind::MsgPlaced => "MSG_PLACED",
            TraceKind::QpError => "QP_ERROR",
            TraceKind::Notify => "NOTIFY",
            TraceKind::Rewind => "REWIND",
            TraceKind::ShadowRecord => "SHADOW_RECORD",
            TraceKind::ShadowDone => "SHADOW_DONE",
            TraceKind::Warning => "WARNING",
            TraceKind::Fatal => "FATAL",
            TraceKind::CornerCase => "CORNER_CASE",
            TraceKind::OpLatency => "OP_LATENCY",
            TraceKind::Iteration => "ITERATION",
            TraceKind::Restart => "RESTART",
            TraceKind::AppError => "APP_ERROR",
            TraceKind::RunStart => "RUN_START",
            TraceKind::RunEnd => "RUN_END",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Str(String),
}

impl AttrValue {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            AttrValue::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            AttrValue::Int(_) => None,
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<u64> for AttrValue {
    fn from(v: u64) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<u32> for AttrValue {
    fn from(v: u32) -> Self {
        AttrValue::Int(v.into())
    }
}

impl From<usize> for AttrValue {
    fn from(v: usize) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Int(v.into())
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub t: Time,
    pub kind: TraceKind,
    pub attrs: BTreeMap<String, AttrValue>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceEvent {
    pub fn new(t: Time, kind: TraceKind) -> Self {
        Self { t, kind, attrs: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.insert(key.to_owned(), value.into());
        self
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).and_then(AttrValue::as_i64)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(AttrValue::as_str)
    }

    /// One JSON object: `{"t":..,"kind":..,<attrs>}`.
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("t".into(), Value::from(self.t));
        m.insert("kind".into(), Value::from(self.kind.as_str()));
        for (k, v) in &self.attrs {
            let v = match v {
                AttrValue::Int(i) => Value::from(*i),
                AttrValue::Str(s) => Value::from(s.as_str()),
            };
            m.insert(k.clone(), v);
        }
        Value::Object(m).to_string()
    }

    pub fn from_json(line: &str) -> Result<Self, String> {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let Value::Object(mut m) = v else {
            return Err("not an object".into());
        };
        let t = m
            .remove("t")
            .and_then(|t| t.as_u64())
            .ok_or("missing or invalid `t`")?;
        let kind = m.remove("kind").ok_or("missing `kind`")?;
        let kind: TraceKind = serde_json::from_value(kind).map_err(|e| e.to_string())?;
        let mut attrs = BTreeMap::new();
        for (k, v) in m {
            let v = match v {
                Value::Number(n) => AttrValue::Int(n.as_i64().ok_or_else(|| format!("attr {k}: not an integer"))?),
                Value::String(s) => AttrValue::Str(s),
                Value::Bool(b) => AttrValue::Int(b.into()),
                other => return Err(format!("attr {k}: unsupported value {other}")),
            };
            attrs.insert(k, v);
        }
        Ok(Self { t, kind, attrs })
    }
}

/// Append-only event log.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    events: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ev: TraceEvent) {
        debug_assert!(
            self.events.last().is_none_or(|l| l.t <= ev.t),
            "trace time went backwards"
        );
        self.events.push(ev);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: TraceKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            writeln!(w, "{}", e.to_json())?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, TraceParseError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev = TraceEvent::from_json(&line)
                .map_err(|msg| TraceParseError::Malformed { line: i + 1, msg })?;
            events.push(ev);
        }
        Ok(Self { events })
    }
}

impl FromIterator<TraceEvent> for TraceLog {
    fn from_iter<I: IntoIterator<Item = TraceEvent>>(iter: I) -> Self {
        Self { events: iter.into_iter().collect() }
    }
}
