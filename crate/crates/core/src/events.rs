//! Append-only lifecycle event log shared by the managers and the metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Entity {
    Task,
    Pilot,
    Job,
    Workload,
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub type Attrs = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub entity: Entity,
    pub entity_id: String,
    pub transition: String,
    #[serde(default)]
    pub attrs: Attrs,
}

impl EventRecord {
    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Value::as_str)
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        self.attrs.get(key).and_then(Value::as_f64)
    }

    pub fn attr_u64(&self, key: &str) -> Option<u64> {
        self.attrs.get(key).and_then(Value::as_u64)
    }

    pub fn is(&self, entity: Entity, transition: &str) -> bool {
        self.entity == entity && self.transition == transition
    }
}

/// Builds an attribute map from `(key, value)` pairs.
#[macro_export]
macro_rules! attrs {
    () => { $crate::events::Attrs::new() };
    ($($k:expr => $v:expr),+ $(,)?) => {{
        let mut m = $crate::events::Attrs::new();
        $( m.insert(($k).to_string(), ::serde_json::json!($v)); )+
        m
    }};
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        time: f64,
        entity: Entity,
        entity_id: impl Into<String>,
        transition: impl Into<String>,
        attrs: Attrs,
    ) {
        self.records.push(EventRecord {
            time,
            entity,
            entity_id: entity_id.into(),
            transition: transition.into(),
            attrs,
        });
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            records.push(rec);
        }
        Ok(EventLog { records })
    }
}

impl From<Vec<EventRecord>> for EventLog {
    fn from(records: Vec<EventRecord>) -> Self {
        EventLog { records }
    }
}
