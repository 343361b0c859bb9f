//! The audit log: newline-delimited JSON records.
//!
//! The first line is a header `{"type":"header","format":"wal-lineage-audit","version":1}`.
//! Every following line is one [`AuditRecord`], tagged by `"type"`:
//!
//! - `txn`: an applied GCS transaction with its sub-writes and the store
//!   digest before and after;
//! - `rejected`: a transaction the store refused (stale epoch, barrier, ...);
//! - `exec`: a committed task execution with the names and digests of the
//!   partitions it consumed and produced;
//! - `push_failed`: an attempt that found a downstream worker dead;
//! - `fault`, `join`: a worker was killed, a replacement worker joined;
//! - `recovery`: a reconciled recovery plan;
//! - `done`: the run finished with the given result digest.
//!
//! Times are simulator ticks. Task names are `[stage, channel, seq]` and
//! channels `[stage, channel]`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::{Actor, Op};
use crate::digest::Digest;
use crate::ids::{ChannelKey, TaskName, Ticks, WorkerId};
use crate::kernel::Destination;

pub const AUDIT_FORMAT: &str = "wal-lineage-audit";
pub const AUDIT_VERSION: u32 = 1;

/// Order-independent digest of the store's contents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StateDigest(pub u64);

impl fmt::Debug for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Display for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for StateDigest {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(StateDigest)
    }
}

impl Serialize for StateDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StateDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnRecord {
    pub id: u64,
    pub time: Ticks,
    /// Epoch after the transaction applied.
    pub epoch: u64,
    pub actor: Actor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u64>,
    pub ops: Vec<Op>,
    pub pre: StateDigest,
    pub post: StateDigest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    Execute,
    Replay,
    Input,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumedInput {
    pub task: TaskName,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub dest: Destination,
    pub digest: Digest,
}

/// A committed execution. `started` is when inputs were selected; every
/// consumed partition's lineage must have been committed by then.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRecord {
    pub time: Ticks,
    pub started: Ticks,
    pub worker: WorkerId,
    pub attempt: u64,
    pub epoch: u64,
    pub task: TaskName,
    pub kind: ExecKind,
    #[serde(default)]
    pub prescribed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<(u32, u32)>,
    #[serde(default)]
    pub consumed: Vec<ConsumedInput>,
    #[serde(default)]
    pub outputs: Vec<OutputDigest>,
    #[serde(default, rename = "final")]
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewindRecord {
    pub channel: ChannelKey,
    /// Highest committed seq at snapshot time; tasks up to it are
    /// re-executed with prescribed lineage.
    pub frontier: Option<u64>,
    pub worker: WorkerId,
    pub stateful: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedReplay {
    pub task: TaskName,
    pub consumer: ChannelKey,
    /// Worker that executes the replay: the backup's owner, or the
    /// consumer's worker for durable partitions.
    pub executor: WorkerId,
    pub durable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedInput {
    pub task: TaskName,
    pub consumers: Vec<ChannelKey>,
    pub worker: WorkerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub channel: ChannelKey,
    pub worker: WorkerId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub time: Ticks,
    /// Epoch published when the barrier cleared.
    pub epoch: u64,
    pub failed: Vec<WorkerId>,
    pub live: Vec<WorkerId>,
    pub rewinds: Vec<RewindRecord>,
    pub replays: Vec<PlannedReplay>,
    pub inputs: Vec<PlannedInput>,
    pub migrations: Vec<MigrationRecord>,
    /// Partitions recomputed: rewound tasks up to their frontiers plus
    /// input tasks.
    pub reconstructed: u64,
    /// A global restart rather than lineage recovery.
    #[serde(default)]
    pub restart: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditRecord {
    Txn(TxnRecord),
    Rejected {
        time: Ticks,
        actor: Actor,
        epoch: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attempt: Option<u64>,
        error: String,
    },
    Exec(ExecRecord),
    PushFailed {
        time: Ticks,
        attempt: u64,
        task: TaskName,
        worker: WorkerId,
        target: WorkerId,
    },
    Fault {
        time: Ticks,
        worker: WorkerId,
    },
    Join {
        time: Ticks,
        worker: WorkerId,
    },
    Recovery(RecoveryRecord),
    Done {
        time: Ticks,
        result: Digest,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename = "header")]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditParseError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("audit log is empty")]
    Empty,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: AuditRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut Vec<AuditRecord> {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn transactions(&self) -> impl Iterator<Item = &TxnRecord> {
        self.records.iter().filter_map(|r| match r {
            AuditRecord::Txn(t) => Some(t),
            _ => None,
        })
    }

    pub fn execs(&self) -> impl Iterator<Item = &ExecRecord> {
        self.records.iter().filter_map(|r| match r {
            AuditRecord::Exec(e) => Some(e),
            _ => None,
        })
    }

    pub fn recoveries(&self) -> impl Iterator<Item = &RecoveryRecord> {
        self.records.iter().filter_map(|r| match r {
            AuditRecord::Recovery(e) => Some(e),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header {
            format: AUDIT_FORMAT.into(),
            version: AUDIT_VERSION,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()
    }

    /// Parses a log; a truncated or malformed line is reported by number.
    pub fn parse(text: &str) -> Result<AuditLog, AuditParseError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (n, first) = lines.next().ok_or(AuditParseError::Empty)?;
        let header: Header = serde_json::from_str(first).map_err(|e| AuditParseError::Line {
            line: n + 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != AUDIT_FORMAT || header.version != AUDIT_VERSION {
            return Err(AuditParseError::Line {
                line: n + 1,
                message: format!(
                    "unsupported log format {} v{} (expected {AUDIT_FORMAT} v{AUDIT_VERSION})",
                    header.format, header.version
                ),
            });
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            let record = serde_json::from_str(line).map_err(|e| AuditParseError::Line {
                line: n + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(AuditLog { records })
    }
}
