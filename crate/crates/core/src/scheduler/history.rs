use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ScheduleError;

/// Hash of the record before the first one.
pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// One executed run. `hash` chains the record to its predecessor and
/// covers every field except `stale`, which may flip later.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seq: u64,
    pub schedule: String,
    pub spec: String,
    pub topology_version: u64,
    /// `upheld`, `refuted`, `aborted` or `error`.
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<String>,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub stale: bool,
    pub prev_hash: String,
    pub hash: String,
}

/// Fields supplied by the caller when appending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewRun {
    pub schedule: String,
    pub spec: String,
    pub topology_version: u64,
    pub verdict: String,
    pub error: Option<String>,
    pub report_path: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Serialize)]
struct Hashed<'a> {
    seq: u64,
    schedule: &'a str,
    spec: &'a str,
    topology_version: u64,
    verdict: &'a str,
    error: &'a Option<String>,
    report_path: &'a Option<String>,
    timestamp: &'a DateTime<Utc>,
    prev_hash: &'a str,
}

fn record_hash(r: &RunRecord) -> String {
    let body = Hashed {
        seq: r.seq,
        schedule: &r.schedule,
        spec: &r.spec,
        topology_version: r.topology_version,
        verdict: &r.verdict,
        error: &r.error,
        report_path: &r.report_path,
        timestamp: &r.timestamp,
        prev_hash: &r.prev_hash,
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("record serializes")))
}

/// Append-only, hash-chained run history, optionally backed by a JSON
/// Lines file.
#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    path: Option<PathBuf>,
    records: Vec<RunRecord>,
}

impl RunHistory {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a history file and verifies its chain.
    pub fn open(path: &Path) -> Result<Self, ScheduleError> {
        let mut records = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| ScheduleError::Io(e.to_string()))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: RunRecord = serde_json::from_str(line)
                    .map_err(|e| ScheduleError::History(format!("line {}: {e}", i + 1)))?;
                records.push(r);
            }
        }
        let h = Self {
            path: Some(path.to_path_buf()),
            records,
        };
        h.verify()?;
        Ok(h)
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks sequence numbers and the hash chain.
    pub fn verify(&self) -> Result<(), ScheduleError> {
        let mut prev = GENESIS.to_string();
        for (i, r) in self.records.iter().enumerate() {
            if r.seq != i as u64 || r.prev_hash != prev || r.hash != record_hash(r) {
                return Err(ScheduleError::BrokenChain(i));
            }
            prev = r.hash.clone();
        }
        Ok(())
    }

    pub fn append(&mut self, run: NewRun) -> Result<RunRecord, ScheduleError> {
        let mut r = RunRecord {
            seq: self.records.len() as u64,
            schedule: run.schedule,
            spec: run.spec,
            topology_version: run.topology_version,
            verdict: run.verdict,
            error: run.error,
            report_path: run.report_path,
            timestamp: run.timestamp,
            stale: false,
            prev_hash: self.records.last().map_or_else(|| GENESIS.to_string(), |r| r.hash.clone()),
            hash: String::new(),
        };
        r.hash = record_hash(&r);
        if let Some(p) = &self.path {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| ScheduleError::Io(e.to_string()))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| ScheduleError::Io(e.to_string()))?;
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| ScheduleError::Io(e.to_string()))?;
        }
        self.records.push(r.clone());
        Ok(r)
    }

    /// Marks every record older than `version` stale; returns how many
    /// flipped. Stale records never become fresh again.
    pub fn mark_stale(&mut self, version: u64) -> Result<usize, ScheduleError> {
        let mut flipped = 0;
        for r in &mut self.records {
            if !r.stale && r.topology_version < version {
                r.stale = true;
                flipped += 1;
            }
        }
        if flipped > 0 {
            self.rewrite()?;
        }
        Ok(flipped)
    }

    fn rewrite(&self) -> Result<(), ScheduleError> {
        let Some(p) = &self.path else { return Ok(()) };
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        let tmp = p.with_extension("jsonl.tmp");
        fs::write(&tmp, text).map_err(|e| ScheduleError::Io(e.to_string()))?;
        fs::rename(&tmp, p).map_err(|e| ScheduleError::Io(e.to_string()))
    }
}

/// Stateless form of [`RunHistory::mark_stale`].
pub fn mark_stale(mut records: Vec<RunRecord>, version: u64) -> Vec<RunRecord> {
    for r in &mut records {
        if r.topology_version < version {
            r.stale = true;
        }
    }
    records
}
