//! JSONL training/eval telemetry.
//!
//! One JSON object per line; the first line is a version record. Field
//! order is fixed (struct order plus sorted field names) so that a fixed
//! (config, seed) reproduces the file bit-identically apart from wall_ms,
//! which `canonical_without_wall` strips for comparisons.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const VERSION_LINE: &str = r#"{"format":"memdlm-metrics","version":1}"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
    Exposure,
    Retrieval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub fields: BTreeMap<String, f64>,
    pub wall_ms: u64,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(step: u64, phase: Phase, seed: u64) -> Self {
        MetricRecord { step, phase, fields: BTreeMap::new(), wall_ms: 0, seed }
    }

    pub fn field(mut self, name: &str, value: f64) -> Self {
        self.fields.insert(name.to_string(), value);
        self
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: BTreeMap<String, u64>,
}

impl MetricsWriter {
    /// Create a fresh metrics file with its version line.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{VERSION_LINE}")?;
        out.flush()?;
        Ok(MetricsWriter { out, last_step: BTreeMap::new() })
    }

    /// Reopen for append after `truncate_after` dropped stale rows.
    pub fn append(path: &Path) -> std::io::Result<Self> {
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(MetricsWriter { out, last_step: BTreeMap::new() })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> std::io::Result<()> {
        let phase_key = format!("{:?}", rec.phase);
        if let Some(&prev) = self.last_step.get(&phase_key) {
            debug_assert!(rec.step >= prev, "steps must be nondecreasing within a phase");
        }
        self.last_step.insert(phase_key, rec.step);
        let line = serde_json::to_string(rec).expect("metric record serializes");
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}

/// All records in a metrics file (version line skipped).
pub fn read_records(path: &Path) -> std::io::Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() || line.contains("\"format\"") {
            continue;
        }
        if let Ok(rec) = serde_json::from_str::<MetricRecord>(&line) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Drop every record with step > `keep_upto` (used on resume so the file
/// matches an uninterrupted run). Surviving lines are kept byte-for-byte;
/// re-serializing would not be bit-faithful.
pub fn truncate_after(path: &Path, keep_upto: u64) -> std::io::Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BufWriter::new(File::create(path)?);
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let keep = if line.contains("\"format\"") {
            true
        } else {
            serde_json::from_str::<MetricRecord>(line).map_or(false, |r| r.step <= keep_upto)
        };
        if keep {
            writeln!(out, "{line}")?;
        }
    }
    out.flush()
}

/// Canonical content for bit-identity checks: records re-serialized with
/// wall_ms forced to zero.
pub fn canonical_without_wall(path: &Path) -> std::io::Result<String> {
    let mut s = String::new();
    for mut rec in read_records(path)? {
        rec.wall_ms = 0;
        s.push_str(&serde_json::to_string(&rec).unwrap());
        s.push('\n');
    }
    Ok(s)
}
