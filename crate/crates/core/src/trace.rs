//! Per-query trace records, exported one JSON object per line.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::imagecore::ImageTensor;
use crate::oracle::{DetectionSet, Phase};

/// A queried image and what the oracle said about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub image: ImageTensor,
    pub object_count: usize,
    /// Tolerance stage the image was produced in; 0 for images queried
    /// before color manipulation.
    pub d: f64,
    /// Budget index of the query that observed `object_count`.
    pub queries_at: u64,
}

impl Checkpoint {
    /// Keeps the higher count; on ties the earlier checkpoint stays.
    pub fn keep_better(slot: &mut Option<Checkpoint>, candidate: impl FnOnce() -> Checkpoint, count: usize) {
        if slot.as_ref().is_none_or(|c| count > c.object_count) {
            *slot = Some(candidate());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_index: u64,
    pub phase: Phase,
    pub object_count: usize,
    /// L∞ distance of the queried image from the original.
    pub linf: u8,
    /// Tolerance stage; absent outside color manipulation.
    pub d: Option<f64>,
}

impl QueryRecord {
    pub fn new(set: &DetectionSet, phase: Phase, linf: u8, d: Option<f64>) -> Self {
        Self {
            query_index: set.query_index,
            phase,
            object_count: set.len(),
            linf,
            d,
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[QueryRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl(text: &str) -> Result<Vec<QueryRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
