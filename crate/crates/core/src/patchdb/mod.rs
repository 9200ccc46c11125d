//! The stolen-object database.
//!
//! Objects the oracle recognizes in a public corpus are cropped, tagged with
//! color statistics and augmentation provenance, and persisted once. Attacks
//! on any later target draw from the same index.

mod drift;
mod harvest;
mod store;

pub use drift::{probe_drift, DriftReport, ProbeAgreement, DEFAULT_DRIFT_THRESHOLD};
pub use harvest::{harvest, load_corpus, CorpusImage, HarvestConfig};
pub use store::{load_index, save_index, SCHEMA_VERSION};

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagecore::{resize_bilinear, ColorStats, ImageError, ImageTensor, RegionRect};
use crate::oracle::{Detection, OracleError};

/// Records below this oracle confidence are never used as patch material.
pub const DEFAULT_MIN_SCORE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum PatchDbError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("harvest found no objects in the corpus")]
    EmptyHarvest,
    #[error("query budget ran out mid-harvest; partial index holds {} records", partial.records.len())]
    BudgetExhausted { partial: Box<PatchIndex> },
    #[error("no record has score >= {min_score}")]
    NoCandidates { min_score: f64 },
    #[error("index has no probe fingerprints")]
    NoFingerprints,
    #[error("index schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("index content digest mismatch: stored {stored}, computed {computed}")]
    DigestMismatch { stored: String, computed: String },
    #[error("malformed index: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// One harvested object.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch: ImageTensor,
    pub label: String,
    pub score: f64,
    pub source_image_id: String,
    pub source_box: RegionRect,
    pub stats: ColorStats,
    /// `"none"` for crops of the clean image, otherwise the transform tag.
    pub augmentation: String,
    /// How many of the tested color transforms left the object detectable.
    pub robustness: u32,
}

/// Detections recorded for a probe image at harvest time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFingerprint {
    pub probe_id: String,
    pub image: ImageTensor,
    pub detections: Vec<Detection>,
    pub digest: String,
}

impl ProbeFingerprint {
    pub fn new(probe_id: String, image: ImageTensor, detections: Vec<Detection>) -> Self {
        let digest = detections_digest(&detections);
        Self {
            probe_id,
            image,
            detections,
            digest,
        }
    }
}

pub fn detections_digest(dets: &[Detection]) -> String {
    let bytes = serde_json::to_vec(dets).expect("detections serialize");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchIndex {
    pub records: Vec<PatchRecord>,
    pub oracle_fingerprints: Vec<ProbeFingerprint>,
    pub created_at: String,
    pub config_digest: String,
    /// Number of color transforms each object was re-detected under.
    pub transforms_tested: u32,
    /// Set when harvesting stopped early.
    pub partial: bool,
}

impl PatchIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Keeps records whose robustness is at least `min_robustness`, in order.
pub fn consistency_filter(index: &PatchIndex, min_robustness: u32) -> PatchIndex {
    PatchIndex {
        records: index
            .records
            .iter()
            .filter(|r| r.robustness >= min_robustness)
            .cloned()
            .collect(),
        ..index.clone()
    }
}

/// Records passing `min_score`, best color match first, at most `n`.
///
/// The color distance is the mean absolute difference of per-channel means.
/// `rng` only breaks exact distance ties.
pub fn rank_candidates<'a, R: Rng + ?Sized>(
    index: &'a PatchIndex,
    target: &ColorStats,
    n: usize,
    min_score: f64,
    rng: &mut R,
) -> Result<Vec<&'a PatchRecord>, PatchDbError> {
    let mut scored: Vec<(f64, &PatchRecord)> = index
        .records
        .iter()
        .filter(|r| r.score >= min_score)
        .map(|r| (r.stats.mean_distance(target), r))
        .collect();
    if scored.is_empty() {
        return Err(PatchDbError::NoCandidates { min_score });
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Shuffle runs of equal distance that reach into the first n.
    let mut start = 0;
    while start < scored.len().min(n) {
        let mut end = start + 1;
        while end < scored.len() && scored[end].0 == scored[start].0 {
            end += 1;
        }
        if end - start > 1 {
            scored[start..end].shuffle(rng);
        }
        start = end;
    }
    Ok(scored.into_iter().take(n).map(|(_, r)| r).collect())
}

/// The `n` best color matches with their patches resized to
/// `cell_size × cell_size`.
pub fn select_candidates<R: Rng + ?Sized>(
    index: &PatchIndex,
    target: &ColorStats,
    cell_size: usize,
    n: usize,
    min_score: f64,
    rng: &mut R,
) -> Result<Vec<PatchRecord>, PatchDbError> {
    rank_candidates(index, target, n, min_score, rng)?
        .into_iter()
        .map(|r| {
            Ok(PatchRecord {
                patch: resize_bilinear(&r.patch, cell_size, cell_size)?,
                ..r.clone()
            })
        })
        .collect()
}
