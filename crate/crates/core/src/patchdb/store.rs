//! Directory layout:
//!
//! ```text
//! DB_DIR/index.json            metadata, fingerprints, version, digest
//! DB_DIR/<source_id>_<k>.png   one lossless PNG per record
//! DB_DIR/probe_<k>.png         fingerprinted probe images
//! ```
//!
//! The content digest covers the serialized metadata and every pixel, so a
//! change to either is caught on load.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PatchDbError, PatchIndex, PatchRecord, ProbeFingerprint};
use crate::imagecore::{load_image, save_image, ColorStats, ImageTensor, RegionRect};
use crate::oracle::Detection;

pub const SCHEMA_VERSION: u64 = 1;
const INDEX_FILE: &str = "index.json";

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    file: String,
    label: String,
    score: f64,
    source_image_id: String,
    source_box: RegionRect,
    stats: ColorStats,
    augmentation: String,
    robustness: u32,
}

#[derive(Serialize, Deserialize)]
struct FingerprintMeta {
    probe_id: String,
    file: String,
    detections: Vec<Detection>,
    digest: String,
}

#[derive(Serialize, Deserialize)]
struct IndexBody {
    schema_version: u64,
    created_at: String,
    config_digest: String,
    transforms_tested: u32,
    partial: bool,
    records: Vec<RecordMeta>,
    oracle_fingerprints: Vec<FingerprintMeta>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    #[serde(flatten)]
    body: IndexBody,
    content_digest: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PatchDbError + '_ {
    move |source| PatchDbError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn content_digest<'a>(body: &IndexBody, images: impl Iterator<Item = (&'a str, &'a ImageTensor)>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(body).expect("index body serializes"));
    for (name, img) in images {
        h.update(name.as_bytes());
        h.update((img.height() as u64).to_le_bytes());
        h.update((img.width() as u64).to_le_bytes());
        h.update(img.data());
    }
    hex::encode(h.finalize())
}

/// Writes `index` into directory `dir`, creating it if needed.
pub fn save_index(index: &PatchIndex, dir: impl AsRef<Path>) -> Result<(), PatchDbError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut counters: HashMap<String, usize> = HashMap::new();
    let records: Vec<RecordMeta> = index
        .records
        .iter()
        .map(|r| {
            let stem = sanitize(&r.source_image_id);
            let k = counters.entry(stem.clone()).or_insert(0);
            let file = format!("{stem}_{k}.png");
            *k += 1;
            RecordMeta {
                file,
                label: r.label.clone(),
                score: r.score,
                source_image_id: r.source_image_id.clone(),
                source_box: r.source_box,
                stats: r.stats,
                augmentation: r.augmentation.clone(),
                robustness: r.robustness,
            }
        })
        .collect();
    let fingerprints: Vec<FingerprintMeta> = index
        .oracle_fingerprints
        .iter()
        .enumerate()
        .map(|(k, f)| FingerprintMeta {
            probe_id: f.probe_id.clone(),
            file: format!("probe_{k}.png"),
            detections: f.detections.clone(),
            digest: f.digest.clone(),
        })
        .collect();
    let body = IndexBody {
        schema_version: SCHEMA_VERSION,
        created_at: index.created_at.clone(),
        config_digest: index.config_digest.clone(),
        transforms_tested: index.transforms_tested,
        partial: index.partial,
        records,
        oracle_fingerprints: fingerprints,
    };

    let images = body
        .records
        .iter()
        .map(|m| m.file.as_str())
        .zip(index.records.iter().map(|r| &r.patch))
        .chain(
            body.oracle_fingerprints
                .iter()
                .map(|m| m.file.as_str())
                .zip(index.oracle_fingerprints.iter().map(|f| &f.image)),
        );
    let digest = content_digest(&body, images.clone());
    for (name, img) in images {
        save_image(img, dir.join(name))?;
    }
    let file = IndexFile {
        body,
        content_digest: digest,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&file).expect("index serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

/// Reads an index written by [`save_index`], verifying version and digest.
pub fn load_index(dir: impl AsRef<Path>) -> Result<PatchIndex, PatchDbError> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| PatchDbError::Format(format!("{}: {e}", path.display())))?;
    // Version first, so older layouts fail loudly instead of half-parsing.
    let found = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PatchDbError::Format("missing schema_version".into()))?;
    if found != SCHEMA_VERSION {
        return Err(PatchDbError::VersionMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let file: IndexFile = serde_json::from_value(raw).map_err(|e| PatchDbError::Format(e.to_string()))?;
    let body = file.body;

    let load = |name: &str| -> Result<ImageTensor, PatchDbError> {
        if name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return Err(PatchDbError::Format(format!("illegal file name {name:?}")));
        }
        Ok(load_image(dir.join(name))?)
    };
    let patches: Vec<ImageTensor> = body.records.iter().map(|m| load(&m.file)).collect::<Result<_, _>>()?;
    let probes: Vec<ImageTensor> = body
        .oracle_fingerprints
        .iter()
        .map(|m| load(&m.file))
        .collect::<Result<_, _>>()?;

    let computed = content_digest(
        &body,
        body.records
            .iter()
            .map(|m| m.file.as_str())
            .zip(patches.iter())
            .chain(body.oracle_fingerprints.iter().map(|m| m.file.as_str()).zip(probes.iter())),
    );
    if computed != file.content_digest {
        return Err(PatchDbError::DigestMismatch {
            stored: file.content_digest,
            computed,
        });
    }

    let records = body
        .records
        .into_iter()
        .zip(patches)
        .map(|(m, patch)| {
            if patch.dims() != (m.source_box.height(), m.source_box.width()) {
                return Err(PatchDbError::Format(format!(
                    "{} is {}x{}, box is {}x{}",
                    m.file,
                    patch.height(),
                    patch.width(),
                    m.source_box.height(),
                    m.source_box.width()
                )));
            }
            Ok(PatchRecord {
                patch,
                label: m.label,
                score: m.score,
                source_image_id: m.source_image_id,
                source_box: m.source_box,
                stats: m.stats,
                augmentation: m.augmentation,
                robustness: m.robustness,
            })
        })
        .collect::<Result<_, _>>()?;
    let oracle_fingerprints = body
        .oracle_fingerprints
        .into_iter()
        .zip(probes)
        .map(|(m, image)| ProbeFingerprint {
            probe_id: m.probe_id,
            image,
            detections: m.detections,
            digest: m.digest,
        })
        .collect();
    Ok(PatchIndex {
        records,
        oracle_fingerprints,
        created_at: body.created_at,
        config_digest: body.config_digest,
        transforms_tested: body.transforms_tested,
        partial: body.partial,
    })
}
