use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PatchDbError, PatchIndex, PatchRecord, ProbeFingerprint};
use crate::imagecore::{color_stats, color_transform, load_image, resize_bilinear, ColorTransform, ImageTensor};
use crate::oracle::{detect, Detection, Oracle, OracleError, Phase, QueryBudget};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusImage {
    pub id: String,
    pub image: ImageTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    /// Color transforms each corpus image is re-queried under.
    pub augmentations: Vec<ColorTransform>,
    /// Leading corpus images whose detections are fingerprinted for drift checks.
    pub probe_count: usize,
    /// Same-label IoU at which an augmented detection counts as the same object.
    pub match_iou: f64,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            augmentations: vec![ColorTransform::DEFAULT_JITTER, ColorTransform::Equalize],
            probe_count: 3,
            match_iou: 0.5,
        }
    }
}

impl HarvestConfig {
    /// Oracle queries spent per corpus image.
    pub fn queries_per_image(&self) -> usize {
        1 + self.augmentations.len()
    }
}

/// Loads images in order, resizing each to `size` when given. Ids are file
/// stems.
pub fn load_corpus(paths: &[PathBuf], size: Option<(usize, usize)>) -> Result<Vec<CorpusImage>, PatchDbError> {
    paths
        .iter()
        .map(|p| {
            let mut image = load_image(p)?;
            if let Some((h, w)) = size {
                if image.dims() != (h, w) {
                    image = resize_bilinear(&image, h, w)?;
                }
            }
            Ok(CorpusImage { id: stem(p), image })
        })
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

struct ImageHarvest {
    records: Vec<PatchRecord>,
    clean: Vec<Detection>,
}

/// Queries every corpus image clean and under each augmentation, and crops
/// every detection into a record.
///
/// Images are processed in parallel; per-image randomness is drawn from
/// `rng` up front so the result does not depend on scheduling. If the
/// budget runs out, the images that finished are returned inside
/// [`PatchDbError::BudgetExhausted`].
pub fn harvest<O, R>(
    corpus: &[CorpusImage],
    oracle: &O,
    cfg: &HarvestConfig,
    budget: &QueryBudget,
    rng: &mut R,
) -> Result<PatchIndex, PatchDbError>
where
    O: Oracle + ?Sized,
    R: Rng + ?Sized,
{
    if corpus.is_empty() {
        return Err(PatchDbError::EmptyCorpus);
    }
    for t in &cfg.augmentations {
        t.validate()?;
    }
    let seeds: Vec<u64> = corpus.iter().map(|_| rng.gen()).collect();
    let results: Vec<Result<ImageHarvest, OracleError>> = corpus
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(item, &seed)| harvest_one(item, oracle, cfg, budget, seed))
        .collect();

    let mut index = PatchIndex {
        records: Vec::new(),
        oracle_fingerprints: Vec::new(),
        created_at: chrono::Utc::now().to_rfc3339(),
        config_digest: config_digest(cfg, &oracle.id()),
        transforms_tested: cfg.augmentations.len() as u32,
        partial: false,
    };
    for (item, result) in corpus.iter().zip(results) {
        match result {
            Ok(h) => {
                if index.oracle_fingerprints.len() < cfg.probe_count {
                    index
                        .oracle_fingerprints
                        .push(ProbeFingerprint::new(item.id.clone(), item.image.clone(), h.clean));
                }
                index.records.extend(h.records);
            }
            Err(OracleError::BudgetExhausted { .. }) => index.partial = true,
            Err(e) => return Err(e.into()),
        }
    }
    if index.partial {
        return Err(PatchDbError::BudgetExhausted {
            partial: Box::new(index),
        });
    }
    if index.records.is_empty() {
        return Err(PatchDbError::EmptyHarvest);
    }
    Ok(index)
}

fn harvest_one<O: Oracle + ?Sized>(
    item: &CorpusImage,
    oracle: &O,
    cfg: &HarvestConfig,
    budget: &QueryBudget,
    seed: u64,
) -> Result<ImageHarvest, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = detect(oracle, &item.image, budget, Phase::Harvest)?.detections;
    let mut variants: Vec<(String, ImageTensor, Vec<Detection>)> = Vec::with_capacity(cfg.augmentations.len());
    for t in &cfg.augmentations {
        let img = color_transform(&item.image, t, &mut rng)?;
        let dets = detect(oracle, &img, budget, Phase::Harvest)?.detections;
        variants.push((t.tag().to_string(), img, dets));
    }

    let robustness = |d: &Detection| -> u32 {
        variants
            .iter()
            .filter(|(_, _, dets)| {
                dets.iter()
                    .any(|o| o.label == d.label && o.bbox.iou(&d.bbox) >= cfg.match_iou)
            })
            .count() as u32
    };

    let mut records = Vec::new();
    let sources = std::iter::once(("none", &item.image, &clean))
        .chain(variants.iter().map(|(tag, img, dets)| (tag.as_str(), img, dets)));
    for (tag, img, dets) in sources {
        for d in dets {
            let patch = img.crop(&d.bbox)?;
            records.push(PatchRecord {
                stats: color_stats(img, &d.bbox)?,
                patch,
                label: d.label.clone(),
                score: d.score,
                source_image_id: item.id.clone(),
                source_box: d.bbox,
                augmentation: tag.to_string(),
                robustness: robustness(d),
            });
        }
    }
    Ok(ImageHarvest { records, clean })
}

fn config_digest(cfg: &HarvestConfig, oracle_id: &str) -> String {
    let body = serde_json::json!({ "harvest": cfg, "oracle": oracle_id });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}
