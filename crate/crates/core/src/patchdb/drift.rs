use serde::{Deserialize, Serialize};

use super::{PatchDbError, PatchIndex};
use crate::oracle::{detect, Detection, Oracle, Phase, QueryBudget};

pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeAgreement {
    pub probe_id: String,
    pub agreement: f64,
    pub stored: usize,
    pub observed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub changed: bool,
    /// Mean of the per-probe agreements.
    pub agreement: f64,
    pub threshold: f64,
    pub probes: Vec<ProbeAgreement>,
}

/// Re-queries each stored probe image and compares against its fingerprint.
pub fn probe_drift<O: Oracle + ?Sized>(
    index: &PatchIndex,
    oracle: &O,
    budget: &QueryBudget,
    threshold: f64,
) -> Result<DriftReport, PatchDbError> {
    if index.oracle_fingerprints.is_empty() {
        return Err(PatchDbError::NoFingerprints);
    }
    let mut probes = Vec::with_capacity(index.oracle_fingerprints.len());
    for fp in &index.oracle_fingerprints {
        let now = detect(oracle, &fp.image, budget, Phase::Drift)?.detections;
        probes.push(ProbeAgreement {
            probe_id: fp.probe_id.clone(),
            agreement: agreement(&fp.detections, &now),
            stored: fp.detections.len(),
            observed: now.len(),
        });
    }
    let agreement = probes.iter().map(|p| p.agreement).sum::<f64>() / probes.len() as f64;
    Ok(DriftReport {
        changed: agreement < threshold,
        agreement,
        threshold,
        probes,
    })
}

/// Sum of IoUs over a greedy same-label matching, divided by the larger set
/// size. Unmatched boxes contribute zero; two empty sets agree fully.
pub fn agreement(old: &[Detection], new: &[Detection]) -> f64 {
    let denom = old.len().max(new.len());
    if denom == 0 {
        return 1.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in old.iter().enumerate() {
        for (j, b) in new.iter().enumerate() {
            if a.label == b.label {
                let iou = a.bbox.iou(&b.bbox);
                if iou > 0.0 {
                    pairs.push((iou, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_old, mut used_new) = (vec![false; old.len()], vec![false; new.len()]);
    let mut total = 0.0;
    for (iou, i, j) in pairs {
        if !used_old[i] && !used_new[j] {
            used_old[i] = true;
            used_new[j] = true;
            total += iou;
        }
    }
    total / denom as f64
}
