//! Fingerprints the oracle during harvesting, then checks for drift against
//! the same detector and against one whose templates were retrained.
//!
//! cargo run --release --example drift_probe

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ghostcraft::imagecore::ImageTensor;
use ghostcraft::oracle::{standard_templates, MockDetector, MockDetectorConfig, QueryBudget};
use ghostcraft::patchdb::{self, CorpusImage, HarvestConfig, DEFAULT_DRIFT_THRESHOLD};
use ghostcraft::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = MockDetectorConfig::default();
    let corpus: Vec<CorpusImage> = synth::synthetic_corpus(&cfg, 6, 4, 2)
        .into_iter()
        .map(|(id, image, _)| CorpusImage { id, image })
        .collect();
    let original = MockDetector::new(cfg.clone())?;
    let index = patchdb::harvest(
        &corpus,
        &original,
        &HarvestConfig::default(),
        &QueryBudget::new(100),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    println!("{} probe fingerprints stored", index.oracle_fingerprints.len());

    let same = patchdb::probe_drift(&index, &original, &QueryBudget::new(10), DEFAULT_DRIFT_THRESHOLD)?;
    println!("same detector:    agreement {:.3}, changed {}", same.agreement, same.changed);

    // Half the templates mirrored left to right stands in for a model update.
    let templates = standard_templates()
        .into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            if i % 2 == 0 {
                let (h, w) = t.pattern.dims();
                t.pattern = ImageTensor::from_fn(h, w, |x, y| t.pattern.pixel(w - 1 - x, y)).expect("same size");
            }
            t
        })
        .collect();
    let updated = MockDetector::new(MockDetectorConfig { templates, ..cfg })?;
    let drift = patchdb::probe_drift(&index, &updated, &QueryBudget::new(10), DEFAULT_DRIFT_THRESHOLD)?;
    println!("updated detector: agreement {:.3}, changed {}", drift.agreement, drift.changed);
    for p in &drift.probes {
        println!("  {:<12} stored {:>2} observed {:>2} agreement {:.3}", p.probe_id, p.stored, p.observed, p.agreement);
    }
    Ok(())
}
