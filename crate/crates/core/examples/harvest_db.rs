//! Harvests a patch database from a synthetic corpus, persists it, reloads
//! it and keeps only the objects that survived every augmentation.
//!
//! cargo run --release --example harvest_db

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ghostcraft::imagecore::ColorTransform;
use ghostcraft::oracle::{MockDetector, MockDetectorConfig, Phase, QueryBudget};
use ghostcraft::patchdb::{self, CorpusImage, HarvestConfig};
use ghostcraft::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = MockDetectorConfig::default();
    let corpus: Vec<CorpusImage> = synth::synthetic_corpus(&cfg, 40, 6, 1)
        .into_iter()
        .map(|(id, image, _)| CorpusImage { id, image })
        .collect();
    let detector = MockDetector::new(cfg)?;
    let harvest_cfg = HarvestConfig {
        augmentations: vec![ColorTransform::DEFAULT_JITTER, ColorTransform::Posterize { bits: 1 }],
        ..Default::default()
    };
    let budget = QueryBudget::new(1000);
    let index = patchdb::harvest(&corpus, &detector, &harvest_cfg, &budget, &mut ChaCha8Rng::seed_from_u64(3))?;
    println!(
        "{} records from {} images using {} queries ({} per image)",
        index.len(),
        corpus.len(),
        budget.tally(Phase::Harvest),
        harvest_cfg.queries_per_image()
    );

    let dir = std::env::temp_dir().join("ghostcraft_db_example");
    patchdb::save_index(&index, &dir)?;
    let reloaded = patchdb::load_index(&dir)?;
    assert_eq!(reloaded, index);
    println!("saved and verified {}", dir.display());

    // Normalized correlation ignores per-channel gain and offset, and the
    // templates are two-tone, so the mock keeps recognizing nearly every
    // object under these transforms. Learned detectors drop far more.
    for min in 0..=2 {
        println!("robustness >= {min}: {} records", patchdb::consistency_filter(&reloaded, min).len());
    }
    Ok(())
}
