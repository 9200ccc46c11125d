//! Attacks one synthetic target and walks through the query trace.
//!
//! cargo run --release --example attack_single [epsilon]

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ghostcraft::attack::{run_attack, AttackConfig};
use ghostcraft::imagecore::linf_distance;
use ghostcraft::oracle::{MockDetector, MockDetectorConfig, QueryBudget};
use ghostcraft::patchdb::{self, CorpusImage, HarvestConfig};
use ghostcraft::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epsilon: u8 = std::env::args().nth(1).map_or(Ok(32), |s| s.parse())?;
    let cfg = MockDetectorConfig::default();
    let detector = MockDetector::new(cfg.clone())?;
    let corpus: Vec<CorpusImage> = synth::synthetic_corpus(&cfg, 30, 6, 1)
        .into_iter()
        .map(|(id, image, _)| CorpusImage { id, image })
        .collect();
    let db = patchdb::harvest(
        &corpus,
        &detector,
        &HarvestConfig::default(),
        &QueryBudget::new(500),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;

    let (target, _) = synth::synthetic_target(&cfg, 100);
    let attack_cfg = AttackConfig {
        seed: 11,
        ..AttackConfig::with_epsilon(epsilon)
    };
    let r = run_attack(&target, &db, &attack_cfg, &detector)?;

    println!("epsilon {epsilon}: {} -> {} objects (+{})", r.baseline_count, r.best_count, r.increment);
    println!("L-inf {} (rescanned {}), {} queries, success {}", r.linf, linf_distance(&r.adv_image, &target)?, r.queries_used, r.success);

    let mut by_phase: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for q in &r.trace {
        let e = by_phase.entry(q.phase.to_string()).or_default();
        e.0 += 1;
        e.1 = e.1.max(q.object_count);
    }
    for (phase, (n, peak)) in by_phase {
        println!("  {phase:<10} {n:>4} queries, peak {peak} objects");
    }
    let out = std::env::temp_dir().join("ghostcraft_adv.png");
    ghostcraft::imagecore::save_image(&r.adv_image, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
