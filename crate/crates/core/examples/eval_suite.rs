//! Evaluates a small target suite across four radii and writes the report,
//! the ASR table and the bar plot.
//!
//! cargo run --release --example eval_suite [targets]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ghostcraft::attack::AttackConfig;
use ghostcraft::harness::{asr_table_csv, render_asr_plot, run_eval, EvalTarget};
use ghostcraft::oracle::{MockDetector, MockDetectorConfig, QueryBudget};
use ghostcraft::patchdb::{self, CorpusImage, HarvestConfig};
use ghostcraft::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map_or(Ok(4), |s| s.parse())?;
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

    let targets: Vec<EvalTarget> = synth::synthetic_targets(&cfg, n, 100)
        .into_iter()
        .map(|(id, img)| EvalTarget::new(id, img))
        .collect();
    let cfgs: Vec<AttackConfig> = [8, 16, 24, 32].into_iter().map(AttackConfig::with_epsilon).collect();
    let out = run_eval(&targets, &db, &cfgs, &detector, 0)?;
    let report = &out.report;

    for s in &report.summaries {
        println!(
            "eps {:>2}: ASR {:.2}  queries mean {:.0} median {:.0} max {}",
            s.epsilon, s.asr, s.queries.mean, s.queries.median, s.queries.max
        );
    }
    let dir = std::env::temp_dir().join("ghostcraft_eval");
    std::fs::create_dir_all(&dir)?;
    report.save(&dir.join("report.json"))?;
    std::fs::write(dir.join("report.csv"), asr_table_csv(std::slice::from_ref(report)))?;
    ghostcraft::imagecore::save_image(&render_asr_plot(std::slice::from_ref(report)), dir.join("report.png"))?;
    println!("{} total queries; outputs in {}", report.total_queries, dir.display());
    Ok(())
}
