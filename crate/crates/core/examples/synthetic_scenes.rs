//! Generates a corpus image and an attack target, runs the mock detector on
//! both and compares what it finds against what was planted.
//!
//! cargo run --release --example synthetic_scenes

use ghostcraft::oracle::{MockDetector, MockDetectorConfig};
use ghostcraft::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = MockDetectorConfig::default();
    let detector = MockDetector::new(cfg.clone())?;
    println!("templates: {}", cfg.templates.iter().map(|t| t.label.as_str()).collect::<Vec<_>>().join(", "));
    println!("object sizes (h, w): {:?}", cfg.object_sizes());

    let (_, corpus_img, planted) = synth::synthetic_corpus(&cfg, 1, 6, 7).remove(0);
    let found = detector.run(&corpus_img);
    println!("corpus image: planted {}, detected {}", planted.len(), found.len());
    for d in &found {
        println!("  {:<10} score {:.2} box {:?}", d.label, d.score, <[usize; 4]>::from(d.bbox));
    }

    let (target, planted) = synth::synthetic_target(&cfg, 100);
    println!("target: planted {}, detected {}", planted.len(), detector.run(&target).len());

    let out = std::env::temp_dir().join("ghostcraft_scene.png");
    ghostcraft::imagecore::save_image(&corpus_img, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
