//! Serves the mock detector over HTTP on an ephemeral port and queries it
//! through the wire client, checking that the answers match the in-process
//! detector, including when the server works at a smaller internal size.
//!
//! cargo run --release --example serve_mock

use ghostcraft::oracle::{detect, HttpOracle, MockDetector, MockDetectorConfig, MockServer, Phase, QueryBudget, ServerOptions};
use ghostcraft::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = MockDetectorConfig::default();
    let (image, _) = synth::synthetic_target(&cfg, 100);
    let local = MockDetector::new(cfg.clone())?.run(&image);

    let server = MockServer::start("127.0.0.1:0", MockDetector::new(cfg.clone())?, ServerOptions::default())?;
    let client = HttpOracle::connect(&server.url())?;
    println!("serving {} at {}", client.info()?.model_id, server.url());
    println!("health: {}", client.health()?.status);
    let budget = QueryBudget::new(10);
    let remote = detect(&client, &image, &budget, Phase::Baseline)?;
    println!("in-process {} detections, over the wire {}", local.len(), remote.len());
    assert_eq!(remote.detections, local);
    server.shutdown();

    let opts = ServerOptions {
        input_size: Some((320, 320)),
        ..Default::default()
    };
    let small = MockServer::start("127.0.0.1:0", MockDetector::new(cfg)?, opts)?;
    let client = HttpOracle::connect(&small.url())?;
    let scaled = detect(&client, &image, &budget, Phase::Baseline)?;
    println!("served at 320x320: {} detections, boxes in the 640x640 frame:", scaled.len());
    for d in &scaled.detections {
        println!("  {:<10} {:?}", d.label, <[usize; 4]>::from(d.bbox));
    }
    println!("{} queries charged", budget.used());
    Ok(())
}
