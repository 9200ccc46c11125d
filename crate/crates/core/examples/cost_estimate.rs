//! Prices a 500-image harvest and a batch of attacks under API and GPU
//! pricing.
//!
//! cargo run --release --example cost_estimate

use ghostcraft::harness::{estimate_cost_for_queries, PricingModel};
use ghostcraft::patchdb::HarvestConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pricing = PricingModel::default();
    println!("{pricing:?}");
    let harvest_queries = 500 * HarvestConfig::default().queries_per_image() as u64;
    for (what, queries) in [
        ("500-image harvest", harvest_queries),
        ("one 4000-query attack", 4000),
        ("100 attacks at 300 queries", 100 * 300),
    ] {
        let c = estimate_cost_for_queries(queries, &pricing)?;
        println!(
            "{what:<28} {queries:>6} queries  api ${:>7.2}  gpu ${:>7.2} ({:.1} h)  cheaper: {:?}",
            c.api_cost,
            c.gpu_cost,
            c.wall_time / 3600.0,
            c.cheaper
        );
    }
    Ok(())
}
