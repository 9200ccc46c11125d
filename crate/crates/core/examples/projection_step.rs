//! One color-manipulation projection step on a toy perturbation, showing
//! which positions are eligible and what each policy does to them.
//!
//! cargo run --release --example projection_step

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ghostcraft::imagecore::Perturbation;
use ghostcraft::projection::{eligible_mask, project, stage_radius, OffsetPolicy, ProjectionParams, ToleranceSchedule};

fn show(name: &str, p: &Perturbation) {
    let (h, w) = p.dims();
    println!("{name}:");
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:>5}", p.data()[(y * w + x) * 3])).collect();
        println!("  {}", row.join(""));
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epsilon = 16;
    let values: Vec<i16> = [-40, -20, -12, -4, 0, 6, 14, 18, 30, 60, -8, 10]
        .iter()
        .flat_map(|&v| [v, v, v])
        .collect();
    let delta = Perturbation::from_raw(3, 4, values)?;
    show("delta (first channel)", &delta);

    for &d in ToleranceSchedule::default().stages() {
        let r = stage_radius(epsilon, d);
        let eligible = eligible_mask(&delta, r as f64).count() / 3;
        println!("stage d={d}: radius {r}, {eligible} of 12 positions eligible");
    }

    let radius = stage_radius(epsilon, 1.0) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    show("default step (ineligible dropped, eligible scaled and recentered)", &project(&delta, radius, &ProjectionParams::default(), &mut rng));
    let keep_half = ProjectionParams {
        s_i: 0.5,
        offset: OffsetPolicy::Fixed { b_e: 0.0 },
        ..Default::default()
    };
    show("s_i = 0.5 with random dropout, no offset", &project(&delta, radius, &keep_half, &mut rng));
    show("identity parameters", &project(&delta, radius, &ProjectionParams::identity(), &mut rng));
    Ok(())
}
