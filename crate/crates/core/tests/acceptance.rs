//! End-to-end acceptance suite against the mock detector.
//!
//! Runs every criterion, prints one PASS/FAIL line each, and exits non-zero
//! if any failed. Run with `cargo test --release --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ghostcraft::attack::{run_attack, AttackConfig};
use ghostcraft::harness::{estimate_cost_for_queries, image_digest, run_eval, EvalOutput, EvalTarget, PricingModel};
use ghostcraft::imagecore::{load_image, save_image, ImageTensor, Perturbation, PixelMask, RegionRect};
use ghostcraft::oracle::{
    detect, Detection, MockDetector, MockDetectorConfig, Oracle, OracleError, Phase, QueryBudget,
};
use ghostcraft::patchdb::{self, CorpusImage, HarvestConfig, PatchDbError, PatchIndex};
use ghostcraft::projection::{
    eligible_mask, f_e, f_i, project, recenter_offsets, sample_dropout_mask, OffsetPolicy, ProjectionParams,
};
use ghostcraft::selection::{bcount, bcount_all, make_grid};
use ghostcraft::synth;

const SUITE_SIZE: usize = 20;
const SUITE_SEED: u64 = 100;
const ATTACK_SEED: u64 = 0;
const EPSILONS: [u8; 4] = [8, 16, 24, 32];
const MAX_QUERIES: u64 = 4000;
const RUNTIME_LIMIT_SECS: f64 = 300.0;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Everything the attack criteria share: one harvested database and the
/// fixed-seed target suite.
struct Fixture {
    detector_cfg: MockDetectorConfig,
    db: PatchIndex,
    targets: Vec<EvalTarget>,
}

impl Fixture {
    fn build() -> Self {
        let detector_cfg = MockDetectorConfig::default();
        let corpus: Vec<CorpusImage> = synth::synthetic_corpus(&detector_cfg, 30, 6, 1)
            .into_iter()
            .map(|(id, image, _)| CorpusImage { id, image })
            .collect();
        let detector = MockDetector::new(detector_cfg.clone()).unwrap();
        let db = patchdb::harvest(
            &corpus,
            &detector,
            &HarvestConfig::default(),
            &QueryBudget::new(1000),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .expect("fixture harvest");
        let targets = synth::synthetic_targets(&detector_cfg, SUITE_SIZE, SUITE_SEED)
            .into_iter()
            .map(|(id, img)| EvalTarget::new(id, img))
            .collect();
        Self {
            detector_cfg,
            db,
            targets,
        }
    }

    fn original(&self, id: &str) -> &ImageTensor {
        let t = self.targets.iter().find(|t| t.id == id).expect("known target");
        t.image.as_ref().expect("synthetic targets always load")
    }
}

fn cfg(epsilon: u8) -> AttackConfig {
    AttackConfig {
        epsilon,
        max_queries: MAX_QUERIES,
        seed: ATTACK_SEED,
        ..AttackConfig::default()
    }
}

/// Independent L∞ scan straight over the pixel buffers.
fn pixel_linf(a: &ImageTensor, b: &ImageTensor) -> u8 {
    assert_eq!(a.dims(), b.dims());
    let mut m = 0u8;
    for (x, y) in a.data().iter().zip(b.data()) {
        m = m.max(x.abs_diff(*y));
    }
    m
}

/// Results of every attack run by the suite, kept for the soundness
/// criteria.
#[derive(Default)]
struct Ledger {
    /// (original, adversarial, epsilon, success)
    attacks: Vec<(ImageTensor, ImageTensor, u8, bool)>,
    trace_lens: Vec<(usize, u64)>,
}

impl Ledger {
    fn absorb(&mut self, fx: &Fixture, out: &EvalOutput) {
        for (o, adv) in out.report.outcomes.iter().zip(&out.adversarial) {
            if let (Some(r), Some(adv)) = (&o.result, adv) {
                assert_eq!(r.adv_digest, image_digest(adv));
                self.attacks.push((fx.original(&o.image_id).clone(), adv.clone(), o.epsilon, r.success));
                self.trace_lens.push((r.trace_len, r.queries_used));
            }
        }
    }
}

fn criterion_1_and_2(fx: &Fixture, ledger: &mut Ledger) -> (Check, Check) {
    let detector = MockDetector::new(fx.detector_cfg.clone()).unwrap();
    let started = Instant::now();
    let top = run_eval(&fx.targets, &fx.db, &[cfg(32)], &detector, 0).expect("eval at 32");
    let secs = started.elapsed().as_secs_f64();
    ledger.absorb(fx, &top);
    let rest_cfgs: Vec<AttackConfig> = EPSILONS[..3].iter().map(|&e| cfg(e)).collect();
    let rest = run_eval(&fx.targets, &fx.db, &rest_cfgs, &detector, 0).expect("eval at smaller radii");
    ledger.absorb(fx, &rest);

    let s = &top.report.summaries[0];
    let errors = top.report.summaries[0].errors + rest.report.summaries.iter().map(|s| s.errors).sum::<usize>();
    let c1 = (|| {
        ensure(errors == 0, || format!("{errors} runs errored"))?;
        ensure(s.attempted == SUITE_SIZE, || format!("{} targets attempted", s.attempted))?;
        ensure(s.asr >= 0.8, || format!("ASR(32) = {:.2} < 0.80", s.asr))?;
        ensure(secs <= RUNTIME_LIMIT_SECS, || format!("took {secs:.0} s"))?;
        Ok(format!(
            "ASR(32) = {:.2} ({}/{}), {secs:.0} s, queries mean {:.0} max {}",
            s.asr, s.successes, s.attempted, s.queries.mean, s.queries.max
        ))
    })();

    let mut asrs: Vec<(u8, f64)> = rest.report.summaries.iter().map(|s| (s.epsilon, s.asr)).collect();
    asrs.push((32, s.asr));
    let table = asrs.iter().map(|(e, a)| format!("{e}:{a:.2}")).collect::<Vec<_>>().join(" ");
    let c2 = if asrs.windows(2).all(|w| w[0].1 <= w[1].1) {
        Ok(format!("ASR by epsilon {table}"))
    } else {
        Err(format!("not monotone: {table}"))
    };
    (c1, c2)
}

fn criterion_3(fx: &Fixture, ledger: &mut Ledger) -> Check {
    let strict = MockDetectorConfig {
        min_size_fraction: 0.05,
        ..fx.detector_cfg.clone()
    };
    let detector = MockDetector::new(strict).unwrap();
    let out = run_eval(&fx.targets, &fx.db, &[cfg(32)], &detector, 0).map_err(|e| e.to_string())?;
    ledger.absorb(fx, &out);
    let s = &out.report.summaries[0];
    ensure(s.errors == 0, || format!("{} runs errored", s.errors))?;
    ensure(s.successes == 0, || format!("{} of {} attacks succeeded", s.successes, s.attempted))?;
    let peak = out.report.outcomes.iter().filter_map(|o| o.result.as_ref()).map(|r| r.best_count).max();
    Ok(format!("ASR(32) = 0.00 over {} targets, peak object count {:?}", s.attempted, peak.unwrap_or(0)))
}

fn criterion_4(ledger: &Ledger) -> Check {
    ensure(!ledger.attacks.is_empty(), || "no attacks recorded".into())?;
    let mut successes = 0;
    for (orig, adv, eps, success) in &ledger.attacks {
        let l = pixel_linf(orig, adv);
        ensure(l <= *eps, || format!("L-inf {l} exceeds epsilon {eps} (success = {success})"))?;
        successes += *success as usize;
    }
    Ok(format!(
        "{} results scanned ({successes} successful), all within their epsilon",
        ledger.attacks.len()
    ))
}

struct Counting<'a> {
    inner: &'a MockDetector,
    calls: AtomicU64,
}

impl Oracle for Counting<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(image)
    }
}

fn criterion_5(fx: &Fixture, ledger: &Ledger) -> Check {
    for &(len, used) in &ledger.trace_lens {
        ensure(len as u64 <= MAX_QUERIES, || format!("trace of {len} queries"))?;
        ensure(len as u64 == used, || format!("trace {len} vs {used} charged"))?;
    }

    let inner = MockDetector::new(fx.detector_cfg.clone()).unwrap();
    let counting = Counting {
        inner: &inner,
        calls: AtomicU64::new(0),
    };
    let img = fx.original(&fx.targets[0].id);
    let budget = QueryBudget::new(3);
    for _ in 0..3 {
        detect(&counting, img, &budget, Phase::Baseline).map_err(|e| e.to_string())?;
    }
    for _ in 0..5 {
        let r = detect(&counting, img, &budget, Phase::Projection);
        ensure(matches!(r, Err(OracleError::BudgetExhausted { used: 3, max: 3 })), || format!("got {r:?}"))?;
    }
    let calls = counting.calls.load(Ordering::SeqCst);
    ensure(calls == 3, || format!("{calls} oracle calls for a budget of 3"))?;

    // A tight cap is honored mid-attack too.
    counting.calls.store(0, Ordering::SeqCst);
    let tight = AttackConfig {
        max_queries: 57,
        ..cfg(32)
    };
    let r = run_attack(img, &fx.db, &tight, &counting).map_err(|e| e.to_string())?;
    let calls = counting.calls.load(Ordering::SeqCst);
    ensure(r.trace.len() as u64 <= 57 && calls == r.trace.len() as u64, || {
        format!("trace {} and {calls} calls under a cap of 57", r.trace.len())
    })?;
    ensure(r.budget_exhausted, || "tight attack did not report exhaustion".into())?;
    Ok(format!(
        "{} traces <= {MAX_QUERIES}; exhausted budget raised without calling the oracle",
        ledger.trace_lens.len()
    ))
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut total_boxes = 0;
    for trial in 0..1000 {
        let cell = [8, 16, 32, 64, 80][rng.gen_range(0..5)];
        let (n_w, n_h) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let (w, h) = (cell * n_w, cell * n_h);
        let grid = make_grid(&ImageTensor::filled(h, w, [0; 3]).unwrap(), cell).map_err(|e| e.to_string())?;
        let dets: Vec<Detection> = (0..rng.gen_range(0..60))
            .map(|_| {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                let (x1, y1) = (rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h));
                Detection {
                    bbox: RegionRect::new(x0, y0, x1, y1).unwrap(),
                    label: "obj".into(),
                    score: 0.5,
                }
            })
            .collect();
        total_boxes += dets.len();
        let fast = bcount_all(&dets, &grid);
        let mut sum = 0;
        for j in 0..n_h {
            for i in 0..n_w {
                // Brute force: real-valued center inside the half-open cell.
                let (lx, ly) = ((i * cell) as f64, (j * cell) as f64);
                let brute = dets
                    .iter()
                    .filter(|d| {
                        let cx = (d.bbox.x0 + d.bbox.x1) as f64 / 2.0;
                        let cy = (d.bbox.y0 + d.bbox.y1) as f64 / 2.0;
                        lx <= cx && cx < lx + cell as f64 && ly <= cy && cy < ly + cell as f64
                    })
                    .count();
                let single = bcount(&dets, &grid, i, j).map_err(|e| e.to_string())?;
                ensure(brute == single && brute == fast[j * n_w + i], || {
                    format!("trial {trial} cell ({i},{j}): brute {brute}, bcount {single}, bcount_all {}", fast[j * n_w + i])
                })?;
                sum += brute;
            }
        }
        ensure(sum == dets.len(), || format!("trial {trial}: cells sum to {sum}, {} boxes", dets.len()))?;
    }
    Ok(format!("1000 random grids, {total_boxes} boxes, all cells match and partition"))
}

/// Direct per-position evaluation of one projection step, sharing no code
/// with the library.
fn reference_projection(delta: &[i16], eps: f64, p: &ProjectionParams, seed: u64) -> Vec<i16> {
    let round = |v: f64| v.round().clamp(-255.0, 255.0) as i16;
    let eligible = |v: i16| (v as f64).abs() <= eps;
    let b_e: [f64; 3] = match p.offset {
        OffsetPolicy::Fixed { b_e } => [b_e; 3],
        OffsetPolicy::RecenterPerCell => std::array::from_fn(|c| {
            let vals: Vec<f64> = delta.iter().skip(c).step_by(3).filter(|&&v| eligible(v)).map(|&v| v as f64).collect();
            if vals.is_empty() {
                0.0
            } else {
                -(p.s_e * vals.iter().sum::<f64>()) / vals.len() as f64
            }
        }),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    delta
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if eligible(v) {
                round(p.s_e * v as f64 + b_e[k % 3])
            } else if p.s_i == 0.0 {
                0
            } else if rng.gen_bool(p.dropout_density) {
                round(p.s_i * v as f64)
            } else {
                0
            }
        })
        .collect()
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (100, 334);
    let mut positions = 0;
    for trial in 0..12 {
        let data: Vec<i16> = (0..h * w * 3)
            .map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(-255..=255) })
            .collect();
        let delta = Perturbation::from_raw(h, w, data.clone()).unwrap();
        let eps = rng.gen_range(0..=96) as f64;
        let params = ProjectionParams {
            s_i: if trial % 3 == 0 { 0.0 } else { rng.gen_range(-1.5..1.5) },
            dropout_density: rng.gen_range(0.0..=1.0),
            s_e: rng.gen_range(-1.5..1.5),
            offset: if trial % 2 == 0 {
                OffsetPolicy::RecenterPerCell
            } else {
                OffsetPolicy::Fixed {
                    b_e: rng.gen_range(-20.0..20.0),
                }
            },
            ..Default::default()
        };
        let seed = rng.gen();
        let want = reference_projection(&data, eps, &params, seed);
        let fused = project(&delta, eps, &params, &mut ChaCha8Rng::seed_from_u64(seed));
        ensure(fused.data() == want.as_slice(), || format!("trial {trial}: fused step differs from reference"))?;

        // The same step assembled from the separately exposed terms.
        let m_e = eligible_mask(&delta, eps);
        let b = match params.offset {
            OffsetPolicy::RecenterPerCell => recenter_offsets(&delta, &m_e, params.s_e),
            OffsetPolicy::Fixed { b_e } => [b_e; 3],
        };
        let m_r = if params.s_i == 0.0 {
            PixelMask::filled(h, w, false)
        } else {
            sample_dropout_mask(&delta, &m_e, params.dropout_density, &mut ChaCha8Rng::seed_from_u64(seed))
        };
        let fi = f_i(&delta, params.s_i, &m_r).map_err(|e| e.to_string())?;
        let fe: [Perturbation; 3] = std::array::from_fn(|c| f_e(&delta, params.s_e, b[c]));
        let composed: Vec<i16> = (0..data.len())
            .map(|k| if m_e.data()[k] { fe[k % 3].data()[k] } else { fi.data()[k] })
            .collect();
        ensure(composed == want, || format!("trial {trial}: composed terms differ from reference"))?;

        let identity = project(&delta, eps, &ProjectionParams::identity(), &mut rng);
        ensure(identity == delta, || format!("trial {trial}: identity parameters changed the input"))?;

        let dropout = ProjectionParams { s_i: 0.0, ..params };
        let zeroed = project(&delta, eps, &dropout, &mut rng);
        let leaked = data.iter().zip(zeroed.data()).filter(|(&v, &o)| (v as f64).abs() > eps && o != 0).count();
        ensure(leaked == 0, || format!("trial {trial}: {leaked} ineligible positions survived s_i = 0"))?;
        positions += data.len();
    }
    Ok(format!("{positions} positions over 12 random steps match the reference; identity and s_i = 0 hold"))
}

fn criterion_8(fx: &Fixture, ledger: &mut Ledger) -> Check {
    let bin = env!("CARGO_BIN_EXE_ghostcraft");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| e.to_string())?;
    for t in fx.targets.iter().take(2) {
        save_image(t.image.as_ref().unwrap(), images.join(format!("{}.png", t.id))).map_err(|e| e.to_string())?;
    }
    patchdb::save_index(&fx.db, root.join("db")).map_err(|e| e.to_string())?;

    let run = |tag: &str| -> Result<(), String> {
        let status = Command::new(bin)
            .args(["eval", "--oracle", "mock", "--epsilons", "16,32", "--budget", "4000", "--seed", "7"])
            .arg("--images")
            .arg(&images)
            .arg("--db")
            .arg(root.join("db"))
            .arg("--report")
            .arg(root.join(format!("{tag}.json")))
            .arg("--adv-dir")
            .arg(root.join(format!("adv_{tag}")))
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("eval run {tag} exited with {status}"))
    };
    run("a")?;
    run("b")?;

    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut compared = 0;
    for ext in ["json", "csv", "png"] {
        let (a, b) = (read(&root.join(format!("a.{ext}")))?, read(&root.join(format!("b.{ext}")))?);
        ensure(a == b, || format!("report .{ext} differs between runs"))?;
        compared += 1;
    }
    let mut advs: Vec<_> = std::fs::read_dir(root.join("adv_a"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    advs.sort();
    ensure(advs.len() == 4, || format!("{} adversarial images written", advs.len()))?;
    for name in &advs {
        let (a, b) = (read(&root.join("adv_a").join(name))?, read(&root.join("adv_b").join(name))?);
        ensure(a == b, || format!("{name:?} differs between runs"))?;
        let s = name.to_string_lossy();
        let (eps, id) = s.trim_end_matches(".png").split_once('_').unwrap();
        let adv = load_image(root.join("adv_a").join(name)).map_err(|e| e.to_string())?;
        let report: serde_json::Value = serde_json::from_slice(&read(&root.join("a.json"))?).unwrap();
        let success = report["outcomes"]
            .as_array()
            .unwrap()
            .iter()
            .find(|o| o["image_id"] == format!("{id}.png") && o["epsilon"] == eps.parse::<u64>().unwrap())
            .and_then(|o| o["result"]["success"].as_bool())
            .unwrap_or(false);
        ledger.attacks.push((fx.original(id).clone(), adv, eps.parse().unwrap(), success));
        compared += 1;
    }
    Ok(format!("two CLI eval runs, {compared} output files byte-identical"))
}

fn criterion_9(fx: &Fixture) -> Check {
    let cfg = HarvestConfig::default();
    ensure(cfg.augmentations.len() == 2, || "default harvest does not use 2 augmentations".into())?;
    let inner = MockDetector::new(fx.detector_cfg.clone()).unwrap();
    let counting = Counting {
        inner: &inner,
        calls: AtomicU64::new(0),
    };
    let budget = QueryBudget::new(10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut records = 0;
    // 500 full-size images do not fit in memory at once; harvest them in
    // chunks against one shared budget.
    for chunk in 0..10u64 {
        let corpus: Vec<CorpusImage> = synth::synthetic_corpus(&fx.detector_cfg, 50, 4, 1000 + chunk)
            .into_iter()
            .map(|(id, image, _)| CorpusImage {
                id: format!("c{chunk}_{id}"),
                image,
            })
            .collect();
        match patchdb::harvest(&corpus, &counting, &cfg, &budget, &mut rng) {
            Ok(idx) => records += idx.len(),
            Err(PatchDbError::EmptyHarvest) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    let calls = counting.calls.load(Ordering::SeqCst);
    ensure(budget.used() == 1500, || format!("{} queries charged", budget.used()))?;
    ensure(budget.tally(Phase::Harvest) == 1500, || "harvest tally is not 1500".into())?;
    ensure(calls == 1500, || format!("{calls} oracle calls"))?;

    let pricing = PricingModel::default();
    let c500 = estimate_cost_for_queries(500, &pricing).map_err(|e| e.to_string())?;
    ensure(c500.api_cost == 0.75, || format!("500 queries cost ${}", c500.api_cost))?;
    let c0 = estimate_cost_for_queries(0, &pricing).map_err(|e| e.to_string())?;
    ensure(c0.api_cost == 0.0 && c0.gpu_cost == 0.0, || "zero queries are not free".into())?;
    Ok(format!("500 images x 3 variants = {calls} queries, {records} records; 500 queries = $0.75"))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let started = Instant::now();
    let fx = Fixture::build();
    let mut ledger = Ledger::default();

    let mut results: Vec<(u8, &str, Check)> = Vec::new();
    let (c1, c2) = catch_unwind(AssertUnwindSafe(|| criterion_1_and_2(&fx, &mut ledger)))
        .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    results.push((1, "mock end-to-end ASR", c1));
    results.push((2, "monotonicity in epsilon", c2));
    results.push((3, "min-size kill switch", guarded(|| criterion_3(&fx, &mut ledger))));
    results.push((6, "bcount partition", guarded(criterion_6)));
    results.push((7, "projection algebra", guarded(criterion_7)));
    results.push((8, "determinism", guarded(|| criterion_8(&fx, &mut ledger))));
    results.push((9, "harvest accounting", guarded(|| criterion_9(&fx))));
    // Soundness criteria last, so they cover every attack run above.
    results.push((4, "constraint soundness", guarded(|| criterion_4(&ledger))));
    results.push((5, "budget soundness", guarded(|| criterion_5(&fx, &ledger))));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {id} [{name}]: PASS - {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} [{name}]: FAIL - {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
