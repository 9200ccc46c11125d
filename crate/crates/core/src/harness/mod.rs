//! Batch evaluation: one attack per (target, config) pair, aggregated into
//! a deterministic report, plus table, plot and cost outputs.

mod cost;
mod plot;

pub use cost::{estimate_cost, estimate_cost_for_queries, CostBreakdown, CostPath, PricingModel};
pub use plot::{asr_table_csv, render_asr_plot};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{run_attack, AttackConfig, AttackError};
use crate::imagecore::{load_image, resize_bilinear, ImageError, ImageTensor};
use crate::oracle::Oracle;
use crate::patchdb::PatchIndex;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no target images")]
    NoImages,
    #[error("no attack configurations")]
    NoConfigs,
    #[error(transparent)]
    Config(#[from] AttackError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("malformed report: {0}")]
    Format(String),
}

/// A target to attack. Load failures are carried along so they show up in
/// the report instead of aborting the batch.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub id: String,
    pub image: Result<ImageTensor, String>,
}

impl EvalTarget {
    pub fn new(id: impl Into<String>, image: ImageTensor) -> Self {
        Self {
            id: id.into(),
            image: Ok(image),
        }
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let io = |source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads each path as a target whose id is the file name, resizing to
/// `size` when the dimensions differ.
pub fn load_targets(paths: &[PathBuf], size: Option<(usize, usize)>) -> Vec<EvalTarget> {
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            let image = load_image(p)
                .and_then(|img| match size {
                    Some((h, w)) if img.dims() != (h, w) => resize_bilinear(&img, h, w),
                    _ => Ok(img),
                })
                .map_err(|e| e.to_string());
            EvalTarget { id, image }
        })
        .collect()
}

/// First eight bytes of SHA-256, so per-target seeds survive reordering and
/// additions to the target set.
pub fn stable_hash(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn image_digest(img: &ImageTensor) -> String {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    h.update(img.data());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub baseline_count: usize,
    pub best_count: usize,
    pub increment: i64,
    pub linf: u8,
    pub queries_used: u64,
    pub trace_len: usize,
    pub rounds: usize,
    pub success: bool,
    pub budget_exhausted: bool,
    /// SHA-256 of the adversarial image's dimensions and pixels.
    pub adv_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeError {
    pub message: String,
    pub unreachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: String,
    pub config_index: usize,
    pub epsilon: u8,
    pub seed: u64,
    pub result: Option<AttackSummary>,
    pub error: Option<OutcomeError>,
}

impl ImageOutcome {
    pub fn succeeded(&self) -> bool {
        self.result.as_ref().is_some_and(|r| r.success)
    }

    pub fn queries_used(&self) -> u64 {
        self.result.as_ref().map_or(0, |r| r.queries_used)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub mean: f64,
    pub median: f64,
    pub max: u64,
}

impl QueryStats {
    pub fn of(values: &[u64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, median: 0.0, max: 0 };
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        };
        Self {
            mean: v.iter().sum::<u64>() as f64 / n as f64,
            median,
            max: v[n - 1],
        }
    }
}

/// Aggregate over all targets for one attack configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config_index: usize,
    pub epsilon: u8,
    pub attempted: usize,
    pub successes: usize,
    /// Runs that produced no result. They count as failures in `asr`.
    pub errors: usize,
    pub asr: f64,
    /// Over runs that produced a result.
    pub queries: QueryStats,
}

/// Everything `run_eval` learned. Contains no timestamps or wall times, so
/// identical inputs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oracle_id: String,
    pub config_digest: String,
    pub configs: Vec<AttackConfig>,
    pub total_queries: u64,
    pub summaries: Vec<ConfigSummary>,
    /// Target-major, config-minor, in input order.
    pub outcomes: Vec<ImageOutcome>,
}

impl EvalReport {
    /// ASR of the first configuration with radius `epsilon`.
    pub fn asr(&self, epsilon: u8) -> Option<f64> {
        self.summaries.iter().find(|s| s.epsilon == epsilon).map(|s| s.asr)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, HarnessError> {
        serde_json::from_slice(bytes).map_err(|e| HarnessError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json()).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&bytes)
    }
}

/// Successes over total attempts. `total` must be positive.
pub fn asr(successes: usize, total: usize) -> f64 {
    assert!(total > 0, "ASR over an empty set is undefined");
    successes as f64 / total as f64
}

/// A report together with the adversarial images, aligned with
/// `report.outcomes`.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub adversarial: Vec<Option<ImageTensor>>,
}

/// Attacks every target under every configuration, each run with its own
/// fresh budget of `cfg.max_queries` and seed `cfg.seed ^ stable_hash(id)`.
///
/// `workers` bounds image-level parallelism; 0 uses one worker per core.
/// Results are ordered by input, never by completion.
pub fn run_eval<O: Oracle + ?Sized>(
    targets: &[EvalTarget],
    db: &PatchIndex,
    cfgs: &[AttackConfig],
    oracle: &O,
    workers: usize,
) -> Result<EvalOutput, HarnessError> {
    if targets.is_empty() {
        return Err(HarnessError::NoImages);
    }
    if cfgs.is_empty() {
        return Err(HarnessError::NoConfigs);
    }
    for cfg in cfgs {
        cfg.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;

    let jobs: Vec<(&EvalTarget, usize)> = targets
        .iter()
        .flat_map(|t| (0..cfgs.len()).map(move |c| (t, c)))
        .collect();
    let runs: Vec<(ImageOutcome, Option<ImageTensor>)> =
        pool.install(|| jobs.par_iter().map(|&(t, c)| run_one(t, c, &cfgs[c], db, oracle)).collect());
    let (outcomes, adversarial): (Vec<_>, Vec<_>) = runs.into_iter().unzip();

    let summaries = cfgs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let mine: Vec<&ImageOutcome> = outcomes.iter().filter(|o| o.config_index == c).collect();
            let used: Vec<u64> = mine.iter().filter_map(|o| o.result.as_ref()).map(|r| r.queries_used).collect();
            let successes = mine.iter().filter(|o| o.succeeded()).count();
            ConfigSummary {
                config_index: c,
                epsilon: cfg.epsilon,
                attempted: mine.len(),
                successes,
                errors: mine.iter().filter(|o| o.error.is_some()).count(),
                asr: asr(successes, mine.len()),
                queries: QueryStats::of(&used),
            }
        })
        .collect();

    let report = EvalReport {
        oracle_id: oracle.id(),
        config_digest: config_digest(cfgs),
        configs: cfgs.to_vec(),
        total_queries: outcomes.iter().map(|o| o.queries_used()).sum(),
        summaries,
        outcomes,
    };
    Ok(EvalOutput { report, adversarial })
}

fn run_one<O: Oracle + ?Sized>(
    target: &EvalTarget,
    config_index: usize,
    cfg: &AttackConfig,
    db: &PatchIndex,
    oracle: &O,
) -> (ImageOutcome, Option<ImageTensor>) {
    let seed = cfg.seed ^ stable_hash(&target.id);
    let mut outcome = ImageOutcome {
        image_id: target.id.clone(),
        config_index,
        epsilon: cfg.epsilon,
        seed,
        result: None,
        error: None,
    };
    let image = match &target.image {
        Ok(img) => img,
        Err(message) => {
            outcome.error = Some(OutcomeError {
                message: message.clone(),
                unreachable: false,
            });
            return (outcome, None);
        }
    };
    let run_cfg = AttackConfig { seed, ..cfg.clone() };
    match run_attack(image, db, &run_cfg, oracle) {
        Ok(r) => {
            outcome.result = Some(AttackSummary {
                baseline_count: r.baseline_count,
                best_count: r.best_count,
                increment: r.increment,
                linf: r.linf,
                queries_used: r.queries_used,
                trace_len: r.trace.len(),
                rounds: r.rounds,
                success: r.success,
                budget_exhausted: r.budget_exhausted,
                adv_digest: image_digest(&r.adv_image),
            });
            (outcome, Some(r.adv_image))
        }
        Err(e) => {
            log::warn!("attack on {} (config {config_index}) failed: {e}", target.id);
            outcome.error = Some(OutcomeError {
                unreachable: e.is_unreachable(),
                message: e.to_string(),
            });
            (outcome, None)
        }
    }
}

fn config_digest(cfgs: &[AttackConfig]) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfgs).expect("configs serialize")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RegionRect;
    use crate::oracle::{Detection, OracleError};
    use crate::patchdb::test_support::{index_of, record_with_mean};
    use crate::projection::ProjectionParams;
    use crate::selection::SelectionConfig;

    #[test]
    fn asr_examples() {
        assert_eq!(asr(81, 100), 0.81);
        assert_eq!(asr(0, 100), 0.0);
        assert_eq!(asr(20, 20), 1.0);
    }

    #[test]
    #[should_panic]
    fn asr_of_nothing_panics() {
        asr(0, 0);
    }

    #[test]
    fn query_stats() {
        let s = QueryStats::of(&[5, 1, 3, 10]);
        assert_eq!((s.mean, s.median, s.max), (4.75, 4.0, 10));
        assert_eq!(QueryStats::of(&[7]).median, 7.0);
        assert_eq!(QueryStats::of(&[]).max, 0);
    }

    #[test]
    fn stable_hash_is_fixed() {
        assert_eq!(stable_hash("a.png"), stable_hash("a.png"));
        assert_ne!(stable_hash("a.png"), stable_hash("b.png"));
    }

    /// Reports one more object per distinct mean intensity bucket, so
    /// attacks can move the count without a real detector.
    struct Brightness;

    impl Oracle for Brightness {
        fn id(&self) -> String {
            "brightness".into()
        }
        fn forward(&self, img: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
            let mean = img.data().iter().map(|&v| v as u64).sum::<u64>() / img.data().len() as u64;
            Ok((0..(mean / 8) as usize)
                .map(|i| Detection {
                    bbox: RegionRect::new(i % 60, 0, i % 60 + 4, 4).unwrap(),
                    label: "blob".into(),
                    score: 0.9,
                })
                .collect())
        }
    }

    fn cheap(epsilon: u8) -> AttackConfig {
        AttackConfig {
            epsilon,
            selection: SelectionConfig { k: 2, ..Default::default() },
            projection: ProjectionParams { k_a: 2, ..Default::default() },
            seed: 9,
            ..Default::default()
        }
    }

    fn targets() -> Vec<EvalTarget> {
        vec![
            EvalTarget::new("dark.png", ImageTensor::filled(128, 128, [40; 3]).unwrap()),
            EvalTarget {
                id: "broken.png".into(),
                image: Err("decode error".into()),
            },
            EvalTarget::new("mid.png", ImageTensor::filled(128, 128, [120; 3]).unwrap()),
        ]
    }

    #[test]
    fn report_is_ordered_complete_and_reproducible() {
        let db = index_of(vec![record_with_mean([250, 250, 250], 0.9, 1)]);
        let cfgs = [cheap(8), cheap(32)];
        let a = run_eval(&targets(), &db, &cfgs, &Brightness, 2).unwrap();
        let b = run_eval(&targets(), &db, &cfgs, &Brightness, 1).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());

        let r = &a.report;
        assert_eq!(r.outcomes.len(), 6);
        let order: Vec<(&str, u8)> = r.outcomes.iter().map(|o| (o.image_id.as_str(), o.epsilon)).collect();
        assert_eq!(
            order,
            [("dark.png", 8), ("dark.png", 32), ("broken.png", 8), ("broken.png", 32), ("mid.png", 8), ("mid.png", 32)]
        );
        assert!(r.outcomes[2].error.is_some() && r.outcomes[2].result.is_none());
        assert!(a.adversarial[2].is_none());
        assert_eq!(
            r.total_queries,
            r.outcomes.iter().filter_map(|o| o.result.as_ref()).map(|s| s.trace_len as u64).sum::<u64>()
        );
        for s in &r.summaries {
            assert_eq!((s.attempted, s.errors), (3, 1));
            assert_eq!(s.asr, s.successes as f64 / 3.0);
        }
        for (o, adv) in r.outcomes.iter().zip(&a.adversarial) {
            if let (Some(res), Some(img)) = (&o.result, adv) {
                assert_eq!(res.adv_digest, image_digest(img));
            }
        }
        assert_eq!(r, &EvalReport::from_json(&r.to_json()).unwrap());
    }

    #[test]
    fn seeds_depend_on_id_not_position() {
        let db = index_of(vec![record_with_mean([250, 250, 250], 0.9, 1)]);
        let cfgs = [cheap(16)];
        let all = run_eval(&targets(), &db, &cfgs, &Brightness, 1).unwrap().report;
        let last = run_eval(&targets()[2..], &db, &cfgs, &Brightness, 1).unwrap().report;
        assert_eq!(all.outcomes[2], last.outcomes[0]);
        assert_eq!(all.outcomes[2].seed, 9 ^ stable_hash("mid.png"));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let db = index_of(vec![record_with_mean([250, 250, 250], 0.9, 1)]);
        assert!(matches!(run_eval(&[], &db, &[cheap(8)], &Brightness, 1), Err(HarnessError::NoImages)));
        assert!(matches!(run_eval(&targets(), &db, &[], &Brightness, 1), Err(HarnessError::NoConfigs)));
        let bad = AttackConfig { epsilon: 0, ..cheap(8) };
        assert!(matches!(run_eval(&targets(), &db, &[bad], &Brightness, 1), Err(HarnessError::Config(_))));
    }

    #[test]
    fn unreachable_oracle_is_flagged_per_image() {
        struct Down;
        impl Oracle for Down {
            fn id(&self) -> String {
                "down".into()
            }
            fn forward(&self, _: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
                Err(OracleError::Transport("connection refused".into()))
            }
        }
        let db = index_of(vec![record_with_mean([250, 250, 250], 0.9, 1)]);
        let r = run_eval(&targets(), &db, &[cheap(8)], &Down, 1).unwrap().report;
        assert!(r.outcomes[0].error.as_ref().unwrap().unreachable);
        assert!(!r.outcomes[1].error.as_ref().unwrap().unreachable);
        assert_eq!(r.summaries[0].asr, 0.0);
    }
}
