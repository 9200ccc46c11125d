use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ghostcraft::attack::{run_attack, AttackConfig, AttackError};
use ghostcraft::harness::{
    asr_table_csv, estimate_cost, list_images, load_targets, render_asr_plot, run_eval, EvalReport, PricingModel,
};
use ghostcraft::imagecore::{load_image, resize_bilinear, save_image, ColorTransform};
use ghostcraft::oracle::{HttpOracle, MockDetector, MockDetectorConfig, MockServer, Oracle, OracleError, QueryBudget, ServerOptions};
use ghostcraft::patchdb::{self, HarvestConfig, PatchDbError};
use ghostcraft::synth::{self, WORKING_SIZE};
use ghostcraft::trace::write_jsonl;

const EXIT_USAGE: u8 = 1;
const EXIT_UNREACHABLE: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(name = "ghostcraft", version, about = "Ghost-object latency attacks against black-box detectors")]
struct Cli {
    /// Attack configuration JSON whose field names mirror AttackConfig.
    /// For `serve-mock` it is the detector configuration instead.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Detector configuration JSON used when the oracle is `mock`.
    #[arg(long, global = true)]
    mock_config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Query a corpus and store every recognized object.
    Harvest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        oracle: String,
        #[arg(long, value_delimiter = ',', default_value = "jitter,equalize")]
        augment: Vec<ColorTransform>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attack one image.
    Attack {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        oracle: String,
        #[arg(long)]
        epsilon: Option<u8>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Attack a directory of images at several radii and write a report.
    Eval {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        oracle: String,
        #[arg(long, value_delimiter = ',', default_value = "8,16,24,32")]
        epsilons: Vec<u8>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
        /// ASR table; defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// ASR bar plot; defaults to the report path with a .png extension.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Directory for adversarial images, named `<eps>_<image id>.png`.
        #[arg(long)]
        adv_dir: Option<PathBuf>,
        /// 0 means one worker per core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Re-query stored probes and report whether the oracle changed.
    Drift {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        oracle: String,
        #[arg(long, default_value_t = patchdb::DEFAULT_DRIFT_THRESHOLD)]
        threshold: f64,
    },
    /// Price the queries recorded in an eval report.
    Cost {
        #[arg(long)]
        report: PathBuf,
        #[arg(long = "per-1k", default_value_t = 1.5)]
        per_1k: f64,
        #[arg(long, default_value_t = 2.48)]
        gpu_hour: f64,
        #[arg(long, default_value_t = PricingModel::default().seconds_per_query)]
        seconds_per_query: f64,
        #[arg(long, default_value_t = PricingModel::default().gpu_setup_hours)]
        setup_hours: f64,
    },
    /// Serve the mock detector over the wire protocol until killed.
    ServeMock {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        rate_limit: Option<f64>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Write synthetic corpus or target images for the mock detector.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SynthKind::Targets)]
        kind: SynthKind,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Objects per corpus image.
        #[arg(long, default_value_t = 6)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Corpus,
    Targets,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        let unreachable = cause.downcast_ref::<OracleError>().map(OracleError::is_unreachable)
            .or_else(|| cause.downcast_ref::<AttackError>().map(AttackError::is_unreachable))
            .or_else(|| match cause.downcast_ref::<PatchDbError>() {
                Some(PatchDbError::Oracle(o)) => Some(o.is_unreachable()),
                _ => None,
            });
        if unreachable == Some(true) {
            return EXIT_UNREACHABLE;
        }
    }
    EXIT_USAGE
}

fn mock_config(path: Option<&Path>) -> anyhow::Result<MockDetectorConfig> {
    let Some(path) = path else {
        return Ok(MockDetectorConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn oracle(endpoint: &str, mock: Option<&Path>) -> anyhow::Result<Box<dyn Oracle>> {
    if endpoint == "mock" {
        return Ok(Box::new(MockDetector::new(mock_config(mock)?)?));
    }
    Ok(Box::new(HttpOracle::connect(endpoint)?))
}

fn attack_config(cli_config: Option<&Path>) -> anyhow::Result<AttackConfig> {
    let Some(path) = cli_config else {
        return Ok(AttackConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let mock = cli.mock_config.as_deref();
    match cli.cmd {
        Cmd::Harvest {
            corpus,
            oracle: endpoint,
            augment,
            out,
            budget,
            seed,
        } => {
            let paths = list_images(&corpus)?;
            if paths.is_empty() {
                bail!("no png or jpeg images in {}", corpus.display());
            }
            let items = patchdb::load_corpus(&paths, Some((WORKING_SIZE, WORKING_SIZE)))?;
            let o = oracle(&endpoint, mock)?;
            let cfg = HarvestConfig {
                augmentations: augment,
                ..Default::default()
            };
            let budget = QueryBudget::new(budget);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (index, code) = match patchdb::harvest(&items, &o, &cfg, &budget, &mut rng) {
                Ok(index) => (index, 0),
                Err(PatchDbError::BudgetExhausted { partial }) => {
                    eprintln!("budget exhausted; saving partial index");
                    (*partial, EXIT_BUDGET)
                }
                Err(e) => return Err(e.into()),
            };
            patchdb::save_index(&index, &out)?;
            println!(
                "{} records from {} images, {} queries -> {}",
                index.len(),
                items.len(),
                budget.used(),
                out.display()
            );
            Ok(code)
        }
        Cmd::Attack {
            image,
            db,
            oracle: endpoint,
            epsilon,
            budget,
            seed,
            out,
            trace,
        } => {
            let mut cfg = attack_config(cli.config.as_deref())?;
            cfg.epsilon = epsilon.unwrap_or(cfg.epsilon);
            cfg.max_queries = budget.unwrap_or(cfg.max_queries);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let mut x = load_image(&image)?;
            if x.dims() != (WORKING_SIZE, WORKING_SIZE) {
                x = resize_bilinear(&x, WORKING_SIZE, WORKING_SIZE)?;
            }
            let index = patchdb::load_index(&db)?;
            let o = oracle(&endpoint, mock)?;
            let result = match run_attack(&x, &index, &cfg, &o) {
                Ok(r) => r,
                Err(AttackError::Oracle(OracleError::BudgetExhausted { .. })) => {
                    eprintln!("budget exhausted before any result");
                    return Ok(EXIT_BUDGET);
                }
                Err(e) => return Err(e.into()),
            };
            save_image(&result.adv_image, &out)?;
            if let Some(path) = trace {
                let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_jsonl(&result.trace, std::io::BufWriter::new(file))?;
            }
            print_json(&serde_json::json!({
                "success": result.success,
                "baseline_count": result.baseline_count,
                "best_count": result.best_count,
                "increment": result.increment,
                "linf": result.linf,
                "queries_used": result.queries_used,
                "budget_exhausted": result.budget_exhausted,
                "wall_time": result.wall_time,
            }))?;
            Ok(if result.budget_exhausted && !result.success { EXIT_BUDGET } else { 0 })
        }
        Cmd::Eval {
            images,
            db,
            oracle: endpoint,
            epsilons,
            budget,
            seed,
            report,
            csv,
            plot,
            adv_dir,
            workers,
        } => {
            let base = attack_config(cli.config.as_deref())?;
            let cfgs: Vec<AttackConfig> = epsilons
                .iter()
                .map(|&epsilon| AttackConfig {
                    epsilon,
                    max_queries: budget.unwrap_or(base.max_queries),
                    seed: seed.unwrap_or(base.seed),
                    ..base.clone()
                })
                .collect();
            let paths = list_images(&images)?;
            let targets = load_targets(&paths, Some((WORKING_SIZE, WORKING_SIZE)));
            let index = patchdb::load_index(&db)?;
            let o = oracle(&endpoint, mock)?;
            let output = run_eval(&targets, &index, &cfgs, &o, workers)?;
            let r = &output.report;
            r.save(&report)?;
            write_file(&csv.unwrap_or_else(|| report.with_extension("csv")), asr_table_csv(std::slice::from_ref(r)).as_bytes())?;
            save_image(&render_asr_plot(std::slice::from_ref(r)), plot.unwrap_or_else(|| report.with_extension("png")))?;
            if let Some(dir) = adv_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for (o, adv) in r.outcomes.iter().zip(&output.adversarial) {
                    if let Some(img) = adv {
                        let stem = Path::new(&o.image_id).file_stem().unwrap_or_default().to_string_lossy();
                        save_image(img, dir.join(format!("{}_{stem}.png", o.epsilon)))?;
                    }
                }
            }
            for s in &r.summaries {
                println!(
                    "eps {:>3}: ASR {:.2} ({}/{}, {} errors), queries mean {:.1} max {}",
                    s.epsilon, s.asr, s.successes, s.attempted, s.errors, s.queries.mean, s.queries.max
                );
            }
            let unreachable = r.outcomes.iter().any(|o| o.error.as_ref().is_some_and(|e| e.unreachable));
            Ok(if unreachable { EXIT_UNREACHABLE } else { 0 })
        }
        Cmd::Drift { db, oracle: endpoint, threshold } => {
            let index = patchdb::load_index(&db)?;
            let o = oracle(&endpoint, mock)?;
            let budget = QueryBudget::new(index.oracle_fingerprints.len() as u64);
            let report = patchdb::probe_drift(&index, &o, &budget, threshold)?;
            print_json(&report)?;
            Ok(0)
        }
        Cmd::Cost {
            report,
            per_1k,
            gpu_hour,
            seconds_per_query,
            setup_hours,
        } => {
            let r = EvalReport::load(&report)?;
            let pricing = PricingModel {
                per_1k_queries: per_1k,
                gpu_hour,
                seconds_per_query,
                gpu_setup_hours: setup_hours,
            };
            print_json(&estimate_cost(&r, &pricing)?)?;
            Ok(0)
        }
        Cmd::ServeMock {
            port,
            host,
            rate_limit,
            workers,
        } => {
            let detector = MockDetector::new(mock_config(cli.config.as_deref().or(mock))?)?;
            let opts = ServerOptions {
                rate_limit_per_sec: rate_limit,
                workers,
                ..Default::default()
            };
            let server = MockServer::start(&format!("{host}:{port}"), detector, opts)?;
            println!("{}", server.url());
            std::io::stdout().flush()?;
            server.join();
            Ok(0)
        }
        Cmd::Synth {
            out,
            kind,
            count,
            objects,
            seed,
        } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let cfg = mock_config(mock)?;
            let images: Vec<(String, _)> = match kind {
                SynthKind::Corpus => synth::synthetic_corpus(&cfg, count, objects, seed)
                    .into_iter()
                    .map(|(id, img, _)| (id, img))
                    .collect(),
                SynthKind::Targets => synth::synthetic_targets(&cfg, count, seed),
            };
            for (id, img) in &images {
                save_image(img, out.join(format!("{id}.png")))?;
            }
            println!("{} images -> {}", images.len(), out.display());
            Ok(0)
        }
    }
}
