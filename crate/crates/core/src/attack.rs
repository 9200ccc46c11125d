//! One attack on one target: baseline, selection, color manipulation,
//! election of the best in-ball iterate, and the success verdict.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{linf_distance, ImageError, ImageTensor};
use crate::oracle::{detect, Oracle, OracleError, Phase, QueryBudget};
use crate::patchdb::{PatchDbError, PatchIndex};
use crate::projection::{color_manipulate, ProjectionError, ProjectionParams, ToleranceSchedule};
use crate::selection::{position_centric_select, SelectionConfig, SelectionError};
use crate::trace::{Checkpoint, QueryRecord};

pub const DEFAULT_MAX_QUERIES: u64 = 4000;
pub const DEFAULT_SUCCESS_INCREMENT: usize = 20;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("patch database is empty")]
    EmptyDb,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl AttackError {
    pub fn is_unreachable(&self) -> bool {
        match self {
            AttackError::Oracle(e)
            | AttackError::Selection(SelectionError::Oracle(e))
            | AttackError::Projection(ProjectionError::Oracle(e))
            | AttackError::Projection(ProjectionError::Selection(SelectionError::Oracle(e))) => e.is_unreachable(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: u8,
    pub max_queries: u64,
    /// Success needs strictly more new objects than this.
    pub success_increment: usize,
    pub selection: SelectionConfig,
    pub projection: ProjectionParams,
    pub schedule: ToleranceSchedule,
    pub seed: u64,
    /// Full selection and manipulation passes attempted while the budget
    /// allows and no pass has succeeded.
    pub max_rounds: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 32,
            max_queries: DEFAULT_MAX_QUERIES,
            success_increment: DEFAULT_SUCCESS_INCREMENT,
            selection: SelectionConfig::default(),
            projection: ProjectionParams::default(),
            schedule: ToleranceSchedule::default(),
            seed: 0,
            max_rounds: 1,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: u8) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.epsilon == 0 {
            return Err(AttackError::InvalidConfig("epsilon must be positive".into()));
        }
        if self.max_queries < self.selection.k as u64 + 1 {
            return Err(AttackError::InvalidConfig(format!(
                "max_queries {} cannot cover the baseline and {} selection trials",
                self.max_queries, self.selection.k
            )));
        }
        if self.max_rounds == 0 {
            return Err(AttackError::InvalidConfig("max_rounds must be at least 1".into()));
        }
        self.selection.validate()?;
        self.projection.validate()?;
        Ok(())
    }

    /// Upper bound on the queries one round can spend.
    pub fn round_cost(&self) -> u64 {
        let stages = self.schedule.stages().len() as u64;
        let retries = (stages.saturating_sub(1)) * self.projection.max_stage_retries as u64;
        self.selection.k as u64 + (stages + retries) * self.projection.k_a as u64 + 1
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adv_image: ImageTensor,
    pub baseline_count: usize,
    pub best_count: usize,
    /// `best_count − baseline_count`.
    pub increment: i64,
    pub linf: u8,
    pub queries_used: u64,
    pub success: bool,
    /// The budget ran out before the attack finished.
    pub budget_exhausted: bool,
    pub rounds: usize,
    pub trace: Vec<QueryRecord>,
    pub wall_time: f64,
}

/// Strictly more than `success_increment` new objects, inside the ball.
pub fn is_success(result: &AttackResult, original: &ImageTensor, cfg: &AttackConfig) -> bool {
    result.increment > cfg.success_increment as i64
        && linf_distance(&result.adv_image, original).is_ok_and(|l| l <= cfg.epsilon)
}

/// Attacks `x` with a fresh budget of `cfg.max_queries`.
pub fn run_attack<O: Oracle + ?Sized>(
    x: &ImageTensor,
    db: &PatchIndex,
    cfg: &AttackConfig,
    oracle: &O,
) -> Result<AttackResult, AttackError> {
    let budget = QueryBudget::new(cfg.max_queries);
    run_attack_with_budget(x, db, cfg, oracle, &budget)
}

/// Attacks `x`, charging every query to `budget`.
///
/// The returned image is the queried iterate with the most objects among
/// those within ε of `x`; the clean image itself is one of them.
pub fn run_attack_with_budget<O: Oracle + ?Sized>(
    x: &ImageTensor,
    db: &PatchIndex,
    cfg: &AttackConfig,
    oracle: &O,
    budget: &QueryBudget,
) -> Result<AttackResult, AttackError> {
    let started = Instant::now();
    cfg.validate()?;
    if db.is_empty() {
        return Err(AttackError::EmptyDb);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start_used = budget.used();

    let baseline = detect(oracle, x, budget, Phase::Baseline)?;
    let baseline_count = baseline.len();
    let mut trace = vec![QueryRecord::new(&baseline, Phase::Baseline, 0, None)];
    let mut best = Checkpoint {
        image: x.clone(),
        object_count: baseline_count,
        d: 0.0,
        queries_at: baseline.query_index,
    };
    let target = baseline_count + cfg.success_increment;
    let mut exhausted = false;
    let mut rounds = 0;

    while rounds < cfg.max_rounds && best.object_count <= target {
        if rounds > 0 && budget.remaining() < cfg.round_cost() {
            break;
        }
        rounds += 1;
        let selected = match position_centric_select(x, &cfg.selection, db, oracle, budget, cfg.epsilon, &mut rng) {
            Ok(s) => s,
            Err(e) if e.is_budget_exhausted() => {
                exhausted = true;
                break;
            }
            Err(SelectionError::PatchDb(PatchDbError::NoCandidates { .. })) => return Err(AttackError::EmptyDb),
            Err(e) => return Err(e.into()),
        };
        trace.extend(selected.trials.iter().map(|t| t.query.clone()));
        promote(&mut best, selected.in_ball_best);

        let manipulated = color_manipulate(
            x,
            &selected.x_init,
            cfg.epsilon,
            &cfg.schedule,
            &cfg.projection,
            &cfg.selection,
            db,
            oracle,
            budget,
            &mut rng,
        )?;
        trace.extend(manipulated.trace.iter().cloned());
        promote(&mut best, manipulated.best);
        if manipulated.exhausted {
            exhausted = true;
            break;
        }

        // The final clamped output has not been queried yet.
        let linf = linf_distance(&manipulated.x_out, x)?;
        match detect(oracle, &manipulated.x_out, budget, Phase::Final) {
            Ok(set) => {
                trace.push(QueryRecord::new(&set, Phase::Final, linf, Some(1.0)));
                if linf <= cfg.epsilon {
                    promote(
                        &mut best,
                        Some(Checkpoint {
                            image: manipulated.x_out,
                            object_count: set.len(),
                            d: 1.0,
                            queries_at: set.query_index,
                        }),
                    );
                }
            }
            Err(OracleError::BudgetExhausted { .. }) => {
                exhausted = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }

    let linf = linf_distance(&best.image, x)?;
    let increment = best.object_count as i64 - baseline_count as i64;
    let mut result = AttackResult {
        baseline_count,
        best_count: best.object_count,
        increment,
        linf,
        adv_image: best.image,
        queries_used: budget.used() - start_used,
        success: false,
        budget_exhausted: exhausted,
        rounds,
        trace,
        wall_time: started.elapsed().as_secs_f64(),
    };
    result.success = is_success(&result, x, cfg);
    Ok(result)
}

fn promote(best: &mut Checkpoint, candidate: Option<Checkpoint>) {
    if let Some(c) = candidate {
        if c.object_count > best.object_count {
            *best = c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RegionRect;
    use crate::oracle::Detection;
    use crate::patchdb::test_support::{index_of, record_with_mean};

    struct Constant;

    impl Oracle for Constant {
        fn id(&self) -> String {
            "constant".into()
        }
        fn forward(&self, _: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
            Ok(vec![Detection {
                bbox: RegionRect::new(0, 0, 10, 10).unwrap(),
                label: "obj".into(),
                score: 0.9,
            }])
        }
    }

    fn cheap_cfg(epsilon: u8) -> AttackConfig {
        AttackConfig {
            epsilon,
            projection: ProjectionParams { k_a: 3, ..Default::default() },
            selection: SelectionConfig { k: 2, ..Default::default() },
            ..Default::default()
        }
    }

    fn result_with(increment: i64, adv: ImageTensor) -> AttackResult {
        AttackResult {
            adv_image: adv,
            baseline_count: 0,
            best_count: increment.max(0) as usize,
            increment,
            linf: 0,
            queries_used: 0,
            success: false,
            budget_exhausted: false,
            rounds: 1,
            trace: vec![],
            wall_time: 0.0,
        }
    }

    #[test]
    fn success_predicate() {
        let x = ImageTensor::filled(4, 4, [100; 3]).unwrap();
        let cfg = AttackConfig::with_epsilon(32);
        assert!(is_success(&result_with(21, x.clone()), &x, &cfg));
        assert!(!is_success(&result_with(20, x.clone()), &x, &cfg));
        let far = ImageTensor::filled(4, 4, [133; 3]).unwrap();
        assert!(!is_success(&result_with(50, far), &x, &cfg));
        let edge = ImageTensor::filled(4, 4, [132; 3]).unwrap();
        assert!(is_success(&result_with(50, edge), &x, &cfg));
    }

    #[test]
    fn unattackable_oracle_fails_cleanly() {
        let x = ImageTensor::filled(128, 128, [90; 3]).unwrap();
        let db = index_of(vec![record_with_mean([90, 90, 90], 0.9, 1)]);
        let cfg = cheap_cfg(16);
        let r = run_attack(&x, &db, &cfg, &Constant).unwrap();
        assert!(!r.success);
        assert!(r.increment <= 0);
        assert_eq!(r.queries_used, r.trace.len() as u64);
        assert_eq!(r.queries_used, 1 + 2 + 4 * 3 + 1);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig { epsilon: 0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { max_queries: 5, ..Default::default() }.validate().is_err());
        let json = r#"{"epsilon": 8, "seed": 3, "selection": {"k": 4}}"#;
        let cfg: AttackConfig = serde_json::from_str(json).unwrap();
        assert_eq!((cfg.epsilon, cfg.seed, cfg.selection.k, cfg.max_queries), (8, 3, 4, 4000));
    }

    #[test]
    fn tiny_budget_yields_flagged_failure() {
        let x = ImageTensor::filled(128, 128, [90; 3]).unwrap();
        let db = index_of(vec![record_with_mean([90, 90, 90], 0.9, 1)]);
        let cfg = AttackConfig {
            max_queries: 3,
            selection: SelectionConfig { k: 2, ..Default::default() },
            ..Default::default()
        };
        let r = run_attack(&x, &db, &cfg, &Constant).unwrap();
        assert!(r.budget_exhausted);
        assert!(!r.success);
        assert_eq!(r.adv_image, x);
        assert!(r.queries_used <= 3);
    }
}
