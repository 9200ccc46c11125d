//! Color manipulation: shrinking an over-budget perturbation into the ε ball
//! while the oracle still reports the planted objects.
//!
//! Per cell, positions whose perturbation is within the current radius are
//! *eligible* and get an affine map `s_e·δ + b_e`; the rest get
//! `s_i·M_r·δ` with `M_r` a random keep mask. Cells that lost all their
//! objects are regenerated instead. After each pass the whole image is
//! clamped to the radius, which shrinks stage by stage to ε.
//!
//! All pixel arithmetic rounds half away from zero.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{clamp_ball, color_stats, linf_distance, ColorStats, ImageError, ImageTensor, Perturbation, PixelMask};
use crate::oracle::{detect, Oracle, OracleError, Phase, QueryBudget};
use crate::patchdb::{PatchDbError, PatchIndex};
use crate::selection::{bcount_all, make_grid, patchgen, SelectionConfig, SelectionError};
use crate::trace::QueryRecord;

pub use crate::trace::Checkpoint;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("invalid projection parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// How `b_e` is chosen for each cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum OffsetPolicy {
    /// Per channel, `b_e = -mean(s_e·δ)` over the cell's eligible positions.
    RecenterPerCell,
    Fixed { b_e: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionParams {
    pub s_i: f64,
    /// Probability that an ineligible active position is kept in `M_r`.
    pub dropout_density: f64,
    pub s_e: f64,
    pub offset: OffsetPolicy,
    /// Iterations (oracle queries) per tolerance stage.
    pub k_a: usize,
    /// Times a stage is rerun from its predecessor's checkpoint when it ends
    /// with fewer objects.
    pub max_stage_retries: usize,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            s_i: 0.0,
            dropout_density: 0.5,
            s_e: 0.9,
            offset: OffsetPolicy::RecenterPerCell,
            k_a: 40,
            max_stage_retries: 1,
        }
    }
}

impl ProjectionParams {
    /// Parameters under which `project` is the identity.
    pub fn identity() -> Self {
        Self {
            s_i: 1.0,
            dropout_density: 1.0,
            s_e: 1.0,
            offset: OffsetPolicy::Fixed { b_e: 0.0 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        let bad = |m: String| Err(ProjectionError::InvalidParams(m));
        if !(0.0..=1.0).contains(&self.dropout_density) {
            return bad(format!("dropout_density must lie in [0, 1], got {}", self.dropout_density));
        }
        if !self.s_i.is_finite() || !self.s_e.is_finite() {
            return bad("s_i and s_e must be finite".into());
        }
        if let OffsetPolicy::Fixed { b_e } = self.offset {
            if !b_e.is_finite() {
                return bad("b_e must be finite".into());
            }
        }
        if self.k_a == 0 {
            return bad("k_a must be at least 1".into());
        }
        Ok(())
    }
}

/// Descending tolerance multipliers ending at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ToleranceSchedule {
    stages: Vec<f64>,
}

impl ToleranceSchedule {
    pub fn new(stages: Vec<f64>) -> Result<Self, ProjectionError> {
        let bad = |m: &str| Err(ProjectionError::InvalidParams(format!("tolerance schedule {stages:?}: {m}")));
        if stages.last() != Some(&1.0) {
            return bad("must end at 1.0");
        }
        // Negated so NaN stages are rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if stages.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("must be strictly decreasing");
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[f64] {
        &self.stages
    }
}

impl Default for ToleranceSchedule {
    fn default() -> Self {
        Self {
            stages: vec![2.0, 1.5, 1.25, 1.0],
        }
    }
}

impl TryFrom<Vec<f64>> for ToleranceSchedule {
    type Error = ProjectionError;

    fn try_from(stages: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(stages)
    }
}

impl From<ToleranceSchedule> for Vec<f64> {
    fn from(s: ToleranceSchedule) -> Self {
        s.stages
    }
}

/// Stage radius in whole intensity units.
pub fn stage_radius(epsilon: u8, d: f64) -> u8 {
    (epsilon as f64 * d).floor().clamp(0.0, 255.0) as u8
}

/// Half away from zero, clamped to ±255. Exact for any finite input; avoids
/// a libm call on targets without a rounding instruction.
fn to_delta(v: f64) -> i16 {
    let t = v.abs().min(255.0);
    let f = t as i16;
    let r = if t - f as f64 >= 0.5 { f + 1 } else { f };
    if v < 0.0 {
        -r
    } else {
        r
    }
}

fn perturbation(dims: (usize, usize), data: Vec<i16>) -> Perturbation {
    Perturbation::from_raw(dims.0, dims.1, data).expect("values clamped to [-255, 255]")
}

/// True where `|δ| ≤ eps`, per channel.
pub fn eligible_mask(xp: &Perturbation, eps: f64) -> PixelMask {
    let (h, w) = xp.dims();
    PixelMask::from_raw(h, w, xp.data().iter().map(|&v| (v as f64).abs() <= eps).collect())
        .expect("mask matches perturbation")
}

/// `round(s_i · M_r · δ)`.
pub fn f_i(xp: &Perturbation, s_i: f64, m_r: &PixelMask) -> Result<Perturbation, ProjectionError> {
    if m_r.dims() != xp.dims() {
        return Err(ImageError::DimensionMismatch {
            left: xp.dims(),
            right: m_r.dims(),
        }
        .into());
    }
    let data = xp
        .data()
        .iter()
        .zip(m_r.data())
        .map(|(&v, &m)| if m { to_delta(s_i * v as f64) } else { 0 })
        .collect();
    Ok(perturbation(xp.dims(), data))
}

/// `round(s_e · δ + b_e)`, clamped to ±255.
pub fn f_e(xp: &Perturbation, s_e: f64, b_e: f64) -> Perturbation {
    let data = xp.data().iter().map(|&v| to_delta(s_e * v as f64 + b_e)).collect();
    perturbation(xp.dims(), data)
}

/// Keep mask for the ineligible term. Positions that are eligible or
/// inactive never reach `F_i`'s output, so only ineligible active positions
/// draw from `rng`, each kept with probability `density`.
pub fn sample_dropout_mask<R: Rng + ?Sized>(
    xp: &Perturbation,
    eligible: &PixelMask,
    density: f64,
    rng: &mut R,
) -> PixelMask {
    let (h, w) = xp.dims();
    let data = xp
        .data()
        .iter()
        .zip(eligible.data())
        .map(|(&v, &e)| !e && v != 0 && rng.gen_bool(density))
        .collect();
    PixelMask::from_raw(h, w, data).expect("mask matches perturbation")
}

/// Per-channel `-mean(s_e·δ)` over eligible positions; 0 for a channel with
/// none.
pub fn recenter_offsets(xp: &Perturbation, eligible: &PixelMask, s_e: f64) -> [f64; 3] {
    let (mut sum, mut n) = ([0i64; 3], [0usize; 3]);
    for (px, m) in xp.data().chunks_exact(3).zip(eligible.data().chunks_exact(3)) {
        for c in 0..3 {
            if m[c] {
                sum[c] += px[c] as i64;
                n[c] += 1;
            }
        }
    }
    offsets(sum, n, s_e)
}

fn offsets(sum: [i64; 3], n: [usize; 3], s_e: f64) -> [f64; 3] {
    std::array::from_fn(|c| if n[c] == 0 { 0.0 } else { -(s_e * sum[c] as f64) / n[c] as f64 })
}

/// One projection step: `M_e ⊗ F_e(δ) + (1 − M_e) ⊗ F_i(δ)`.
///
/// Equivalent to composing [`eligible_mask`], [`recenter_offsets`] or the
/// fixed offset, [`sample_dropout_mask`], [`f_e`] and [`f_i`], in two fused
/// passes. With `s_i = 0` the ineligible term is zero whatever `M_r` holds,
/// so no mask is drawn.
pub fn project<R: Rng + ?Sized>(xp: &Perturbation, eps: f64, params: &ProjectionParams, rng: &mut R) -> Perturbation {
    let eligible = |v: i16| (v as f64).abs() <= eps;
    let b_e = match params.offset {
        OffsetPolicy::RecenterPerCell => {
            let (mut sum, mut n) = ([0i64; 3], [0usize; 3]);
            for px in xp.data().chunks_exact(3) {
                for c in 0..3 {
                    if eligible(px[c]) {
                        sum[c] += px[c] as i64;
                        n[c] += 1;
                    }
                }
            }
            offsets(sum, n, params.s_e)
        }
        OffsetPolicy::Fixed { b_e } => [b_e; 3],
    };
    let draw_mask = params.s_i != 0.0;
    let mut data = Vec::with_capacity(xp.data().len());
    for px in xp.data().chunks_exact(3) {
        for c in 0..3 {
            let v = px[c];
            let out = if eligible(v) {
                to_delta(params.s_e * v as f64 + b_e[c])
            } else if draw_mask && v != 0 && rng.gen_bool(params.dropout_density) {
                to_delta(params.s_i * v as f64)
            } else {
                0
            };
            data.push(out);
        }
    }
    perturbation(xp.dims(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub d: f64,
    pub radius: u8,
    pub attempts: usize,
    pub best_count: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ManipulationOutcome {
    /// Last iterate, clamped to the final stage radius.
    pub x_out: ImageTensor,
    /// Best queried iterate within ε of the original.
    pub best: Option<Checkpoint>,
    /// Best queried iterate of each completed stage, within that stage's
    /// radius.
    pub checkpoints: Vec<Checkpoint>,
    pub stages: Vec<StageSummary>,
    pub trace: Vec<QueryRecord>,
    /// The budget ran out; everything above is best-so-far.
    pub exhausted: bool,
}

struct Ctx<'a, O: ?Sized> {
    x: &'a ImageTensor,
    epsilon: u8,
    params: &'a ProjectionParams,
    cfg: &'a SelectionConfig,
    db: &'a PatchIndex,
    oracle: &'a O,
    budget: &'a QueryBudget,
    grid: crate::selection::Grid,
    originals: Vec<ImageTensor>,
    targets: Vec<ColorStats>,
}

struct StageRun {
    end: ImageTensor,
    best: Option<Checkpoint>,
    exhausted: bool,
}

/// Runs every tolerance stage over `x_adv`, querying the oracle once per
/// iteration.
#[allow(clippy::too_many_arguments)]
pub fn color_manipulate<O, R>(
    x: &ImageTensor,
    x_adv: &ImageTensor,
    epsilon: u8,
    schedule: &ToleranceSchedule,
    params: &ProjectionParams,
    cfg: &SelectionConfig,
    db: &PatchIndex,
    oracle: &O,
    budget: &QueryBudget,
    rng: &mut R,
) -> Result<ManipulationOutcome, ProjectionError>
where
    O: Oracle + ?Sized,
    R: Rng + ?Sized,
{
    params.validate()?;
    cfg.validate()?;
    x.check_same_dims(x_adv)?;
    let grid = make_grid(x, cfg.s_g)?;
    let ctx = Ctx {
        x,
        epsilon,
        params,
        cfg,
        db,
        oracle,
        budget,
        originals: grid.cells().map(|(_, _, r)| x.crop(&r)).collect::<Result<_, _>>()?,
        targets: grid.cells().map(|(_, _, r)| color_stats(x, &r)).collect::<Result<_, _>>()?,
        grid,
    };

    let mut out = ManipulationOutcome {
        x_out: x_adv.clone(),
        best: None,
        checkpoints: Vec::new(),
        stages: Vec::new(),
        trace: Vec::new(),
        exhausted: false,
    };
    let mut start = x_adv.clone();
    let mut previous: Option<Checkpoint> = None;
    for &d in schedule.stages() {
        let radius = stage_radius(epsilon, d);
        let mut stage_best: Option<Checkpoint> = None;
        let mut attempts = 0;
        let mut from = start.clone();
        loop {
            attempts += 1;
            let run = run_stage(&ctx, from, d, radius, &mut out, rng)?;
            if let Some(cp) = run.best {
                Checkpoint::keep_better(&mut stage_best, || cp.clone(), cp.object_count);
            }
            out.x_out = run.end;
            if run.exhausted {
                out.exhausted = true;
                break;
            }
            let worse = match (&previous, &stage_best) {
                (Some(p), Some(b)) => b.object_count < p.object_count,
                (Some(_), None) => true,
                _ => false,
            };
            if worse && attempts <= params.max_stage_retries {
                from = previous.as_ref().expect("worse implies a predecessor").image.clone();
                continue;
            }
            break;
        }
        out.stages.push(StageSummary {
            d,
            radius,
            attempts,
            best_count: stage_best.as_ref().map(|c| c.object_count),
        });
        if out.exhausted {
            break;
        }
        if let Some(cp) = stage_best {
            start = cp.image.clone();
            out.checkpoints.push(cp.clone());
            previous = Some(cp);
        } else {
            start = out.x_out.clone();
        }
    }
    Ok(out)
}

fn run_stage<O, R>(
    ctx: &Ctx<'_, O>,
    mut current: ImageTensor,
    d: f64,
    radius: u8,
    out: &mut ManipulationOutcome,
    rng: &mut R,
) -> Result<StageRun, ProjectionError>
where
    O: Oracle + ?Sized,
    R: Rng + ?Sized,
{
    let mut best: Option<Checkpoint> = None;
    for _ in 0..ctx.params.k_a {
        let set = match detect(ctx.oracle, &current, ctx.budget, Phase::Projection) {
            Ok(s) => s,
            Err(OracleError::BudgetExhausted { .. }) => {
                return Ok(StageRun {
                    end: current,
                    best,
                    exhausted: true,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let linf = linf_distance(&current, ctx.x)?;
        out.trace.push(QueryRecord::new(&set, Phase::Projection, linf, Some(d)));
        let snapshot = |img: &ImageTensor| Checkpoint {
            image: img.clone(),
            object_count: set.len(),
            d,
            queries_at: set.query_index,
        };
        if linf <= radius {
            Checkpoint::keep_better(&mut best, || snapshot(&current), set.len());
        }
        if linf <= ctx.epsilon {
            Checkpoint::keep_better(&mut out.best, || snapshot(&current), set.len());
        }

        let counts = bcount_all(&set.detections, &ctx.grid);
        for (i, j, rect) in ctx.grid.cells() {
            let c = ctx.grid.index(i, j);
            let cell = if counts[c] < 1 {
                match patchgen(&rect, ctx.db, &ctx.targets[c], ctx.cfg, rng) {
                    Ok(tile) => tile,
                    Err(SelectionError::PatchDb(PatchDbError::NoCandidates { .. })) => continue,
                    Err(e) => return Err(e.into()),
                }
            } else {
                let xp = Perturbation::between(&current.crop(&rect)?, &ctx.originals[c])?;
                project(&xp, radius as f64, ctx.params, rng).apply(&ctx.originals[c])?
            };
            current.paste_in_place(&cell, &rect)?;
        }
        current = clamp_ball(&current, ctx.x, radius)?;
    }
    Ok(StageRun {
        end: current,
        best,
        exhausted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Detection;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pert(h: usize, w: usize, v: &[i16]) -> Perturbation {
        Perturbation::from_raw(h, w, v.to_vec()).unwrap()
    }

    fn random_pert(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Perturbation {
        let data = (0..h * w * 3).map(|_| rng.gen_range(-255..=255)).collect();
        Perturbation::from_raw(h, w, data).unwrap()
    }

    #[test]
    fn eligibility_boundary() {
        let xp = pert(1, 2, &[32, -32, 33, 0, -33, 1]);
        assert_eq!(eligible_mask(&xp, 32.0).data(), &[true, true, false, true, false, true]);
        assert!(eligible_mask(&Perturbation::zeros(4, 4), 1.0).all());
    }

    #[test]
    fn eligibility_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xp = random_pert(&mut rng, 20, 30);
        let m = eligible_mask(&xp, 40.0);
        for k in 0..xp.data().len() {
            assert_eq!(m.data()[k], xp.data()[k] >= -40 && xp.data()[k] <= 40);
        }
    }

    #[test]
    fn f_i_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xp = random_pert(&mut rng, 8, 8);
        let all = PixelMask::filled(8, 8, true);
        assert!(f_i(&xp, 0.0, &all).unwrap().is_zero());
        assert_eq!(f_i(&xp, 1.0, &all).unwrap(), xp);
        let one = pert(1, 1, &[40, 0, 0]);
        assert_eq!(f_i(&one, 0.5, &PixelMask::filled(1, 1, true)).unwrap().data()[0], 20);
        assert!(f_i(&one, 1.0, &PixelMask::filled(2, 1, true)).is_err());
    }

    #[test]
    fn f_e_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xp = random_pert(&mut rng, 8, 8);
        assert_eq!(f_e(&xp, 1.0, 0.0), xp);
        // 0.5·10 + 2 = 7 and 0.5·(−6) + 2 = −1.
        assert_eq!(f_e(&pert(1, 1, &[10, -6, 0]), 0.5, 2.0).data(), &[7, -1, 2]);
        // Half away from zero.
        assert_eq!(f_e(&pert(1, 1, &[5, -5, 3]), 0.5, 0.0).data(), &[3, -3, 2]);
        assert_eq!(f_e(&pert(1, 1, &[255, -255, 0]), 2.0, 0.0).data(), &[255, -255, 0]);
    }

    #[test]
    fn recentered_mean_is_zero_within_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let data: Vec<i16> = (0..16 * 16 * 3).map(|_| rng.gen_range(-100..=100)).collect();
            let xp = Perturbation::from_raw(16, 16, data).unwrap();
            let all = PixelMask::filled(16, 16, true);
            let b = recenter_offsets(&xp, &all, 1.0);
            let mean: f64 = xp.data().iter().map(|&v| v as f64).sum::<f64>() / xp.data().len() as f64;
            let scalar = f_e(&xp, 1.0, -mean);
            let out_mean = scalar.data().iter().map(|&v| v as f64).sum::<f64>() / scalar.data().len() as f64;
            assert!(out_mean.abs() <= 0.5, "{out_mean}");
            // Per-channel recentering zeroes each channel's mean.
            let p = project(&xp, 255.0, &ProjectionParams { s_e: 1.0, ..Default::default() }, &mut rng);
            for (c, b_c) in b.iter().enumerate() {
                let ch: Vec<f64> = p.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
                let m = ch.iter().sum::<f64>() / ch.len() as f64;
                assert!(m.abs() <= 0.5, "channel {c}: {m} (b_e {b_c})");
            }
        }
    }

    #[test]
    fn fast_rounding_matches_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut cases: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-300.0..300.0)).collect();
        cases.extend((-600..=600).map(|k| k as f64 * 0.5));
        cases.extend([0.49999999999999994, -0.49999999999999994, 254.5, -254.5, 1e300, -1e300, -0.0]);
        for v in cases {
            assert_eq!(to_delta(v), v.round().clamp(-255.0, 255.0) as i16, "{v}");
        }
    }

    #[test]
    fn fused_projection_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..50 {
            let xp = random_pert(&mut rng, 7, 9);
            let eps = rng.gen_range(1.0..200.0);
            let params = ProjectionParams {
                s_i: [0.0, 0.5, 1.0, 1.7][trial % 4],
                dropout_density: rng.gen_range(0.0..=1.0),
                s_e: rng.gen_range(0.0..1.5),
                offset: if trial % 2 == 0 {
                    OffsetPolicy::RecenterPerCell
                } else {
                    OffsetPolicy::Fixed { b_e: rng.gen_range(-20.0..20.0) }
                },
                ..Default::default()
            };
            let seed = rng.gen::<u64>();
            let fused = project(&xp, eps, &params, &mut ChaCha8Rng::seed_from_u64(seed));

            let m_e = eligible_mask(&xp, eps);
            let b = match params.offset {
                OffsetPolicy::RecenterPerCell => recenter_offsets(&xp, &m_e, params.s_e),
                OffsetPolicy::Fixed { b_e } => [b_e; 3],
            };
            let m_r = if params.s_i == 0.0 {
                PixelMask::filled(7, 9, false)
            } else {
                sample_dropout_mask(&xp, &m_e, params.dropout_density, &mut ChaCha8Rng::seed_from_u64(seed))
            };
            let fi = f_i(&xp, params.s_i, &m_r).unwrap();
            for k in 0..xp.data().len() {
                let expected = if m_e.data()[k] {
                    f_e(&Perturbation::from_raw(1, 1, vec![xp.data()[k], 0, 0]).unwrap(), params.s_e, b[k % 3]).data()[0]
                } else {
                    fi.data()[k]
                };
                assert_eq!(fused.data()[k], expected, "trial {trial} position {k}");
            }
        }
    }

    #[test]
    fn hand_evaluated_projection() {
        // [[40, −40], [8, −8]] in the first channel.
        let xp = pert(2, 2, &[40, 0, 0, -40, 0, 0, 8, 0, 0, -8, 0, 0]);
        let params = ProjectionParams {
            s_i: 0.0,
            s_e: 0.5,
            offset: OffsetPolicy::Fixed { b_e: 0.0 },
            ..Default::default()
        };
        let out = project(&xp, 16.0, &params, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.data(), &[0, 0, 0, 0, 0, 0, 4, 0, 0, -4, 0, 0]);
    }

    #[test]
    fn zero_is_a_fixed_point_and_identity_params_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Perturbation::zeros(8, 8);
        assert_eq!(project(&z, 8.0, &ProjectionParams::default(), &mut rng), z);
        for _ in 0..10 {
            let xp = random_pert(&mut rng, 8, 8);
            assert_eq!(project(&xp, 16.0, &ProjectionParams::identity(), &mut rng), xp);
        }
    }

    proptest! {
        #[test]
        fn eligible_magnitude_is_bounded(seed in any::<u64>(), s_e in 0.0f64..=1.0, eps in 1.0f64..=64.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xp = random_pert(&mut rng, 6, 6);
            let params = ProjectionParams { s_e, ..Default::default() };
            let m_e = eligible_mask(&xp, eps);
            let b = recenter_offsets(&xp, &m_e, s_e);
            let out = project(&xp, eps, &params, &mut rng);
            let max_in = xp.data().iter().zip(m_e.data()).filter(|(_, &e)| e).map(|(&v, _)| (v as f64).abs()).fold(0.0, f64::max);
            let b_max = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (k, (&v, &e)) in out.data().iter().zip(m_e.data()).enumerate() {
                if e {
                    prop_assert!((v as f64).abs() <= s_e * max_in + b_max + 0.5, "position {k}");
                } else {
                    prop_assert_eq!(v, 0);
                }
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(ToleranceSchedule::new(vec![2.0, 1.0]).is_ok());
        assert!(ToleranceSchedule::new(vec![1.0]).is_ok());
        assert!(ToleranceSchedule::new(vec![2.0, 1.5]).is_err());
        assert!(ToleranceSchedule::new(vec![1.5, 1.5, 1.0]).is_err());
        assert!(ToleranceSchedule::new(vec![]).is_err());
        let s: ToleranceSchedule = serde_json::from_str("[2.0,1.5,1.25,1.0]").unwrap();
        assert_eq!(s, ToleranceSchedule::default());
        assert!(serde_json::from_str::<ToleranceSchedule>("[1.0, 2.0]").is_err());
        assert_eq!(stage_radius(32, 1.25), 40);
        assert_eq!(stage_radius(200, 2.0), 255);
    }

    struct Nothing;

    impl Oracle for Nothing {
        fn id(&self) -> String {
            "nothing".into()
        }
        fn forward(&self, _: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
            Ok(vec![])
        }
    }

    fn empty_db() -> PatchIndex {
        PatchIndex {
            records: vec![],
            oracle_fingerprints: vec![],
            created_at: String::new(),
            config_digest: String::new(),
            transforms_tested: 0,
            partial: false,
        }
    }

    fn scene(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(128, 128, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    #[test]
    fn unperturbed_input_stays_put() {
        let x = scene(6);
        let budget = QueryBudget::new(1000);
        let out = color_manipulate(
            &x,
            &x,
            8,
            &ToleranceSchedule::default(),
            &ProjectionParams::default(),
            &SelectionConfig::default(),
            &empty_db(),
            &Nothing,
            &budget,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.x_out, x);
        assert_eq!(out.best.unwrap().object_count, 0);
        // Every stage ties its predecessor, so none is retried.
        assert_eq!(budget.used(), 4 * 40);
    }

    struct EveryCell;

    impl Oracle for EveryCell {
        fn id(&self) -> String {
            "every-cell".into()
        }
        fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
            let mut out = Vec::new();
            for y in (0..image.height()).step_by(64) {
                for x in (0..image.width()).step_by(64) {
                    out.push(Detection {
                        bbox: crate::imagecore::RegionRect::new(x, y, x + 64, y + 64).unwrap(),
                        label: "obj".into(),
                        score: 0.9,
                    });
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn single_identity_stage_reduces_to_clamping() {
        let x = scene(7);
        let adv = scene(8);
        let budget = QueryBudget::new(1);
        let params = ProjectionParams {
            k_a: 1,
            ..ProjectionParams::identity()
        };
        let out = color_manipulate(
            &x,
            &adv,
            16,
            &ToleranceSchedule::new(vec![1.0]).unwrap(),
            &params,
            &SelectionConfig::default(),
            &empty_db(),
            &EveryCell,
            &budget,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.x_out, clamp_ball(&adv, &x, 16).unwrap());
    }

    #[test]
    fn every_iterate_respects_its_stage_radius() {
        let x = scene(9);
        let adv = scene(10);
        let budget = QueryBudget::new(1000);
        let params = ProjectionParams { k_a: 3, ..Default::default() };
        let out = color_manipulate(
            &x,
            &adv,
            16,
            &ToleranceSchedule::default(),
            &params,
            &SelectionConfig::default(),
            &empty_db(),
            &EveryCell,
            &budget,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.trace.len() as u64, budget.used());
        assert_eq!(out.trace.len(), 4 * 3);
        // The first query of each stage sees the previous stage's radius.
        let mut prev_radius = 255;
        for chunk in out.trace.chunks(3) {
            let r = stage_radius(16, chunk[0].d.unwrap());
            assert!(chunk[0].linf <= prev_radius);
            assert!(chunk[1..].iter().all(|q| q.linf <= r));
            prev_radius = r;
        }
        assert!(linf_distance(&out.x_out, &x).unwrap() <= 16);
    }

    #[test]
    fn budget_exhaustion_returns_best_so_far() {
        let x = scene(11);
        let budget = QueryBudget::new(5);
        let out = color_manipulate(
            &x,
            &scene(12),
            16,
            &ToleranceSchedule::default(),
            &ProjectionParams::default(),
            &SelectionConfig::default(),
            &empty_db(),
            &EveryCell,
            &budget,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(out.exhausted);
        assert_eq!(out.trace.len(), 5);
    }
}
