//! Position-centric candidate selection.
//!
//! The image is tiled into square cells. Each trial queries the oracle once,
//! counts detections per cell by box center, and refills cells that came up
//! short with database objects. The result is an over-perturbed starting
//! point; nothing here constrains the distance to the original.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{
    color_stats, color_transform, linf_distance, resize_bilinear, ColorStats, ColorTransform, ImageError,
    ImageTensor, Perturbation, PixelMask, RegionRect,
};
use crate::oracle::{detect, Detection, Oracle, OracleError, Phase, QueryBudget};
use crate::patchdb::{rank_candidates, PatchDbError, PatchIndex};
use crate::trace::{Checkpoint, QueryRecord};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("{height}x{width} image is not divisible into {cell}px cells")]
    NonDivisible { height: usize, width: usize, cell: usize },
    #[error("cell ({i}, {j}) outside {n_w}x{n_h} grid")]
    CellOutOfRange { i: usize, j: usize, n_w: usize, n_h: usize },
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    PatchDb(#[from] PatchDbError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl SelectionError {
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, SelectionError::Oracle(OracleError::BudgetExhausted { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub cell_size: usize,
    pub n_w: usize,
    pub n_h: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.n_w * self.n_h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major cell index.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n_w + i
    }

    /// Pixel rectangle of column `i`, row `j`.
    pub fn cell(&self, i: usize, j: usize) -> RegionRect {
        let s = self.cell_size;
        RegionRect::with_size(i * s, j * s, s, s).expect("cell size is positive")
    }

    /// Cell rectangles in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, RegionRect)> + '_ {
        (0..self.n_h).flat_map(move |j| (0..self.n_w).map(move |i| (i, j, self.cell(i, j))))
    }

    /// Column and row containing the detection's box center. Cells are
    /// half-open, so every in-frame box lands in exactly one.
    pub fn cell_of(&self, d: &Detection) -> (usize, usize) {
        let (cx2, cy2) = d.center_x2();
        let s2 = 2 * self.cell_size;
        ((cx2 / s2).min(self.n_w - 1), (cy2 / s2).min(self.n_h - 1))
    }
}

pub fn make_grid(img: &ImageTensor, cell_size: usize) -> Result<Grid, SelectionError> {
    let (h, w) = img.dims();
    if cell_size == 0 || h % cell_size != 0 || w % cell_size != 0 {
        return Err(SelectionError::NonDivisible {
            height: h,
            width: w,
            cell: cell_size,
        });
    }
    Ok(Grid {
        cell_size,
        n_w: w / cell_size,
        n_h: h / cell_size,
    })
}

/// Number of detections centered in cell `(i, j)`.
pub fn bcount(dets: &[Detection], grid: &Grid, i: usize, j: usize) -> Result<usize, SelectionError> {
    if i >= grid.n_w || j >= grid.n_h {
        return Err(SelectionError::CellOutOfRange {
            i,
            j,
            n_w: grid.n_w,
            n_h: grid.n_h,
        });
    }
    Ok(dets.iter().filter(|d| grid.cell_of(d) == (i, j)).count())
}

/// Counts for every cell in one pass, row-major.
pub fn bcount_all(dets: &[Detection], grid: &Grid) -> Vec<usize> {
    let mut counts = vec![0; grid.len()];
    for d in dets {
        let (i, j) = grid.cell_of(d);
        counts[grid.index(i, j)] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Cell edge length in pixels.
    pub s_g: usize,
    /// A cell with fewer than `t_p` detections is refilled.
    pub t_p: usize,
    /// Number of trials, one oracle query each.
    pub k: usize,
    pub revert_probability: f64,
    pub min_score: f64,
    /// Best color matches considered per generated tile.
    pub candidate_pool: usize,
    /// Objects per tile are drawn uniformly from `1..=max_objects_per_cell`.
    pub max_objects_per_cell: usize,
    pub transform_probability: f64,
    pub transform: ColorTransform,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            s_g: 64,
            t_p: 1,
            k: 10,
            revert_probability: 0.1,
            min_score: crate::patchdb::DEFAULT_MIN_SCORE,
            candidate_pool: 8,
            max_objects_per_cell: 3,
            transform_probability: 0.2,
            transform: ColorTransform::DEFAULT_JITTER,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: String| Err(SelectionError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.s_g < 2 {
            return bad(format!("s_g must be at least 2, got {}", self.s_g));
        }
        for (name, p) in [
            ("revert_probability", self.revert_probability),
            ("min_score", self.min_score),
            ("transform_probability", self.transform_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.candidate_pool == 0 || self.max_objects_per_cell == 0 {
            return bad("candidate_pool and max_objects_per_cell must be positive".into());
        }
        if self.max_objects_per_cell > 4 {
            return bad("at most four objects fit in a cell".into());
        }
        self.transform.validate()?;
        Ok(())
    }
}

/// Builds a cell-sized tile from database objects that match `target` in
/// color.
///
/// One object fills the tile. Two or more are shrunk to half size and placed
/// in distinct quadrants over a fill of the target's mean color.
pub fn patchgen<R: Rng + ?Sized>(
    cell: &RegionRect,
    db: &PatchIndex,
    target: &ColorStats,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<ImageTensor, SelectionError> {
    let (h, w) = (cell.height(), cell.width());
    let count = rng.gen_range(1..=cfg.max_objects_per_cell.min(4));
    let pool = rank_candidates(db, target, cfg.candidate_pool.max(count), cfg.min_score, rng)?;
    let chosen: Vec<_> = pool.choose_multiple(rng, count).collect();

    let mut tile = if chosen.len() == 1 {
        resize_bilinear(&chosen[0].patch, h, w)?
    } else {
        let mut tile = ImageTensor::filled(h, w, target.mean_rgb())?;
        let (qh, qw) = (h / 2, w / 2);
        for (slot, rec) in index::sample(rng, 4, chosen.len()).into_iter().zip(&chosen) {
            let (qx, qy) = ((slot % 2) * qw, (slot / 2) * qh);
            let obj = resize_bilinear(&rec.patch, qh, qw)?;
            tile.paste_in_place(&obj, &RegionRect::with_size(qx, qy, qw, qh)?)?;
        }
        tile
    };
    if cfg.transform_probability > 0.0 && rng.gen_bool(cfg.transform_probability) {
        tile = color_transform(&tile, &cfg.transform, rng)?;
    }
    Ok(tile)
}

/// Bookkeeping for one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    /// Cell content when `object_count` was observed.
    pub patch: ImageTensor,
    pub object_count: usize,
    /// L∞ distance of `patch` from the original cell.
    pub color_distance: u8,
    pub active_pixels: PixelMask,
    pub eligible: bool,
}

impl CellState {
    pub fn observe(original: &ImageTensor, content: ImageTensor, object_count: usize, epsilon: u8) -> Result<Self, ImageError> {
        let color_distance = linf_distance(&content, original)?;
        let active_pixels = Perturbation::between(&content, original)?.active_mask();
        Ok(Self {
            eligible: object_count >= 1 && color_distance <= epsilon,
            patch: content,
            object_count,
            color_distance,
            active_pixels,
        })
    }

    /// More objects wins; ties go to the content closer to the original.
    pub fn is_better_than(&self, other: &CellState) -> bool {
        self.object_count > other.object_count
            || (self.object_count == other.object_count && self.color_distance < other.color_distance)
    }
}

/// What happened to one cell in one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellAction {
    Kept,
    Replaced,
    Reverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub query: QueryRecord,
    /// Row-major, one entry per cell.
    pub actions: Vec<CellAction>,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub x_init: ImageTensor,
    pub grid: Grid,
    /// Best observed state per cell, row-major.
    pub cells: Vec<CellState>,
    pub trials: Vec<TrialRecord>,
    /// Best queried image within `epsilon` of the original.
    pub in_ball_best: Option<Checkpoint>,
}

/// Runs `cfg.k` trials of query, count and refill starting from `x`.
///
/// `x_init` takes each cell's best observed content when that content held
/// at least one object, and the latest content otherwise.
pub fn position_centric_select<O, R>(
    x: &ImageTensor,
    cfg: &SelectionConfig,
    db: &PatchIndex,
    oracle: &O,
    budget: &QueryBudget,
    epsilon: u8,
    rng: &mut R,
) -> Result<SelectionOutcome, SelectionError>
where
    O: Oracle + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if db.is_empty() {
        return Err(PatchDbError::NoCandidates { min_score: cfg.min_score }.into());
    }
    let grid = make_grid(x, cfg.s_g)?;
    let originals: Vec<ImageTensor> = grid.cells().map(|(_, _, r)| x.crop(&r)).collect::<Result<_, _>>()?;
    let targets: Vec<ColorStats> = grid
        .cells()
        .map(|(_, _, r)| color_stats(x, &r))
        .collect::<Result<_, _>>()?;

    let mut current = x.clone();
    let mut best: Vec<Option<CellState>> = vec![None; grid.len()];
    let mut trials = Vec::with_capacity(cfg.k);
    let mut in_ball_best = None;
    for _ in 0..cfg.k {
        let set = detect(oracle, &current, budget, Phase::Selection)?;
        let linf = linf_distance(&current, x)?;
        if linf <= epsilon {
            let image = &current;
            Checkpoint::keep_better(
                &mut in_ball_best,
                || Checkpoint {
                    image: image.clone(),
                    object_count: set.len(),
                    d: 0.0,
                    queries_at: set.query_index,
                },
                set.len(),
            );
        }
        let counts = bcount_all(&set.detections, &grid);
        let mut actions = Vec::with_capacity(grid.len());
        for (i, j, rect) in grid.cells() {
            let c = grid.index(i, j);
            let observed = CellState::observe(&originals[c], current.crop(&rect)?, counts[c], epsilon)?;
            if best[c].as_ref().is_none_or(|b| observed.is_better_than(b)) {
                best[c] = Some(observed);
            }
            let action = if counts[c] >= cfg.t_p {
                CellAction::Kept
            } else if rng.gen_bool(cfg.revert_probability) {
                current.paste_in_place(&originals[c], &rect)?;
                CellAction::Reverted
            } else {
                let tile = patchgen(&rect, db, &targets[c], cfg, rng)?;
                current.paste_in_place(&tile, &rect)?;
                CellAction::Replaced
            };
            actions.push(action);
        }
        trials.push(TrialRecord {
            query: QueryRecord::new(&set, Phase::Selection, linf, None),
            actions,
        });
    }

    let mut x_init = current.clone();
    let mut cells = Vec::with_capacity(grid.len());
    for (i, j, rect) in grid.cells() {
        let c = grid.index(i, j);
        let state = best[c].take().expect("every cell observed at least once");
        let state = if state.object_count >= 1 {
            x_init.paste_in_place(&state.patch, &rect)?;
            state
        } else {
            CellState::observe(&originals[c], current.crop(&rect)?, 0, epsilon)?
        };
        cells.push(state);
    }
    Ok(SelectionOutcome {
        x_init,
        grid,
        cells,
        trials,
        in_ball_best,
    })
}
