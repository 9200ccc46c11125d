//! Deterministic template-correlation detector.
//!
//! Each template is a small canonical RGB pattern. At every configured
//! scale the image is block-averaged by that factor and every template is
//! slid over it with normalized cross-correlation; local maxima above the
//! correlation threshold become detections whose box is the template
//! footprint mapped back to image pixels. The result then goes through NMS,
//! the minimum-size filter and the score floor, in that order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nms, Detection, Oracle, OracleError};
use crate::imagecore::{ImageTensor, RegionRect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub label: String,
    pub pattern: ImageTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockDetectorConfig {
    pub model_id: String,
    pub templates: Vec<Template>,
    /// Block-averaging factors; a template of `h × w` canonical pixels is
    /// found as an object of `h·f × w·f` image pixels.
    pub scales: Vec<usize>,
    /// Scan stride in image pixels.
    pub stride: usize,
    pub correlation_threshold: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Boxes smaller than this fraction of the image area are dropped.
    pub min_size_fraction: f64,
    /// Windows flatter than this standard deviation (intensity units) never
    /// match anything.
    pub min_window_std: f64,
}

impl Default for MockDetectorConfig {
    fn default() -> Self {
        Self {
            model_id: "mock-ncc".into(),
            templates: standard_templates(),
            scales: vec![4, 8],
            stride: 8,
            correlation_threshold: 0.6,
            score_threshold: 0.25,
            nms_iou: 0.5,
            min_size_fraction: 0.0,
            min_window_std: 4.0,
        }
    }
}

impl MockDetectorConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::InvalidConfig(m));
        if self.templates.is_empty() {
            return bad("template library is empty".into());
        }
        let dims = self.templates[0].pattern.dims();
        if let Some(t) = self.templates.iter().find(|t| t.pattern.dims() != dims) {
            return bad(format!("template {:?} is {:?}, expected {:?}", t.label, t.pattern.dims(), dims));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return bad("scales must be non-empty and positive".into());
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        for (name, v) in [
            ("correlation_threshold", self.correlation_threshold),
            ("score_threshold", self.score_threshold),
            ("nms_iou", self.nms_iou),
            ("min_size_fraction", self.min_size_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.min_window_std < 0.0 {
            return bad("min_window_std must be non-negative".into());
        }
        Ok(())
    }

    /// Image-pixel sizes at which objects are recognized.
    pub fn object_sizes(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.templates[0].pattern.dims();
        self.scales.iter().map(|&f| (h * f, w * f)).collect()
    }
}

const STANDARD_LABELS: [&str; 6] = ["person", "car", "dog", "bicycle", "bottle", "chair"];
const STANDARD_SEED: u64 = 0x5eed_7e3b_1a7e;

/// The default library: six 8×8 two-tone patterns with balanced random
/// masks, redrawn until every pair correlates below 0.4.
pub fn standard_templates() -> Vec<Template> {
    let mut rng = ChaCha8Rng::seed_from_u64(STANDARD_SEED);
    let mut out: Vec<Template> = Vec::new();
    for label in STANDARD_LABELS {
        loop {
            let mut mask: Vec<bool> = (0..64).map(|i| i < 32).collect();
            mask.shuffle(&mut rng);
            let fg: [u8; 3] = std::array::from_fn(|_| rng.gen_range(150..=240));
            let bg: [u8; 3] = std::array::from_fn(|_| rng.gen_range(15..=105));
            let pattern = ImageTensor::from_fn(8, 8, |x, y| if mask[y * 8 + x] { fg } else { bg })
                .expect("8x8 pattern");
            let weights = zero_mean_unit(&pattern);
            let distinct = out.iter().all(|t| {
                let w = zero_mean_unit(&t.pattern);
                let c: f32 = w.iter().zip(&weights).map(|(a, b)| a * b).sum();
                c.abs() < 0.4
            });
            if distinct {
                out.push(Template {
                    label: label.into(),
                    pattern,
                });
                break;
            }
        }
    }
    out
}

fn zero_mean_unit(pattern: &ImageTensor) -> Vec<f32> {
    let n = pattern.data().len() as f64;
    let mean = pattern.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let centered: Vec<f64> = pattern.data().iter().map(|&v| v as f64 - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; centered.len()];
    }
    centered.iter().map(|v| (v / norm) as f32).collect()
}

#[derive(Debug, Clone)]
struct Prepared {
    label: String,
    weights: Vec<f32>,
}

/// In-process stand-in for a victim detector. Stateless and reentrant.
#[derive(Debug, Clone)]
pub struct MockDetector {
    cfg: MockDetectorConfig,
    prepared: Vec<Prepared>,
    template_dims: (usize, usize),
}

impl MockDetector {
    pub fn new(cfg: MockDetectorConfig) -> Result<Self, OracleError> {
        cfg.validate()?;
        let prepared = cfg
            .templates
            .iter()
            .map(|t| Prepared {
                label: t.label.clone(),
                weights: zero_mean_unit(&t.pattern),
            })
            .collect();
        let template_dims = cfg.templates[0].pattern.dims();
        Ok(Self {
            cfg,
            prepared,
            template_dims,
        })
    }

    pub fn config(&self) -> &MockDetectorConfig {
        &self.cfg
    }

    /// The full mock pipeline on one image.
    pub fn run(&self, image: &ImageTensor) -> Vec<Detection> {
        let min_area = self.cfg.min_size_fraction * (image.height() * image.width()) as f64;
        let mut candidates = Vec::new();
        for &scale in &self.cfg.scales {
            if !self.scale_can_matter(scale, min_area) {
                continue;
            }
            self.scan_scale(image, scale, &mut candidates);
        }
        let kept = nms(&candidates, self.cfg.nms_iou);
        kept.into_iter()
            .filter(|d| d.bbox.area() as f64 >= min_area)
            .filter(|d| d.score >= self.cfg.score_threshold)
            .collect()
    }

    /// A scale whose boxes all fail the size filter can still matter if one
    /// of its boxes could suppress a larger survivor in NMS. Nested boxes at
    /// scales s < t overlap with IoU at most (s/t)^2.
    fn scale_can_matter(&self, scale: usize, min_area: f64) -> bool {
        let (th, tw) = self.template_dims;
        if ((th * tw * scale * scale) as f64) >= min_area {
            return true;
        }
        self.cfg.scales.iter().any(|&t| {
            t > scale
                && ((th * tw * t * t) as f64) >= min_area
                && ((scale * scale) as f64 / (t * t) as f64) > self.cfg.nms_iou
        })
    }

    fn scan_scale(&self, image: &ImageTensor, scale: usize, out: &mut Vec<Detection>) {
        let (th, tw) = self.template_dims;
        let (lh, lw) = (image.height() / scale, image.width() / scale);
        if lh < th || lw < tw {
            return;
        }
        let level = block_average(image, scale, lh, lw);
        let integral = Integral::new(&level, lh, lw);
        let step = (self.cfg.stride / scale).max(1);
        let nu = (lh - th) / step + 1;
        let nv = (lw - tw) / step + 1;
        let n = (th * tw * 3) as f64;
        let min_var = n * self.cfg.min_window_std * self.cfg.min_window_std;
        let row_len = tw * 3;
        let n_templates = self.prepared.len();

        let mut scores = vec![0f32; n_templates * nu * nv];
        let mut window = vec![0f32; th * row_len];
        for pu in 0..nu {
            for pv in 0..nv {
                let (u, v) = (pu * step, pv * step);
                let (s, q) = integral.window(u, v, th, tw);
                let var = q - s * s / n;
                if var < min_var || var <= 0.0 {
                    continue;
                }
                let inv = (1.0 / var.sqrt()) as f32;
                for r in 0..th {
                    let start = ((u + r) * lw + v) * 3;
                    window[r * row_len..(r + 1) * row_len].copy_from_slice(&level[start..start + row_len]);
                }
                for (t, p) in self.prepared.iter().enumerate() {
                    scores[(t * nu + pu) * nv + pv] = dot(&p.weights, &window) * inv;
                }
            }
        }

        let thr = self.cfg.correlation_threshold as f32;
        for (t, p) in self.prepared.iter().enumerate() {
            let grid = &scores[t * nu * nv..(t + 1) * nu * nv];
            for pu in 0..nu {
                for pv in 0..nv {
                    let c = grid[pu * nv + pv];
                    if c < thr || !is_peak(grid, nu, nv, pu, pv) {
                        continue;
                    }
                    let (x0, y0) = (pv * step * scale, pu * step * scale);
                    out.push(Detection {
                        bbox: RegionRect::new(x0, y0, x0 + tw * scale, y0 + th * scale)
                            .expect("template footprint is non-empty"),
                        label: p.label.clone(),
                        score: (c as f64).clamp(0.0, 1.0),
                    });
                }
            }
        }
    }
}

impl Oracle for MockDetector {
    fn id(&self) -> String {
        self.cfg.model_id.clone()
    }

    fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
        Ok(self.run(image))
    }
}

/// Eight independent accumulators so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// 3×3 max-pool test; on plateaus the first position in raster order wins.
fn is_peak(grid: &[f32], nu: usize, nv: usize, pu: usize, pv: usize) -> bool {
    let c = grid[pu * nv + pv];
    for du in -1i64..=1 {
        for dv in -1i64..=1 {
            if du == 0 && dv == 0 {
                continue;
            }
            let (qu, qv) = (pu as i64 + du, pv as i64 + dv);
            if qu < 0 || qv < 0 || qu >= nu as i64 || qv >= nv as i64 {
                continue;
            }
            let other = grid[qu as usize * nv + qv as usize];
            let earlier = du < 0 || (du == 0 && dv < 0);
            if other > c || (earlier && other == c) {
                return false;
            }
        }
    }
    true
}

fn block_average(image: &ImageTensor, f: usize, lh: usize, lw: usize) -> Vec<f32> {
    let mut acc = vec![0u32; lh * lw * 3];
    let src = image.data();
    for y in 0..lh * f {
        let row = &src[image.index(0, y)..image.index(0, y) + lw * f * 3];
        let dst = &mut acc[(y / f) * lw * 3..(y / f + 1) * lw * 3];
        for (x, px) in row.chunks_exact(3).enumerate() {
            let o = (x / f) * 3;
            dst[o] += px[0] as u32;
            dst[o + 1] += px[1] as u32;
            dst[o + 2] += px[2] as u32;
        }
    }
    let div = (f * f) as f32;
    acc.into_iter().map(|v| v as f32 / div).collect()
}

/// Summed-area tables of per-pixel channel sums and squared channel sums.
struct Integral {
    width: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Integral {
    fn new(level: &[f32], lh: usize, lw: usize) -> Self {
        let width = lw + 1;
        let mut sum = vec![0.0; (lh + 1) * width];
        let mut sum_sq = vec![0.0; (lh + 1) * width];
        for u in 0..lh {
            let (mut row_s, mut row_q) = (0.0f64, 0.0f64);
            for v in 0..lw {
                let i = (u * lw + v) * 3;
                for c in 0..3 {
                    let x = level[i + c] as f64;
                    row_s += x;
                    row_q += x * x;
                }
                sum[(u + 1) * width + v + 1] = sum[u * width + v + 1] + row_s;
                sum_sq[(u + 1) * width + v + 1] = sum_sq[u * width + v + 1] + row_q;
            }
        }
        Self { width, sum, sum_sq }
    }

    fn window(&self, u: usize, v: usize, h: usize, w: usize) -> (f64, f64) {
        let at = |t: &[f64], a: usize, b: usize| t[a * self.width + b];
        let rect = |t: &[f64]| at(t, u + h, v + w) - at(t, u, v + w) - at(t, u + h, v) + at(t, u, v);
        (rect(&self.sum), rect(&self.sum_sq))
    }
}

/// Upscales a canonical pattern by pixel replication; a copy pasted at a
/// stride-aligned position is an exact instance at that scale.
pub fn render_template(pattern: &ImageTensor, scale: usize) -> ImageTensor {
    ImageTensor::from_fn(pattern.height() * scale, pattern.width() * scale, |x, y| {
        pattern.pixel(x / scale, y / scale)
    })
    .expect("scaled template is non-empty")
}
