//! Synthetic scenes for desk-scale runs against the mock detector.
//!
//! Backgrounds are smooth value noise around a base color plus fine grain.
//! Objects are detector templates rendered at one of the detector's scales
//! and pasted at stride-aligned positions, so the planted set is exact
//! ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagecore::{ImageTensor, RegionRect};
use crate::oracle::{MockDetectorConfig, Template};

pub use crate::oracle::standard_templates;

/// Working size used throughout the toolkit.
pub const WORKING_SIZE: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStyle {
    pub base: [u8; 3],
    /// Peak amplitude of the smooth texture, intensity units.
    pub texture_amplitude: f64,
    /// Lattice spacing of the smooth texture, pixels.
    pub texture_scale: usize,
    /// Peak amplitude of independent per-pixel grain.
    pub grain: f64,
}

impl SceneStyle {
    pub fn flat(base: [u8; 3]) -> Self {
        Self {
            base,
            texture_amplitude: 0.0,
            texture_scale: 64,
            grain: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedObject {
    pub label: String,
    pub bbox: RegionRect,
}

pub fn background<R: Rng + ?Sized>(height: usize, width: usize, style: &SceneStyle, rng: &mut R) -> ImageTensor {
    let s = style.texture_scale.max(1);
    let (gh, gw) = (height / s + 2, width / s + 2);
    let lattice: Vec<[f64; 3]> = (0..gh * gw)
        .map(|_| {
            // Mostly luminance with a little chroma.
            let l: f64 = rng.gen_range(-1.0..=1.0);
            std::array::from_fn(|_| 0.8 * l + 0.2 * rng.gen_range(-1.0..=1.0))
        })
        .collect();
    let mut grain_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    ImageTensor::from_fn(height, width, |x, y| {
        let (gx, gy) = (x as f64 / s as f64, y as f64 / s as f64);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let at = |u: usize, v: usize| lattice[v * gw + u];
        std::array::from_fn(|c| {
            let top = at(ix, iy)[c] * (1.0 - fx) + at(ix + 1, iy)[c] * fx;
            let bot = at(ix, iy + 1)[c] * (1.0 - fx) + at(ix + 1, iy + 1)[c] * fx;
            let n = top * (1.0 - fy) + bot * fy;
            let g = if style.grain > 0.0 {
                grain_rng.gen_range(-style.grain..=style.grain)
            } else {
                0.0
            };
            (style.base[c] as f64 + style.texture_amplitude * n + g).round().clamp(0.0, 255.0) as u8
        })
    })
    .expect("positive scene size")
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Renders `template` at `scale` and pastes it with its top-left at `(x, y)`.
pub fn plant(img: &mut ImageTensor, template: &Template, scale: usize, x: usize, y: usize) -> PlantedObject {
    let obj = crate::oracle::render_template(&template.pattern, scale);
    let bbox = RegionRect::with_size(x, y, obj.width(), obj.height()).expect("non-empty object");
    img.paste_in_place(&obj, &bbox).expect("object inside scene");
    PlantedObject {
        label: template.label.clone(),
        bbox,
    }
}

/// Pastes up to `count` templates at random stride-aligned, pairwise
/// separated positions. Returns the planted ground truth.
pub fn scatter_objects<R: Rng + ?Sized>(
    img: &mut ImageTensor,
    detector: &MockDetectorConfig,
    count: usize,
    rng: &mut R,
) -> Vec<PlantedObject> {
    let mut planted: Vec<PlantedObject> = Vec::new();
    let stride = detector.stride.max(1);
    let (th, tw) = detector.templates[0].pattern.dims();
    let mut attempts = 0;
    while planted.len() < count && attempts < count * 200 {
        attempts += 1;
        let scale = *detector.scales.choose(rng).expect("scales validated non-empty");
        let (oh, ow) = (th * scale, tw * scale);
        if oh > img.height() || ow > img.width() {
            continue;
        }
        let x = rng.gen_range(0..=(img.width() - ow) / stride) * stride;
        let y = rng.gen_range(0..=(img.height() - oh) / stride) * stride;
        // Keep a margin so neighbours never share a correlation window.
        let margin = stride;
        let padded = RegionRect::new(
            x.saturating_sub(margin),
            y.saturating_sub(margin),
            x + ow + margin,
            y + oh + margin,
        )
        .expect("non-empty");
        if planted.iter().any(|p| p.bbox.intersection_area(&padded) > 0) {
            continue;
        }
        let template = detector.templates.choose(rng).expect("templates validated non-empty");
        planted.push(plant(img, template, scale, x, y));
    }
    planted
}

/// A harvesting corpus image: gently textured background with `objects`
/// planted templates.
pub fn corpus_image<R: Rng + ?Sized>(
    detector: &MockDetectorConfig,
    objects: usize,
    rng: &mut R,
) -> (ImageTensor, Vec<PlantedObject>) {
    let style = SceneStyle {
        base: std::array::from_fn(|_| rng.gen_range(90..=170)),
        texture_amplitude: 12.0,
        texture_scale: 96,
        grain: 3.0,
    };
    let mut img = background(WORKING_SIZE, WORKING_SIZE, &style, rng);
    let planted = scatter_objects(&mut img, detector, objects, rng);
    (img, planted)
}

/// `count` corpus images with ids `corpus_0000`, `corpus_0001`, ...
pub fn synthetic_corpus(
    detector: &MockDetectorConfig,
    count: usize,
    objects_per_image: usize,
    seed: u64,
) -> Vec<(String, ImageTensor, Vec<PlantedObject>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (img, planted) = corpus_image(detector, objects_per_image, &mut rng);
            (format!("corpus_{i:04}"), img, planted)
        })
        .collect()
}

/// An attack target: a textured natural-looking background with two real
/// objects. Texture strength varies per seed, which is what makes small
/// perturbation radii harder.
pub fn synthetic_target(detector: &MockDetectorConfig, seed: u64) -> (ImageTensor, Vec<PlantedObject>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a12_9e37_79b9_7f4a);
    let style = SceneStyle {
        base: std::array::from_fn(|_| rng.gen_range(80..=180)),
        texture_amplitude: rng.gen_range(20.0..=70.0),
        texture_scale: rng.gen_range(24..=64),
        grain: rng.gen_range(2.0..=8.0),
    };
    let mut img = background(WORKING_SIZE, WORKING_SIZE, &style, &mut rng);
    let planted = scatter_objects(&mut img, detector, 2, &mut rng);
    (img, planted)
}

/// `count` targets with ids `target_00`, `target_01`, ...
pub fn synthetic_targets(detector: &MockDetectorConfig, count: usize, seed: u64) -> Vec<(String, ImageTensor)> {
    (0..count)
        .map(|i| {
            let (img, _) = synthetic_target(detector, seed.wrapping_add(i as u64));
            (format!("target_{i:02}"), img)
        })
        .collect()
}
