//! Pixel-level primitives shared by every other module.
//!
//! Everything works in the integer `0..=255` intensity domain. Perturbation
//! radii are integer intensities and are applied per channel.

mod codec;
mod tensor;
mod transform;

pub use codec::{decode_image, encode_png, load_image, save_image};
pub use tensor::{ColorStats, ImageTensor, Perturbation, PixelMask, RegionRect};
pub use transform::{color_transform, ColorTransform};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    ZeroDimension { height: usize, width: usize },
    #[error("pixel buffer has {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("empty region [{x0},{x1})x[{y0},{y1})")]
    EmptyRegion {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    #[error("region {region:?} outside {height}x{width} image")]
    RegionOutOfBounds {
        region: RegionRect,
        height: usize,
        width: usize,
    },
    #[error("perturbation value {0} outside [-255, 255]")]
    DeltaOutOfRange(i16),
    #[error("invalid transform parameters: {0}")]
    InvalidTransform(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("encode error: {0}")]
    Encode(String),
}

/// Largest absolute channel difference between two images.
pub fn linf_distance(a: &ImageTensor, b: &ImageTensor) -> Result<u8, ImageError> {
    a.check_same_dims(b)?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| p.abs_diff(q))
        .max()
        .unwrap_or(0))
}

/// Projects `adv` onto the L∞ ball of `radius` around `orig` (channel-wise),
/// intersected with the valid intensity range.
pub fn clamp_ball(adv: &ImageTensor, orig: &ImageTensor, radius: u8) -> Result<ImageTensor, ImageError> {
    adv.check_same_dims(orig)?;
    let data = adv
        .data()
        .iter()
        .zip(orig.data())
        .map(|(&a, &o)| a.clamp(o.saturating_sub(radius), o.saturating_add(radius)))
        .collect();
    ImageTensor::from_raw(adv.height(), adv.width(), data)
}

/// Returns a copy of `img` with `region` overwritten by `patch`.
pub fn paste_patch(img: &ImageTensor, patch: &ImageTensor, region: &RegionRect) -> Result<ImageTensor, ImageError> {
    let mut out = img.clone();
    out.paste_in_place(patch, region)?;
    Ok(out)
}

/// Per-channel mean and population standard deviation over `region`.
pub fn color_stats(img: &ImageTensor, region: &RegionRect) -> Result<ColorStats, ImageError> {
    img.check_region(region)?;
    let n = region.area() as f64;
    if n == 0.0 {
        return Err(ImageError::EmptyRegion {
            x0: region.x0,
            y0: region.y0,
            x1: region.x1,
            y1: region.y1,
        });
    }
    // Integer sums are exact, so the single pass loses nothing.
    let mut sum = [0u64; 3];
    let mut sum_sq = [0u64; 3];
    for y in region.y0..region.y1 {
        let start = img.index(region.x0, y);
        for px in img.data()[start..start + region.width() * 3].chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as u64;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] as f64 / n;
        let var = (sum_sq[c] as f64 / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt();
    }
    Ok(ColorStats { mean, std })
}

/// Bilinear resize using half-pixel centers (`align_corners = false`):
/// output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to the edge. Values round half away from zero.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor, ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::ZeroDimension { height, width });
    }
    if img.dims() == (height, width) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(width, img.width());
    let ys = taps(height, img.height());
    let src = img.data();
    let mut data = Vec::with_capacity(height * width * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |x: usize, y: usize| src[img.index(x, y) + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageTensor::from_raw(height, width, data)
}
