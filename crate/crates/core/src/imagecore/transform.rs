use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageError, ImageTensor};

/// Color augmentations applied during harvesting and patch generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColorTransform {
    Identity,
    /// Random brightness and contrast factors drawn from `[1 - b, 1 + b]`
    /// and `[1 - c, 1 + c]`.
    Jitter { brightness: f64, contrast: f64 },
    /// Per-channel histogram equalization.
    Equalize,
    /// Keep the top `bits` bits of each channel.
    Posterize { bits: u8 },
}

impl ColorTransform {
    pub const DEFAULT_JITTER: ColorTransform = ColorTransform::Jitter {
        brightness: 0.4,
        contrast: 0.4,
    };

    /// Short tag recorded as augmentation provenance.
    pub fn tag(&self) -> &'static str {
        match self {
            ColorTransform::Identity => "none",
            ColorTransform::Jitter { .. } => "jitter",
            ColorTransform::Equalize => "equalize",
            ColorTransform::Posterize { .. } => "posterize",
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        match *self {
            ColorTransform::Jitter { brightness, contrast } => {
                if !(0.0..=1.0).contains(&brightness) || !(0.0..=1.0).contains(&contrast) {
                    return Err(ImageError::InvalidTransform(format!(
                        "jitter factors must lie in [0, 1], got brightness={brightness} contrast={contrast}"
                    )));
                }
            }
            ColorTransform::Posterize { bits } if !(1..=8).contains(&bits) => {
                return Err(ImageError::InvalidTransform(format!(
                    "posterize bits must lie in [1, 8], got {bits}"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for ColorTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColorTransform::Jitter { brightness, contrast } => write!(f, "jitter:{brightness}:{contrast}"),
            ColorTransform::Posterize { bits } => write!(f, "posterize:{bits}"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for ColorTransform {
    type Err = ImageError;

    /// Accepts `none`, `identity`, `equalize`, `jitter[:b[:c]]`,
    /// `posterize[:bits]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase();
        let num = |p: Option<&str>, default: f64| -> Result<f64, ImageError> {
            p.map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| ImageError::InvalidTransform(format!("bad number {v:?} in {s:?}")))
            })
        };
        let t = match head.as_str() {
            "none" | "identity" => ColorTransform::Identity,
            "equalize" => ColorTransform::Equalize,
            "jitter" => {
                let brightness = num(parts.next(), 0.4)?;
                let contrast = num(parts.next(), brightness)?;
                ColorTransform::Jitter { brightness, contrast }
            }
            "posterize" => ColorTransform::Posterize {
                bits: num(parts.next(), 3.0)? as u8,
            },
            _ => return Err(ImageError::InvalidTransform(format!("unknown transform {s:?}"))),
        };
        t.validate()?;
        Ok(t)
    }
}

/// Applies `transform` to `img`. Only `Jitter` draws from `rng`.
pub fn color_transform<R: Rng + ?Sized>(
    img: &ImageTensor,
    transform: &ColorTransform,
    rng: &mut R,
) -> Result<ImageTensor, ImageError> {
    transform.validate()?;
    let data = match *transform {
        ColorTransform::Identity => return Ok(img.clone()),
        ColorTransform::Posterize { bits } => {
            let mask = 0xFFu8 << (8 - bits as u32);
            img.data().iter().map(|&v| v & mask).collect()
        }
        ColorTransform::Equalize => equalize(img),
        ColorTransform::Jitter { brightness, contrast } => {
            let bf = if brightness > 0.0 {
                rng.gen_range(1.0 - brightness..=1.0 + brightness)
            } else {
                1.0
            };
            let cf = if contrast > 0.0 {
                rng.gen_range(1.0 - contrast..=1.0 + contrast)
            } else {
                1.0
            };
            jitter(img, bf, cf)
        }
    };
    ImageTensor::from_raw(img.height(), img.width(), data)
}

fn jitter(img: &ImageTensor, brightness: f64, contrast: f64) -> Vec<u8> {
    let bright: Vec<f64> = img.data().iter().map(|&v| (v as f64 * brightness).clamp(0.0, 255.0)).collect();
    // Contrast pivots around the mean luma of the brightness-adjusted image.
    let luma_sum: f64 = bright
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .sum();
    let pivot = luma_sum / (img.height() * img.width()) as f64;
    bright
        .iter()
        .map(|&v| ((v - pivot) * contrast + pivot).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn equalize(img: &ImageTensor) -> Vec<u8> {
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let mut hist = [0usize; 256];
        for px in img.data().chunks_exact(3) {
            hist[px[c] as usize] += 1;
        }
        let total: usize = hist.iter().sum();
        let last = hist.iter().rev().find(|&&h| h > 0).copied().unwrap_or(0);
        let step = (total - last) / 255;
        if step == 0 {
            for (i, v) in lut.iter_mut().enumerate() {
                *v = i as u8;
            }
            continue;
        }
        let mut n = step / 2;
        for (i, v) in lut.iter_mut().enumerate() {
            *v = (n / step).min(255) as u8;
            n += hist[i];
        }
    }
    img.data()
        .chunks_exact(3)
        .flat_map(|px| [luts[0][px[0] as usize], luts[1][px[1] as usize], luts[2][px[2] as usize]])
        .collect()
}
