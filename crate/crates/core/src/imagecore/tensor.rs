use serde::{Deserialize, Serialize};

use super::ImageError;

/// Axis-aligned pixel rectangle, half-open: `[x0, x1) × [y0, y1)`.
///
/// Serialized as `[x0, y0, x1, y1]`, which is also the wire-protocol box
/// layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct RegionRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self, ImageError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(ImageError::EmptyRegion { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Rectangle of `width × height` anchored at `(x, y)`.
    pub fn with_size(x: usize, y: usize, width: usize, height: usize) -> Result<Self, ImageError> {
        Self::new(x, y, x + width, y + height)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersection_area(&self, other: &RegionRect) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &RegionRect) -> f64 {
        let inter = self.intersection_area(other) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl TryFrom<[usize; 4]> for RegionRect {
    type Error = ImageError;

    fn try_from(v: [usize; 4]) -> Result<Self, Self::Error> {
        RegionRect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<RegionRect> for [usize; 4] {
    fn from(r: RegionRect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

/// An RGB image with 8-bit channels, stored row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawImage")]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

#[derive(Deserialize)]
struct RawImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl TryFrom<RawImage> for ImageTensor {
    type Error = ImageError;

    fn try_from(raw: RawImage) -> Result<Self, Self::Error> {
        ImageTensor::from_raw(raw.height, raw.width, raw.data)
    }
}

impl ImageTensor {
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::ZeroDimension { height, width });
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::BufferLength {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::from_raw(height, width, data)
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn full_region(&self) -> RegionRect {
        RegionRect {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn check_same_dims(&self, other: &ImageTensor) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    pub fn check_region(&self, region: &RegionRect) -> Result<(), ImageError> {
        if !region.fits(self.width, self.height) {
            return Err(ImageError::RegionOutOfBounds {
                region: *region,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    pub fn crop(&self, region: &RegionRect) -> Result<ImageTensor, ImageError> {
        self.check_region(region)?;
        let mut data = Vec::with_capacity(region.area() * 3);
        for y in region.y0..region.y1 {
            let start = self.index(region.x0, y);
            data.extend_from_slice(&self.data[start..start + region.width() * 3]);
        }
        ImageTensor::from_raw(region.height(), region.width(), data)
    }

    /// Writes `patch` into `region` in place.
    pub fn paste_in_place(&mut self, patch: &ImageTensor, region: &RegionRect) -> Result<(), ImageError> {
        self.check_region(region)?;
        if patch.dims() != (region.height(), region.width()) {
            return Err(ImageError::DimensionMismatch {
                left: patch.dims(),
                right: (region.height(), region.width()),
            });
        }
        let row = region.width() * 3;
        for (k, y) in (region.y0..region.y1).enumerate() {
            let start = self.index(region.x0, y);
            self.data[start..start + row].copy_from_slice(&patch.data[k * row..(k + 1) * row]);
        }
        Ok(())
    }
}

/// Signed per-channel difference between an adversarial image and its base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    height: usize,
    width: usize,
    data: Vec<i16>,
}

impl Perturbation {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<i16>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::ZeroDimension { height, width });
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::BufferLength {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| !(-255..=255).contains(*v)) {
            return Err(ImageError::DeltaOutOfRange(v));
        }
        Ok(Self { height, width, data })
    }

    /// `adv − base`, channel by channel.
    pub fn between(adv: &ImageTensor, base: &ImageTensor) -> Result<Self, ImageError> {
        adv.check_same_dims(base)?;
        let data = adv
            .data()
            .iter()
            .zip(base.data())
            .map(|(&a, &b)| a as i16 - b as i16)
            .collect();
        Ok(Self {
            height: adv.height(),
            width: adv.width(),
            data,
        })
    }

    /// Composes `base + self`, clamping every channel into `[0, 255]`.
    pub fn apply(&self, base: &ImageTensor) -> Result<ImageTensor, ImageError> {
        if base.dims() != self.dims() {
            return Err(ImageError::DimensionMismatch {
                left: base.dims(),
                right: self.dims(),
            });
        }
        let data = base
            .data()
            .iter()
            .zip(&self.data)
            .map(|(&b, &d)| (b as i16 + d).clamp(0, 255) as u8)
            .collect();
        ImageTensor::from_raw(self.height, self.width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn max_abs(&self) -> u16 {
        self.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Positions holding a nonzero delta.
    pub fn active_mask(&self) -> PixelMask {
        PixelMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v != 0).collect(),
        }
    }
}

/// Per-pixel, per-channel boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<bool>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 {
            return Err(ImageError::BufferLength {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }
}

/// Per-channel color mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ColorStats {
    /// Mean absolute difference of the per-channel means.
    pub fn mean_distance(&self, other: &ColorStats) -> f64 {
        (0..3).map(|c| (self.mean[c] - other.mean[c]).abs()).sum::<f64>() / 3.0
    }

    pub fn mean_rgb(&self) -> [u8; 3] {
        self.mean.map(|m| m.round().clamp(0.0, 255.0) as u8)
    }
}
