//! Square multi-channel images with intensities in `[0, 1]`.
//!
//! Pixels are stored channel-major (`C × H × W`), which is the layout the
//! network layers consume directly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Result, TendError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Id,
    Ood,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Id => "ID",
            Label::Ood => "OOD",
            Label::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = TendError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ID" => Ok(Label::Id),
            "OOD" => Ok(Label::Ood),
            "UNKNOWN" | "" => Ok(Label::Unknown),
            other => Err(TendError::Data(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    ValGenerated,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Test => "TEST",
            Split::ValGenerated => "VAL_GENERATED",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = TendError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "TEST" => Ok(Split::Test),
            "VAL_GENERATED" => Ok(Split::ValGenerated),
            other => Err(TendError::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// One square image plus the metadata that travels with it through every pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    side: usize,
    channels: usize,
    pixels: Vec<f64>,
    pub label: Label,
    pub split: Split,
    pub source_id: String,
}

impl ImageSample {
    /// Builds a sample from channel-major pixels. Intensities must lie in `[0, 1]`.
    pub fn new(
        side: usize,
        channels: usize,
        pixels: Vec<f64>,
        label: Label,
        split: Split,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if side == 0 {
            return Err(TendError::Parameter("image side must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(TendError::Parameter(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != side * side * channels {
            return Err(TendError::shape(
                format!("{channels}x{side}x{side} = {}", side * side * channels),
                pixels.len(),
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TendError::Data(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            side,
            channels,
            pixels,
            label,
            split,
            source_id: source_id.into(),
        })
    }

    /// Constant image, mostly useful in tests.
    pub fn filled(side: usize, channels: usize, value: f64) -> Self {
        Self {
            side,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); side * side * channels],
            label: Label::Id,
            split: Split::Train,
            source_id: String::new(),
        }
    }

    /// Builds an image by evaluating `f(channel, y, x)` at every pixel; values are clamped.
    pub fn from_fn(side: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(side * side * channels);
        for c in 0..channels {
            for y in 0..side {
                for x in 0..side {
                    pixels.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            side,
            channels,
            pixels,
            label: Label::Id,
            split: Split::Train,
            source_id: String::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.side + y) * self.side + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.side * self.side;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Same metadata, new pixels (clamped to `[0, 1]`).
    pub(crate) fn with_pixels(&self, mut pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            side: self.side,
            channels: self.channels,
            pixels,
            label: self.label,
            split: self.split,
            source_id: self.source_id.clone(),
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Bilinear sample at continuous pixel coordinates, where pixel `(x, y)` has its
    /// center at `(x, y)`. Coordinates outside the image footprint
    /// (`[-0.5, side - 0.5]` on both axes) are virtual pixels and return `None`.
    #[inline]
    pub fn sample(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        let lim = self.side as f64 - 0.5;
        if !(x >= -0.5 && x <= lim && y >= -0.5 && y <= lim) {
            return None;
        }
        Some(self.sample_clamped(c, x, y))
    }

    /// Bilinear sample with edge replication for any coordinate.
    #[inline]
    pub fn sample_clamped(&self, c: usize, x: f64, y: f64) -> f64 {
        let max = (self.side - 1) as f64;
        let x = x.clamp(0.0, max);
        let y = y.clamp(0.0, max);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.side - 1);
        let y1 = (y0 + 1).min(self.side - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = (1.0 - fx) * self.get(c, y0, x0) + fx * self.get(c, y0, x1);
        let bottom = (1.0 - fx) * self.get(c, y1, x0) + fx * self.get(c, y1, x1);
        (1.0 - fy) * top + fy * bottom
    }

    /// Bilinear resize to `side × side` (pixel-center aligned).
    pub fn resized(&self, side: usize) -> Self {
        if side == self.side {
            return self.clone();
        }
        let scale = self.side as f64 / side as f64;
        let mut pixels = Vec::with_capacity(side * side * self.channels);
        for c in 0..self.channels {
            for y in 0..side {
                let sy = (y as f64 + 0.5) * scale - 0.5;
                for x in 0..side {
                    let sx = (x as f64 + 0.5) * scale - 0.5;
                    pixels.push(self.sample_clamped(c, sx, sy));
                }
            }
        }
        Self {
            side,
            channels: self.channels,
            pixels,
            label: self.label,
            split: self.split,
            source_id: self.source_id.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Mean absolute per-pixel difference. Panics on shape mismatch.
    pub fn mean_abs_diff(&self, other: &ImageSample) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len(), "shape mismatch");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    /// Converts a decoded image, coercing the channel count and resizing to `side`.
    /// Grayscale sources are replicated to three channels when `channels == 3`.
    pub fn from_dynamic(img: &DynamicImage, channels: usize, side: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(TendError::Data("empty image".into()));
        }
        let planes: Vec<Vec<f64>> = if channels == 1 {
            let g = img.to_luma8();
            vec![g.pixels().map(|p| to_unit(p.0[0])).collect()]
        } else {
            let rgb = img.to_rgb8();
            (0..3)
                .map(|c| rgb.pixels().map(|p| to_unit(p.0[c])).collect())
                .collect()
        };
        // Non-square sources are resampled straight to side × side (aspect discarded).
        let mut pixels = Vec::with_capacity(side * side * channels);
        let sx_scale = w as f64 / side as f64;
        let sy_scale = h as f64 / side as f64;
        for plane in &planes {
            for y in 0..side {
                let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
                for x in 0..side {
                    let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
                    pixels.push(bilinear_plane(plane, w, h, sx, sy));
                }
            }
        }
        ImageSample::new(side, channels, pixels, Label::Unknown, Split::Test, "")
    }

    pub fn load_png(path: &Path, channels: usize, side: usize) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img, channels, side)?.with_source_id(path.display().to_string()))
    }

    /// Loads at the file's own size; non-square images are stretched to the longer side.
    pub fn load_native(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        let side = img.width().max(img.height()) as usize;
        Ok(Self::from_dynamic(&img, channels, side)?.with_source_id(path.display().to_string()))
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let s = self.side as u32;
        if self.channels == 1 {
            let buf = ImageBuffer::from_fn(s, s, |x, y| {
                Luma([to_u8(self.get(0, y as usize, x as usize))])
            });
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf = ImageBuffer::from_fn(s, s, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ])
            });
            DynamicImage::ImageRgb8(buf)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save(path)?;
        Ok(())
    }
}

fn bilinear_plane(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
    let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
    (1.0 - fy) * top + fy * bottom
}

/// 8-bit code to unit intensity.
#[inline]
pub fn to_unit(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Unit intensity to 8-bit code, rounding half up.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_intensity() {
        let err = ImageSample::new(2, 1, vec![0.0, 0.5, 1.0, 1.5], Label::Id, Split::Train, "x");
        assert!(matches!(err, Err(TendError::Data(_))));
    }

    #[test]
    fn rejects_wrong_pixel_count() {
        let err = ImageSample::new(2, 3, vec![0.0; 4], Label::Id, Split::Train, "x");
        assert!(matches!(err, Err(TendError::Shape { .. })));
    }

    #[test]
    fn integer_coordinates_sample_exactly() {
        let img = ImageSample::from_fn(5, 1, |_, y, x| (y * 5 + x) as f64 / 25.0);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(img.sample(0, x as f64, y as f64), Some(img.get(0, y, x)));
            }
        }
        assert_eq!(img.sample(0, -0.6, 0.0), None);
        assert_eq!(img.sample(0, 4.6, 0.0), None);
        assert!(img.sample(0, 4.5, -0.5).is_some());
    }

    #[test]
    fn u8_conversion_rounds_half_up() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5), 128); // 127.5 rounds up
        for v in 0..=255u8 {
            assert_eq!(to_u8(to_unit(v)), v);
        }
    }

    #[test]
    fn grayscale_replicates_to_three_channels() {
        let gray = DynamicImage::ImageLuma8(ImageBuffer::from_fn(4, 4, |x, _| Luma([(x * 60) as u8])));
        let img = ImageSample::from_dynamic(&gray, 3, 4).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.channel(0), img.channel(1));
        assert_eq!(img.channel(1), img.channel(2));
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = ImageSample::filled(7, 1, 0.3);
        let r = img.resized(16);
        assert!(r.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
