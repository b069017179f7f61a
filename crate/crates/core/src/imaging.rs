//! RGB rasters, luminance statistics, domain augmentations and the
//! statistic-gated visibility boost.
//!
//! Channels are reals in `[0, 1]`. Every transform returns a new image of
//! the same size with channels clamped back into range.

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::math::clamp01;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
pub const RAIN_LUMA: f64 = 0.85;

pub type Rgb = [f64; 3];

pub fn luma(p: &Rgb) -> f64 {
    LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageError {
    SizeMismatch { width: usize, height: usize, pixels: usize },
    Empty,
    OutOfRange { index: usize },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::SizeMismatch { width, height, pixels } => {
                write!(f, "{width}x{height} image needs {} pixels, got {pixels}", width * height)
            }
            ImageError::Empty => f.write_str("image has no pixels"),
            ImageError::OutOfRange { index } => write!(f, "pixel {index} has a channel outside [0, 1]"),
        }
    }
}

impl core::error::Error for ImageError {}

/// Row-major RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        if pixels.len() != width * height {
            return Err(ImageError::SizeMismatch { width, height, pixels: pixels.len() });
        }
        if let Some(index) = pixels.iter().position(|p| p.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(ImageError::OutOfRange { index });
        }
        Ok(Self { width, height, pixels })
    }

    /// Uniform image; `rgb` is clamped into range.
    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, pixels: alloc::vec![rgb.map(clamp01); width * height] }
    }

    /// Builds an image pixel by pixel; values are clamped.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).map(clamp01));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: Rgb) {
        self.pixels[y * self.width + x] = rgb.map(clamp01);
    }

    /// Applies `f` to every channel value and clamps the result.
    pub fn map_channels(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.map_pixels(|p| p.map(&mut f))
    }

    pub fn map_pixels(&self, mut f: impl FnMut(Rgb) -> Rgb) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p).map(clamp01)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// PPM

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PpmError {
    UnsupportedMagic { offset: usize, found: [u8; 2] },
    MalformedHeader { offset: usize, reason: &'static str },
    UnsupportedMaxval { offset: usize, maxval: u32 },
    Truncated { offset: usize, expected: usize, found: usize },
}

impl fmt::Display for PpmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PpmError::UnsupportedMagic { offset, found } => write!(
                f,
                "unsupported magic {:?} at byte {offset}, expected \"P6\"",
                core::str::from_utf8(found).unwrap_or("<binary>")
            ),
            PpmError::MalformedHeader { offset, reason } => write!(f, "malformed PPM header at byte {offset}: {reason}"),
            PpmError::UnsupportedMaxval { offset, maxval } => {
                write!(f, "unsupported maxval {maxval} at byte {offset}, only 255 is accepted")
            }
            PpmError::Truncated { offset, expected, found } => {
                write!(f, "pixel data truncated at byte {offset}: expected {expected} bytes, found {found}")
            }
        }
    }
}

impl core::error::Error for PpmError {}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<(usize, u32), PpmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: u32 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u32::from(b - b'0')))
                .ok_or(PpmError::MalformedHeader { offset: start, reason: "number too large" })?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PpmError::MalformedHeader { offset: start, reason: what });
        }
        Ok((start, value))
    }
}

/// Decodes a binary PPM (`P6`, maxval 255).
pub fn parse_ppm(bytes: &[u8]) -> Result<Image, PpmError> {
    if bytes.len() < 2 {
        let mut found = [0u8; 2];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(PpmError::UnsupportedMagic { offset: 0, found });
    }
    if &bytes[..2] != b"P6" {
        return Err(PpmError::UnsupportedMagic { offset: 0, found: [bytes[0], bytes[1]] });
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(PpmError::MalformedHeader { offset: 2, reason: "expected whitespace after magic" });
    }
    let (woff, width) = cur.number("expected width")?;
    let (hoff, height) = cur.number("expected height")?;
    let (moff, maxval) = cur.number("expected maxval")?;
    if width == 0 {
        return Err(PpmError::MalformedHeader { offset: woff, reason: "width must be positive" });
    }
    if height == 0 {
        return Err(PpmError::MalformedHeader { offset: hoff, reason: "height must be positive" });
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval { offset: moff, maxval });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PpmError::MalformedHeader { offset: cur.pos, reason: "expected single whitespace before pixel data" }),
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or(PpmError::MalformedHeader { offset: woff, reason: "image dimensions overflow" })?;
    let data = &bytes[cur.pos..];
    if data.len() < expected {
        return Err(PpmError::Truncated { offset: cur.pos + data.len(), expected, found: data.len() });
    }
    let pixels = data[..expected]
        .chunks_exact(3)
        .map(|c| [f64::from(c[0]) / 255.0, f64::from(c[1]) / 255.0, f64::from(c[2]) / 255.0])
        .collect();
    Ok(Image { width, height, pixels })
}

pub fn quantize(v: f64) -> u8 {
    libm::round(clamp01(v) * 255.0) as u8
}

/// Encodes as binary PPM with a minimal header.
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let header = alloc::format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len() * 3);
    out.extend_from_slice(header.as_bytes());
    for p in &img.pixels {
        out.extend(p.iter().map(|&c| quantize(c)));
    }
    out
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LuminanceStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn luminance_stats(img: &Image) -> LuminanceStats {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(luma).sum::<f64>() / n;
    let var = img.pixels.iter().map(|p| (luma(p) - mean) * (luma(p) - mean)).sum::<f64>() / n;
    LuminanceStats { mean: clamp01(mean), std: libm::sqrt(var.max(0.0)) }
}

// ---------------------------------------------------------------------------
// Augmentations

pub fn adjust_brightness(img: &Image, delta: f64) -> Image {
    img.map_channels(|v| v + delta)
}

pub fn adjust_contrast(img: &Image, gain: f64, pivot: f64) -> Image {
    img.map_channels(|v| (v - pivot) * gain + pivot)
}

pub fn color_temperature(img: &Image, r_gain: f64, g_gain: f64, b_gain: f64) -> Image {
    img.map_pixels(|[r, g, b]| [r * r_gain, g * g_gain, b * b_gain])
}

/// Darkening: `scale * v^gamma`.
pub fn augment_night(img: &Image, gamma: f64, scale: f64) -> Image {
    img.map_channels(|v| scale * libm::pow(v, gamma))
}

/// Blend toward a uniform haze of luma `fog_luma`.
pub fn augment_fog(img: &Image, alpha: f64, fog_luma: f64) -> Image {
    img.map_channels(|v| (1.0 - alpha) * v + alpha * fog_luma)
}

/// Draws `streak_count` anti-aliased one-pixel rain streaks.
///
/// Streaks are near-vertical segments blended toward [`RAIN_LUMA`]; pixels
/// already brighter than that are left untouched, so the mean luminance
/// never drops.
pub fn augment_rain(img: &Image, streak_count: usize, seed: u64) -> Image {
    if streak_count == 0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coverage = alloc::vec![0.0f64; w * h];
    let mut splat = |x: i64, y: i64, c: f64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            let cell = &mut coverage[y as usize * w + x as usize];
            *cell = cell.max(c);
        }
    };
    for _ in 0..streak_count {
        let x0 = rng.random::<f64>() * w as f64;
        let y0 = rng.random::<f64>() * h as f64;
        let length = (0.1 + 0.15 * rng.random::<f64>()) * h as f64 + 2.0;
        let slant = libm::tan((rng.random::<f64>() - 0.5) * 0.7);
        // one sample per row keeps the stroke one pixel wide
        let rows = libm::ceil(length) as i64;
        for k in 0..rows {
            let yc = y0 + k as f64;
            let xc = x0 + slant * k as f64 - 0.5;
            let xi = libm::floor(xc);
            let frac = xc - xi;
            let y = libm::floor(yc) as i64;
            splat(xi as i64, y, 1.0 - frac);
            splat(xi as i64 + 1, y, frac);
        }
    }
    let mut out = img.clone();
    for (p, &c) in out.pixels.iter_mut().zip(&coverage) {
        if c > 0.0 {
            *p = p.map(|v| if v < RAIN_LUMA { v + c * (RAIN_LUMA - v) } else { v });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Visibility boost

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct VisibilityConfig {
    /// Frames brighter than this on average...
    pub mean_threshold: f64,
    /// ...and flatter than this are boosted.
    pub std_threshold: f64,
    pub target_std: f64,
    pub max_gain: f64,
    pub brightness_clip: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self { mean_threshold: 0.55, std_threshold: 0.12, target_std: 0.20, max_gain: 3.0, brightness_clip: 0.2 }
    }
}

impl VisibilityConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.std_threshold > 0.0 && self.std_threshold < self.target_std) {
            return Err("visibility thresholds need 0 < std_threshold < target_std");
        }
        if !(self.max_gain >= 1.0) {
            return Err("visibility max_gain must be at least 1");
        }
        if !(self.brightness_clip >= 0.0) {
            return Err("visibility brightness_clip must be non-negative");
        }
        Ok(())
    }
}

/// Contrast-stretches and re-centers hazy frames (bright mean, low spread).
/// Returns the input unchanged with `false` when the gate does not fire.
pub fn visibility_boost(img: &Image, cfg: &VisibilityConfig) -> (Image, bool) {
    let stats = luminance_stats(img);
    if !(stats.mean > cfg.mean_threshold && stats.std < cfg.std_threshold) {
        return (img.clone(), false);
    }
    let gain = cfg.max_gain.min(cfg.target_std / stats.std.max(1e-6));
    let stretched = adjust_contrast(img, gain, stats.mean);
    let delta = (0.5 - stats.mean).clamp(-cfg.brightness_clip, cfg.brightness_clip);
    (adjust_brightness(&stretched, delta), true)
}
