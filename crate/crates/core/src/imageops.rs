//! Pixel-level augmentation operations.
//!
//! Every operation is a pure function of its inputs. The two operations that
//! need extra randomness (the Cutout patch position and the SamplePairing
//! partner image) take it as explicit arguments through [`OpArgs`]; drawing
//! those values is the job of [`crate::policy`].
//!
//! Magnitudes are normalized to `λ ∈ [0, 1]` and mapped to concrete
//! parameters by [`magnitude_map`]. Signed operations are centered so that
//! `λ = 0.5` is the identity; one-sided ones are the identity at `λ = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gray used for out-of-bounds geometric samples and Cutout patches.
pub const FILL: [u8; 3] = [128, 128, 128];

const MAX_SHEAR: f64 = 0.3;
const MAX_TRANSLATE: f64 = 0.3125;
const MAX_ROTATE_DEG: f64 = 30.0;
const ENHANCE_RANGE: f64 = 0.9;
const MAX_PAIRING_WEIGHT: f64 = 0.4;
const HEADER_LEN: usize = 16;

/// A fixed-size byte image with its class label.
///
/// Pixels are stored row-major and channel-interleaved (`H × W × C`).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    label: u32,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
        label: u32,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(Error::Argument(format!(
                "pixel buffer has {} bytes, expected {expected} ({height}x{width}x{channels})",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            label,
        })
    }

    /// An image with every byte set to `value`.
    pub fn filled(height: usize, width: usize, channels: usize, value: u8, label: u32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels], label)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn label(&self) -> u32 {
        self.label
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = label;
        self
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Same shape and label, new pixels. Length is the caller's responsibility.
    fn derive(&self, pixels: Vec<u8>) -> Image {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
            label: self.label,
        }
    }

    fn map_bytes(&self, f: impl Fn(u8) -> u8) -> Image {
        self.derive(self.pixels.iter().map(|&v| f(v)).collect())
    }

    /// Fixture encoding: 16-byte header of little-endian `u32` (H, W, C, label), then pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len());
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.label.to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Decodes [`Image::to_bytes`]. Errors carry the offending byte offset.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Image, (u64, String)> {
        if bytes.len() < HEADER_LEN {
            return Err((
                bytes.len() as u64,
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        let (h, w, c, label) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
        let expected = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or((0, "header dimensions overflow".to_string()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err((
                (HEADER_LEN + body.len().min(expected)) as u64,
                format!("pixel payload has {} bytes, header declares {expected}", body.len()),
            ));
        }
        Image::new(h, w, c, body.to_vec(), label).map_err(|e| (0, e.to_string()))
    }
}

/// The closed set of augmentation operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
    SamplePairing,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::AutoContrast,
        OpKind::Invert,
        OpKind::Equalize,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Contrast,
        OpKind::Color,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::Cutout,
        OpKind::SamplePairing,
    ];

    pub const COUNT: usize = Self::ALL.len();

    /// Position in [`OpKind::ALL`]; this is the categorical index used by the optimizer.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<OpKind> {
        Self::ALL.get(index).copied()
    }

    pub fn uses_magnitude(self) -> bool {
        !matches!(self, OpKind::AutoContrast | OpKind::Invert | OpKind::Equalize)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Rotate => "Rotate",
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Invert => "Invert",
            OpKind::Equalize => "Equalize",
            OpKind::Solarize => "Solarize",
            OpKind::Posterize => "Posterize",
            OpKind::Contrast => "Contrast",
            OpKind::Color => "Color",
            OpKind::Brightness => "Brightness",
            OpKind::Sharpness => "Sharpness",
            OpKind::Cutout => "Cutout",
            OpKind::SamplePairing => "SamplePairing",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown operation '{s}'")))
    }
}

/// Concrete parameter of an operation after magnitude mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpParam {
    /// Magnitude-free operation.
    Unused,
    /// Shear factor (horizontal displacement per row, or vertical per column).
    Shear(f64),
    /// Translation as a signed fraction of the image dimension.
    TranslateFraction(f64),
    /// Counter-clockwise rotation in degrees.
    Degrees(f64),
    /// Pixels at or above the threshold are inverted.
    Threshold(u16),
    /// Number of high bits kept.
    Bits(u8),
    /// Enhancement factor; 1 is the identity, 0 the degenerate image.
    Factor(f64),
    /// Cutout side as a fraction of `min(H, W)`.
    SideFraction(f64),
    /// Weight given to the partner image.
    Weight(f64),
}

/// Maps a normalized magnitude to the operation's concrete parameter.
pub fn magnitude_map(kind: OpKind, lambda: f64) -> Result<OpParam> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("magnitude {lambda} outside [0, 1]")));
    }
    let signed = 2.0 * lambda - 1.0;
    Ok(match kind {
        OpKind::ShearX | OpKind::ShearY => OpParam::Shear(signed * MAX_SHEAR),
        OpKind::TranslateX | OpKind::TranslateY => OpParam::TranslateFraction(signed * MAX_TRANSLATE),
        OpKind::Rotate => OpParam::Degrees(signed * MAX_ROTATE_DEG),
        OpKind::AutoContrast | OpKind::Invert | OpKind::Equalize => OpParam::Unused,
        OpKind::Solarize => OpParam::Threshold((256.0 * (1.0 - lambda)).round() as u16),
        OpKind::Posterize => OpParam::Bits((8.0 - 4.0 * lambda).round().clamp(4.0, 8.0) as u8),
        OpKind::Contrast | OpKind::Color | OpKind::Brightness | OpKind::Sharpness => {
            OpParam::Factor(1.0 + ENHANCE_RANGE * signed)
        }
        OpKind::Cutout => OpParam::SideFraction(0.5 * lambda),
        OpKind::SamplePairing => OpParam::Weight(MAX_PAIRING_WEIGHT * lambda),
    })
}

/// Externally drawn inputs of the stochastic operations.
#[derive(Clone, Copy, Debug, Default)]
pub struct OpArgs<'a> {
    /// Partner image; required by, and only accepted for, SamplePairing.
    pub pair: Option<&'a Image>,
    /// Cutout patch center `(y, x)`; the image center when absent.
    pub cutout_center: Option<(usize, usize)>,
}

impl<'a> OpArgs<'a> {
    pub fn pair(pair: &'a Image) -> Self {
        Self {
            pair: Some(pair),
            cutout_center: None,
        }
    }

    pub fn cutout_at(y: usize, x: usize) -> Self {
        Self {
            pair: None,
            cutout_center: Some((y, x)),
        }
    }
}

/// Applies one operation at magnitude `lambda`.
pub fn apply_op(img: &Image, kind: OpKind, lambda: f64, args: OpArgs<'_>) -> Result<Image> {
    let param = magnitude_map(kind, lambda)?;
    match (kind, args.pair) {
        (OpKind::SamplePairing, None) => {
            return Err(Error::Argument("SamplePairing requires a partner image".into()))
        }
        (k, Some(_)) if k != OpKind::SamplePairing => {
            return Err(Error::Argument(format!("{k} does not take a partner image")))
        }
        _ => {}
    }
    let (h, w) = (img.height as f64, img.width as f64);
    match (kind, param) {
        (OpKind::ShearX, OpParam::Shear(s)) => {
            let cy = (h - 1.0) / 2.0;
            affine_transform(img, [[1.0, s, -s * cy], [0.0, 1.0, 0.0]], FILL)
        }
        (OpKind::ShearY, OpParam::Shear(s)) => {
            let cx = (w - 1.0) / 2.0;
            affine_transform(img, [[1.0, 0.0, 0.0], [s, 1.0, -s * cx]], FILL)
        }
        (OpKind::TranslateX, OpParam::TranslateFraction(f)) => {
            affine_transform(img, [[1.0, 0.0, f * w], [0.0, 1.0, 0.0]], FILL)
        }
        (OpKind::TranslateY, OpParam::TranslateFraction(f)) => {
            affine_transform(img, [[1.0, 0.0, 0.0], [0.0, 1.0, f * h]], FILL)
        }
        (OpKind::Rotate, OpParam::Degrees(deg)) => affine_transform(img, rotation(img, deg), FILL),
        (OpKind::AutoContrast, _) => Ok(autocontrast(img)),
        (OpKind::Invert, _) => Ok(img.map_bytes(|v| 255 - v)),
        (OpKind::Equalize, _) => Ok(equalize(img)),
        (OpKind::Solarize, OpParam::Threshold(t)) => {
            Ok(img.map_bytes(|v| if u16::from(v) >= t { 255 - v } else { v }))
        }
        (OpKind::Posterize, OpParam::Bits(bits)) => {
            let mask = (0xFFu16 << (8 - bits)) as u8;
            Ok(img.map_bytes(|v| v & mask))
        }
        (OpKind::Contrast, OpParam::Factor(f)) => mix(&contrast_degenerate(img), img, f),
        (OpKind::Color, OpParam::Factor(f)) => mix(&grayscale(img), img, f),
        (OpKind::Brightness, OpParam::Factor(f)) => mix(&img.map_bytes(|_| 0), img, f),
        (OpKind::Sharpness, OpParam::Factor(f)) => mix(&smooth(img), img, f),
        (OpKind::Cutout, OpParam::SideFraction(frac)) => {
            let side = (frac * img.height.min(img.width) as f64).round() as usize;
            let center = args
                .cutout_center
                .unwrap_or((img.height / 2, img.width / 2));
            Ok(cutout(img, side, center))
        }
        (OpKind::SamplePairing, OpParam::Weight(weight)) => {
            blend(img, args.pair.expect("checked above"), weight)
        }
        (k, p) => unreachable!("magnitude_map returned {p:?} for {k}"),
    }
}

fn rotation(img: &Image, degrees: f64) -> [[f64; 3]; 2] {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    // counter-clockwise on screen with y pointing down
    let (a, b, d, e) = (cos, sin, -sin, cos);
    [
        [a, b, cx - a * cx - b * cy],
        [d, e, cy - d * cx - e * cy],
    ]
}

/// Resamples `img` under the forward affine map `matrix` (source → destination).
///
/// Each destination pixel is inverse-mapped to its nearest source pixel;
/// sources outside the image take `fill` (only `fill[0]` for grayscale).
pub fn affine_transform(img: &Image, matrix: [[f64; 3]; 2], fill: [u8; 3]) -> Result<Image> {
    let [[a, b, tx], [d, e, ty]] = matrix;
    let det = a * e - b * d;
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::Numeric(format!(
            "affine linear part is singular (det = {det})"
        )));
    }
    let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - tx, y as f64 - ty);
            let sx = (ia * dx + ib * dy + 0.5).floor();
            let sy = (id * dx + ie * dy + 0.5).floor();
            let dst = (y * w + x) * c;
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                let src = (sy as usize * w + sx as usize) * c;
                out[dst..dst + c].copy_from_slice(&img.pixels[src..src + c]);
            } else {
                out[dst..dst + c].copy_from_slice(&fill[..c]);
            }
        }
    }
    Ok(img.derive(out))
}

/// Per-pixel `round((1 − w)·a + w·b)`, keeping `img_a`'s label.
pub fn blend(img_a: &Image, img_b: &Image, w: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("blend weight {w} outside [0, 1]")));
    }
    mix(img_a, img_b, w)
}

/// [`blend`] without the weight restriction: weights above 1 extrapolate
/// away from `img_a`, and results are clamped to the byte range.
fn mix(img_a: &Image, img_b: &Image, w: f64) -> Result<Image> {
    if !img_a.same_shape(img_b) {
        return Err(Error::Argument(format!(
            "blend shape mismatch: {}x{}x{} vs {}x{}x{}",
            img_a.height, img_a.width, img_a.channels, img_b.height, img_b.width, img_b.channels
        )));
    }
    let pixels = img_a
        .pixels
        .iter()
        .zip(&img_b.pixels)
        .map(|(&a, &b)| {
            let v = (1.0 - w) * f64::from(a) + w * f64::from(b);
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(img_a.derive(pixels))
}

fn channel_values(img: &Image, c: usize) -> impl Iterator<Item = u8> + '_ {
    img.pixels.iter().skip(c).step_by(img.channels).copied()
}

fn map_channels(img: &Image, luts: &[[u8; 256]]) -> Image {
    let c = img.channels;
    let pixels = img
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| luts[i % c][v as usize])
        .collect();
    img.derive(pixels)
}

fn identity_lut() -> [u8; 256] {
    std::array::from_fn(|i| i as u8)
}

fn autocontrast(img: &Image) -> Image {
    let luts: Vec<[u8; 256]> = (0..img.channels)
        .map(|c| {
            let lo = channel_values(img, c).min().unwrap_or(0);
            let hi = channel_values(img, c).max().unwrap_or(255);
            if hi <= lo {
                return identity_lut();
            }
            let scale = 255.0 / f64::from(hi - lo);
            std::array::from_fn(|v| {
                ((v as f64 - f64::from(lo)) * scale).round().clamp(0.0, 255.0) as u8
            })
        })
        .collect();
    map_channels(img, &luts)
}

/// Cumulative-histogram equalization per channel:
/// `v ↦ round((cdf(v) − cdf_min) / (n − cdf_min) · 255)`.
fn equalize(img: &Image) -> Image {
    let luts: Vec<[u8; 256]> = (0..img.channels)
        .map(|c| {
            let mut hist = [0u64; 256];
            for v in channel_values(img, c) {
                hist[v as usize] += 1;
            }
            let n: u64 = hist.iter().sum();
            let cdf_min = hist.iter().copied().find(|&h| h > 0).unwrap_or(0);
            if n == cdf_min {
                return identity_lut();
            }
            let mut lut = [0u8; 256];
            let mut cdf = 0u64;
            for (v, &count) in hist.iter().enumerate() {
                cdf += count;
                let num = cdf.saturating_sub(cdf_min) as f64;
                lut[v] = (num / (n - cdf_min) as f64 * 255.0).round() as u8;
            }
            lut
        })
        .collect();
    map_channels(img, &luts)
}

/// ITU-R 601 luma with the fixed-point rounding used by common imaging libraries.
fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((u32::from(r) * 19595 + u32::from(g) * 38470 + u32::from(b) * 7471 + 0x8000) >> 16) as u8
}

/// Grayscale replicated over all channels; the image itself when single-channel.
fn grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .flat_map(|p| {
            let l = luma(p[0], p[1], p[2]);
            [l, l, l]
        })
        .collect();
    img.derive(pixels)
}

fn contrast_degenerate(img: &Image) -> Image {
    let (sum, n) = if img.channels == 1 {
        (img.pixels.iter().map(|&v| u64::from(v)).sum::<u64>(), img.pixels.len())
    } else {
        let sum = img
            .pixels
            .chunks_exact(3)
            .map(|p| u64::from(luma(p[0], p[1], p[2])))
            .sum();
        (sum, img.pixels.len() / 3)
    };
    let mean = (sum as f64 / n as f64).round() as u8;
    img.map_bytes(|_| mean)
}

/// 3×3 smoothing (center weight 5, neighbours 1, sum 13); border pixels are kept.
fn smooth(img: &Image) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = img.pixels.clone();
    if h < 3 || w < 3 {
        return img.derive(out);
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let mut acc = 0u32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let weight = if dy == 1 && dx == 1 { 5 } else { 1 };
                        acc += weight * u32::from(img.get(y + dy - 1, x + dx - 1, ch));
                    }
                }
                out[(y * w + x) * c + ch] = ((f64::from(acc) / 13.0).round()) as u8;
            }
        }
    }
    img.derive(out)
}

/// Gray square of side `side` centered at `(cy, cx)`, clipped to the image.
fn cutout(img: &Image, side: usize, (cy, cx): (usize, usize)) -> Image {
    let mut out = img.pixels.clone();
    if side == 0 {
        return img.derive(out);
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let y0 = cy.saturating_sub(side / 2);
    let x0 = cx.saturating_sub(side / 2);
    let y1 = (cy + side - side / 2).min(h);
    let x1 = (cx + side - side / 2).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = (y * w + x) * c;
            out[i..i + c].copy_from_slice(&FILL[..c]);
        }
    }
    img.derive(out)
}
