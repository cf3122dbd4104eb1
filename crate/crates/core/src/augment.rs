//! Training-time augmentation: random-scale resize, random crop that keeps
//! faces whose centres survive, SSD-style photometric distortion and
//! horizontal flip. Order within [`augment`]: resize, crop, photometric.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{clip_box, flip_box, GroundTruth};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometricConfig {
    pub brightness_prob: f64,
    /// Additive, in `[0, 1]` pixel units.
    pub brightness_delta: f64,
    pub contrast_prob: f64,
    pub contrast_low: f64,
    pub contrast_high: f64,
    pub saturation_prob: f64,
    pub saturation_low: f64,
    pub saturation_high: f64,
    pub hue_prob: f64,
    /// Maximum hue rotation in degrees.
    pub hue_delta: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness_prob: 0.5,
            brightness_delta: 32.0 / 255.0,
            contrast_prob: 0.5,
            contrast_low: 0.5,
            contrast_high: 1.5,
            saturation_prob: 0.5,
            saturation_low: 0.5,
            saturation_high: 1.5,
            hue_prob: 0.5,
            hue_delta: 18.0,
        }
    }
}

impl PhotometricConfig {
    pub fn disabled() -> Self {
        Self {
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            saturation_prob: 0.0,
            hue_prob: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub short_side_choices: Vec<usize>,
    pub long_side_cap: usize,
    pub crop_prob: f64,
    pub crop_low: f64,
    pub photometric: PhotometricConfig,
}

impl AugmentConfig {
    pub fn paper() -> Self {
        Self {
            short_side_choices: vec![400, 800, 1200],
            long_side_cap: 2000,
            crop_prob: 0.5,
            crop_low: 0.6,
            photometric: PhotometricConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            short_side_choices: vec![64, 128, 192],
            long_side_cap: 320,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.short_side_choices.is_empty() || self.short_side_choices.contains(&0) {
            return Err(invalid("short_side_choices must be non-empty and positive"));
        }
        if self.short_side_choices.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("short_side_choices must be sorted ascending"));
        }
        if self.long_side_cap == 0 {
            return Err(invalid("long_side_cap must be positive"));
        }
        if !(self.crop_low > 0.0 && self.crop_low <= 1.0) || !(0.0..=1.0).contains(&self.crop_prob) {
            return Err(invalid("need 0 < crop_low <= 1 and crop_prob in [0, 1]"));
        }
        let p = &self.photometric;
        for prob in [p.brightness_prob, p.contrast_prob, p.saturation_prob, p.hue_prob] {
            if !(0.0..=1.0).contains(&prob) {
                return Err(invalid("photometric probabilities must lie in [0, 1]"));
            }
        }
        if p.contrast_low > p.contrast_high
            || p.saturation_low > p.saturation_high
            || p.brightness_delta < 0.0
            || p.hue_delta < 0.0
        {
            return Err(invalid("bad photometric ranges"));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Uniform scale taking the short side to `short_side`, reduced if the long
/// side would exceed `long_side_cap`.
pub fn scale_for(width: usize, height: usize, short_side: usize, long_side_cap: usize) -> f64 {
    let short = width.min(height) as f64;
    let long = width.max(height) as f64;
    (short_side as f64 / short).min(long_side_cap as f64 / long)
}

/// Resizes by `scale` (each side rounded, at least one pixel) and maps boxes
/// by the realised per-axis factors.
pub fn resize_by(image: &Image, gts: &[GroundTruth], scale: f64) -> (Image, Vec<GroundTruth>) {
    let w = ((image.width as f64 * scale).round() as usize).max(1);
    let h = ((image.height as f64 * scale).round() as usize).max(1);
    let (sx, sy) = (w as f64 / image.width as f64, h as f64 / image.height as f64);
    let boxes = gts
        .iter()
        .map(|g| GroundTruth {
            bbox: g.bbox.scale(sx, sy),
            ignored: g.ignored,
        })
        .collect();
    (image.resize(w, h), boxes)
}

pub fn resize_for_training<R: Rng>(
    image: &Image,
    gts: &[GroundTruth],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Vec<GroundTruth>)> {
    if image.is_empty() {
        return Err(invalid("cannot resize an empty image"));
    }
    let &s = cfg
        .short_side_choices
        .choose(rng)
        .ok_or_else(|| invalid("no short-side choices"))?;
    let scale = scale_for(image.width, image.height, s, cfg.long_side_cap);
    Ok(resize_by(image, gts, scale))
}

/// The patch rectangle `(x0, y0, width, height)` chosen by [`random_crop`],
/// or `None` when no crop happens.
pub fn sample_crop<R: Rng>(
    width: usize,
    height: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    if width == 0 || height == 0 || !rng.random_bool(cfg.crop_prob) {
        return None;
    }
    let side = |full: usize, rng: &mut R| {
        let lo = ((cfg.crop_low * full as f64).ceil() as usize).clamp(1, full);
        rng.random_range(lo..=full)
    };
    let ch = side(height, rng);
    let cw = side(width, rng);
    let y0 = rng.random_range(0..=height - ch);
    let x0 = rng.random_range(0..=width - cw);
    Some((x0, y0, cw, ch))
}

/// Keeps boxes whose centre lies strictly inside the patch, shifted into patch
/// coordinates and clipped to it.
pub fn crop_boxes(gts: &[GroundTruth], x0: usize, y0: usize, width: usize, height: usize) -> Vec<GroundTruth> {
    let (fx0, fy0) = (x0 as f64, y0 as f64);
    let (fx1, fy1) = (fx0 + width as f64, fy0 + height as f64);
    gts.iter()
        .filter(|g| {
            let (cx, cy) = g.bbox.center();
            fx0 < cx && cx < fx1 && fy0 < cy && cy < fy1
        })
        .map(|g| GroundTruth {
            bbox: clip_box(&g.bbox.translate(-fx0, -fy0), height, width),
            ignored: g.ignored,
        })
        .collect()
}

pub fn random_crop<R: Rng>(
    image: &Image,
    gts: &[GroundTruth],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Image, Vec<GroundTruth>) {
    match sample_crop(image.width, image.height, cfg, rng) {
        Some((x0, y0, w, h)) => (
            image.crop(x0, y0, w, h).expect("patch lies inside the image"),
            crop_boxes(gts, x0, y0, w, h),
        ),
        None => (image.clone(), gts.to_vec()),
    }
}

pub fn adjust_brightness(image: &mut Image, delta: f64) {
    let d = delta as f32;
    image.data_mut().iter_mut().for_each(|v| *v = (*v + d).clamp(0.0, 1.0));
}

/// Scales every value by `alpha` (about zero), then clamps.
pub fn adjust_contrast(image: &mut Image, alpha: f64) {
    let a = alpha as f32;
    image.data_mut().iter_mut().for_each(|v| *v = (*v * a).clamp(0.0, 1.0));
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn map_hsv(image: &mut Image, f: impl Fn([f32; 3]) -> [f32; 3]) {
    for y in 0..image.height {
        for x in 0..image.width {
            let rgb = hsv_to_rgb(f(rgb_to_hsv(image.pixel(y, x))));
            image.set_pixel(y, x, rgb.map(|v| v.clamp(0.0, 1.0)));
        }
    }
}

pub fn adjust_saturation(image: &mut Image, factor: f64) {
    let k = factor as f32;
    map_hsv(image, |[h, s, v]| [h, (s * k).clamp(0.0, 1.0), v]);
}

/// Rotates hue by `degrees`.
pub fn adjust_hue(image: &mut Image, degrees: f64) {
    let d = degrees as f32;
    map_hsv(image, |[h, s, v]| [(h + d).rem_euclid(360.0), s, v]);
}

/// Brightness, contrast, saturation, hue; each applied independently with its
/// probability. Boxes are never affected.
pub fn photometric_distort<R: Rng>(image: &Image, cfg: &PhotometricConfig, rng: &mut R) -> Image {
    let mut out = image.clone();
    if rng.random_bool(cfg.brightness_prob) {
        adjust_brightness(&mut out, rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta));
    }
    if rng.random_bool(cfg.contrast_prob) {
        adjust_contrast(&mut out, rng.random_range(cfg.contrast_low..=cfg.contrast_high));
    }
    if rng.random_bool(cfg.saturation_prob) {
        adjust_saturation(&mut out, rng.random_range(cfg.saturation_low..=cfg.saturation_high));
    }
    if rng.random_bool(cfg.hue_prob) {
        adjust_hue(&mut out, rng.random_range(-cfg.hue_delta..=cfg.hue_delta));
    }
    out
}

pub fn hflip(image: &Image, gts: &[GroundTruth]) -> (Image, Vec<GroundTruth>) {
    let boxes = gts
        .iter()
        .map(|g| GroundTruth {
            bbox: flip_box(&g.bbox, image.width),
            ignored: g.ignored,
        })
        .collect();
    (image.flip_horizontal(), boxes)
}

/// The full per-image pipeline: resize, crop, photometric distortion.
pub fn augment<R: Rng>(
    image: &Image,
    gts: &[GroundTruth],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Vec<GroundTruth>)> {
    let (img, gts) = resize_for_training(image, gts, cfg, rng)?;
    let (img, gts) = random_crop(&img, &gts, cfg, rng);
    let img = photometric_distort(&img, &cfg.photometric, rng);
    Ok((img, gts))
}
