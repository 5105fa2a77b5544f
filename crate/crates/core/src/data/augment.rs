//! Online, label-preserving augmentation.

use rand::Rng;

use super::image::Image;
use super::resize::{resize_registry, ResizePolicy};
use crate::error::{Error, Result};
use crate::kv::KvMap;

pub const DEFAULT_JITTER_SCALE: f32 = 0.2;
pub const DEFAULT_JITTER_SHIFT: f32 = 0.05;
pub const DEFAULT_ROTATION_DEGREES: f32 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub flip_probability: f32,
    /// Per-channel gain drawn from `[1 - a, 1 + a]`.
    pub jitter_scale: f32,
    /// Per-channel offset drawn from `[-b, b]`.
    pub jitter_shift: f32,
    /// Rotation angle drawn from `[-r, r]` degrees; 0 disables rotation.
    pub rotation_degrees: f32,
    pub mean_subtraction: bool,
    pub resize_policy: String,
    pub resize_options: KvMap,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_probability: 0.5,
            jitter_scale: DEFAULT_JITTER_SCALE,
            jitter_shift: DEFAULT_JITTER_SHIFT,
            rotation_degrees: 0.0,
            mean_subtraction: true,
            resize_policy: "aspect_preserving".into(),
            resize_options: KvMap::new(),
        }
    }
}

impl AugmentationConfig {
    /// Everything off except mean subtraction and the resize policy.
    pub fn disabled() -> Self {
        AugmentationConfig { flip_probability: 0.0, jitter_scale: 0.0, jitter_shift: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config(format!("flip probability {} not in [0,1]", self.flip_probability)));
        }
        if !(0.0..1.0).contains(&self.jitter_scale) || !(self.jitter_shift >= 0.0) {
            return Err(Error::config("jitter amplitudes must satisfy 0 <= scale < 1 and shift >= 0"));
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(Error::config(format!("rotation range {} not in [0,180]", self.rotation_degrees)));
        }
        self.policy().map(|_| ())
    }

    pub fn policy(&self) -> Result<Box<dyn ResizePolicy>> {
        resize_registry().create(&self.resize_policy, &self.resize_options)
    }

    /// Reads `augment.*` and `resize.*` keys over the given base.
    pub fn from_kv_with(kv: &KvMap, base: &AugmentationConfig) -> Result<Self> {
        let mut cfg = base.clone();
        cfg.flip_probability = kv.parsed_or("augment.flip", cfg.flip_probability)?;
        cfg.jitter_scale = kv.parsed_or("augment.jitter_scale", cfg.jitter_scale)?;
        cfg.jitter_shift = kv.parsed_or("augment.jitter_shift", cfg.jitter_shift)?;
        cfg.rotation_degrees = kv.parsed_or("augment.rotation", cfg.rotation_degrees)?;
        cfg.mean_subtraction = kv.parsed_or("augment.mean_subtraction", cfg.mean_subtraction)?;
        if let Some(p) = kv.get("resize.policy") {
            if p != cfg.resize_policy {
                cfg.resize_options = KvMap::new();
            }
            cfg.resize_policy = p.to_string();
        }
        for (k, v) in kv.iter() {
            if let Some(opt) = k.strip_prefix("resize.") {
                if opt != "policy" {
                    cfg.resize_options.set(opt, v);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> Result<KvMap> {
        let mut kv = KvMap::new();
        kv.set("augment.flip", self.flip_probability);
        kv.set("augment.jitter_scale", self.jitter_scale);
        kv.set("augment.jitter_shift", self.jitter_shift);
        kv.set("augment.rotation", self.rotation_degrees);
        kv.set("augment.mean_subtraction", self.mean_subtraction);
        kv.set("resize.policy", &self.resize_policy);
        for (k, v) in self.policy()?.to_kv().iter() {
            kv.set(&format!("resize.{k}"), v);
        }
        Ok(kv)
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, image.pixel(w - 1 - x, y));
        }
    }
    out
}

/// `v * gain[c] + offset[c]` on every pixel.
pub fn color_jitter(image: &mut Image, gain: [f32; 3], offset: [f32; 3]) {
    for px in image.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * gain[c] + offset[c];
        }
    }
}

/// Rotates about the image center by `degrees` (counter-clockwise on screen),
/// sampling bilinearly; uncovered pixels take `fill`.
pub fn rotate(image: &Image, degrees: f32, fill: [f32; 3]) -> Image {
    let (w, h) = (image.width(), image.height());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            // inverse map: destination back into the source
            let sx = cos * dx - sin * dy + cx - 0.5;
            let sy = sin * dx + cos * dy + cy - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > w as f32 - 0.5 || sy > h as f32 - 0.5 {
                out.set_pixel(x, y, fill);
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, (w - 1) as f32), sy.clamp(0.0, (h - 1) as f32));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let (a, b, c, d) = (image.pixel(x0, y0), image.pixel(x1, y0), image.pixel(x0, y1), image.pixel(x1, y1));
            let mut px = [0.0; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = c[k] + (d[k] - c[k]) * fx;
                px[k] = top + (bottom - top) * fy;
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

pub fn subtract_mean(image: &mut Image, mean: [f32; 3]) {
    for px in image.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] -= mean[c];
        }
    }
}

/// Flip, jitter and rotation, without mean subtraction. Rotation fills with
/// `mean` so that subtraction later zeroes the uncovered corners.
pub(crate) fn augment_pixels<R: Rng + ?Sized>(image: &Image, config: &AugmentationConfig, mean: [f32; 3], rng: &mut R) -> Image {
    let mut out = if config.flip_probability > 0.0 && rng.random::<f32>() < config.flip_probability {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if config.jitter_scale > 0.0 || config.jitter_shift > 0.0 {
        let (a, b) = (config.jitter_scale, config.jitter_shift);
        let gain = [(); 3].map(|_| 1.0 + rng.random_range(-1.0f32..=1.0) * a);
        let offset = [(); 3].map(|_| rng.random_range(-1.0f32..=1.0) * b);
        color_jitter(&mut out, gain, offset);
    }
    if config.rotation_degrees > 0.0 {
        let angle = rng.random_range(-config.rotation_degrees..=config.rotation_degrees);
        out = rotate(&out, angle, mean);
    }
    out
}

/// Applies the configured flip, jitter, rotation and mean subtraction.
pub fn augment<R: Rng + ?Sized>(image: &Image, config: &AugmentationConfig, mean: [f32; 3], rng: &mut R) -> Image {
    let mut out = augment_pixels(image, config, mean, rng);
    if config.mean_subtraction {
        subtract_mean(&mut out, mean);
    }
    out
}
