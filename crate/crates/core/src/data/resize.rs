//! Resizing: bilinear resampling, aspect-preserving letterboxing, and the
//! squash-then-crop baseline, plus the policy registry used for batching.

use rand::Rng;

use super::image::Image;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::registry::Registry;

pub const MIN_LETTERBOX_SIDE: usize = 8;

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(image: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::image(format!("cannot resize to {width}x{height}")));
    }
    let (sw, sh) = (image.width(), image.height());
    if (sw, sh) == (width, height) {
        return Ok(image.clone());
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / dst as f32;
        (0..dst)
            .map(|i| {
                let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(src - 1), s - lo as f32)
            })
            .collect()
    };
    let (xs, ys) = (axis(width, sw), axis(height, sh));
    let src = image.data();
    let mut out = Vec::with_capacity(width * height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| src[(y * sw + x) * 3 + c];
                let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
                let bottom = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Image::new(width, height, out)
}

/// Placement of resized content inside a letterbox canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Letterbox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Where a `width x height` image lands on a `target x target` canvas.
pub fn letterbox_geometry(width: usize, height: usize, target: usize) -> Letterbox {
    let long = width.max(height) as f64;
    let scale = |v: usize| ((v as f64 * target as f64 / long).round() as usize).clamp(1, target);
    let (w, h) = (scale(width), scale(height));
    Letterbox { x: (target - w) / 2, y: (target - h) / 2, width: w, height: h }
}

/// Scales the long side to `target`, keeping the aspect ratio, and centers
/// the result on a square canvas filled with `fill`.
pub fn resize_aspect_preserving(image: &Image, target: usize, fill: [f32; 3]) -> Result<Image> {
    if target < MIN_LETTERBOX_SIDE {
        return Err(Error::image(format!("letterbox side {target} is below {MIN_LETTERBOX_SIDE}")));
    }
    let g = letterbox_geometry(image.width(), image.height(), target);
    let content = resize_bilinear(image, g.width, g.height)?;
    let mut canvas = Image::filled(target, target, fill)?;
    canvas.paste(&content, g.x, g.y)?;
    Ok(canvas)
}

/// Squashes to `resize x resize` then takes a `crop x crop` window, random
/// when an rng is supplied and centered otherwise.
pub fn resize_fixed<R: Rng + ?Sized>(image: &Image, resize: usize, crop: usize, rng: Option<&mut R>) -> Result<Image> {
    if crop == 0 || crop > resize {
        return Err(Error::config(format!("crop {crop} must be in 1..={resize}")));
    }
    let squashed = resize_bilinear(image, resize, resize)?;
    if crop == resize {
        return Ok(squashed);
    }
    let slack = resize - crop;
    let (x, y) = match rng {
        Some(rng) => (rng.random_range(0..=slack), rng.random_range(0..=slack)),
        None => (slack / 2, slack / 2),
    };
    squashed.crop(x, y, crop, crop)
}

/// How images are brought to a common square size for batching.
pub trait ResizePolicy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Canvas side for one training batch.
    fn sample_side(&self, rng: &mut dyn rand::RngCore) -> usize;
    /// Canvas side used for evaluation.
    fn eval_side(&self) -> usize;
    /// Resizes one image to `side x side`. `rng` is present only in training.
    fn apply(&self, image: &Image, side: usize, fill: [f32; 3], rng: Option<&mut dyn rand::RngCore>) -> Result<Image>;
    fn to_kv(&self) -> KvMap;
}

#[derive(Clone, Debug)]
pub struct FixedResize {
    pub resize: usize,
    pub crop: usize,
}

impl ResizePolicy for FixedResize {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn sample_side(&self, _: &mut dyn rand::RngCore) -> usize {
        self.crop
    }

    fn eval_side(&self) -> usize {
        self.crop
    }

    fn apply(&self, image: &Image, side: usize, _: [f32; 3], rng: Option<&mut dyn rand::RngCore>) -> Result<Image> {
        if side != self.crop {
            return Err(Error::shape(format!("fixed policy produces {0}x{0}, asked for {side}", self.crop)));
        }
        resize_fixed(image, self.resize, self.crop, rng)
    }

    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("resize", self.resize);
        kv.set("crop", self.crop);
        kv
    }
}

#[derive(Clone, Debug)]
pub struct AspectPreserving {
    pub sizes: Vec<usize>,
    pub eval_size: usize,
}

impl AspectPreserving {
    /// Defaults the evaluation side to the lower median of the size set.
    pub fn new(mut sizes: Vec<usize>, eval_size: Option<usize>) -> Result<Self> {
        sizes.sort_unstable();
        sizes.dedup();
        if sizes.is_empty() {
            return Err(Error::config("aspect-preserving size set is empty"));
        }
        if let Some(&s) = sizes.iter().find(|&&s| s < MIN_LETTERBOX_SIDE) {
            return Err(Error::config(format!("letterbox side {s} is below {MIN_LETTERBOX_SIDE}")));
        }
        let eval_size = eval_size.unwrap_or(sizes[(sizes.len() - 1) / 2]);
        if eval_size < MIN_LETTERBOX_SIDE {
            return Err(Error::config(format!("eval side {eval_size} is below {MIN_LETTERBOX_SIDE}")));
        }
        Ok(AspectPreserving { sizes, eval_size })
    }
}

impl ResizePolicy for AspectPreserving {
    fn name(&self) -> &'static str {
        "aspect_preserving"
    }

    fn sample_side(&self, rng: &mut dyn rand::RngCore) -> usize {
        self.sizes[rng.random_range(0..self.sizes.len())]
    }

    fn eval_side(&self) -> usize {
        self.eval_size
    }

    fn apply(&self, image: &Image, side: usize, fill: [f32; 3], _: Option<&mut dyn rand::RngCore>) -> Result<Image> {
        resize_aspect_preserving(image, side, fill)
    }

    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("sizes", crate::kv::join(&self.sizes));
        kv.set("eval_size", self.eval_size);
        kv
    }
}

pub const DEFAULT_LONG_SIDES: [usize; 4] = [56, 64, 72, 80];

/// `fixed` (options `resize`, `crop`; default 64/56) and `aspect_preserving`
/// (options `sizes`, `eval_size`).
pub fn resize_registry() -> Registry<dyn ResizePolicy> {
    let mut reg: Registry<dyn ResizePolicy> = Registry::new("resize policy");
    reg.register("fixed", |o: &KvMap| {
        let resize = o.parsed_or("resize", 64usize)?;
        let crop = o.parsed_or("crop", 56usize)?;
        if crop == 0 || crop > resize {
            return Err(Error::config(format!("crop {crop} must be in 1..={resize}")));
        }
        Ok(Box::new(FixedResize { resize, crop }))
    });
    reg.register("aspect_preserving", |o: &KvMap| {
        let sizes = o.list("sizes")?.unwrap_or_else(|| DEFAULT_LONG_SIDES.to_vec());
        Ok(Box::new(AspectPreserving::new(sizes, o.parsed("eval_size")?)?))
    });
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient(w: usize, h: usize) -> Image {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[x as f32, y as f32, 1.0]);
            }
        }
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let flat = Image::filled(7, 3, [0.2, 0.4, 0.6]).unwrap();
        let r = resize_bilinear(&flat, 13, 9).unwrap();
        assert!(r.data().iter().zip([0.2, 0.4, 0.6].iter().cycle()).all(|(a, b)| (a - b).abs() < 1e-6));
        let g = gradient(5, 4);
        assert_eq!(resize_bilinear(&g, 5, 4).unwrap(), g);
    }

    #[test]
    fn bilinear_halving_averages_pairs() {
        // 4 -> 2 samples at source 0.5 and 2.5
        let g = gradient(4, 1);
        let r = resize_bilinear(&g, 2, 1).unwrap();
        assert_eq!(r.pixel(0, 0)[0], 0.5);
        assert_eq!(r.pixel(1, 0)[0], 2.5);
    }

    #[test]
    fn wide_image_is_letterboxed_vertically() {
        let img = Image::filled(80, 40, [1.0, 1.0, 1.0]).unwrap();
        let fill = [0.25, 0.5, 0.75];
        let out = resize_aspect_preserving(&img, 64, fill).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        assert_eq!(letterbox_geometry(80, 40, 64), Letterbox { x: 0, y: 16, width: 64, height: 32 });
        for y in 0..64 {
            let want = if (16..48).contains(&y) { [1.0; 3] } else { fill };
            assert_eq!(out.pixel(0, y), want, "row {y}");
            assert_eq!(out.pixel(63, y), want, "row {y}");
        }
    }

    #[test]
    fn square_input_is_a_plain_resize() {
        let g = gradient(20, 20);
        let out = resize_aspect_preserving(&g, 32, [9.0; 3]).unwrap();
        assert_eq!(out, resize_bilinear(&g, 32, 32).unwrap());
        assert!(resize_aspect_preserving(&g, 7, [0.0; 3]).is_err());
    }

    #[test]
    fn fixed_center_crop_window() {
        // resize == source size, so the crop reads source pixels directly
        let g = gradient(10, 10);
        let out = resize_fixed::<ChaCha8Rng>(&g, 10, 6, None).unwrap();
        assert_eq!(out.pixel(0, 0), [2.0, 2.0, 1.0]);
        assert_eq!(out.pixel(5, 5), [7.0, 7.0, 1.0]);
        assert_eq!(resize_fixed::<ChaCha8Rng>(&g, 10, 10, None).unwrap(), g);
        assert!(resize_fixed::<ChaCha8Rng>(&g, 8, 9, None).is_err());
    }

    #[test]
    fn fixed_random_crop_is_seeded() {
        let g = gradient(12, 12);
        let a = resize_fixed(&g, 12, 5, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        let b = resize_fixed(&g, 12, 5, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        assert_eq!(a, b);
        let (x, y) = (a.pixel(0, 0)[0] as usize, a.pixel(0, 0)[1] as usize);
        assert!(x <= 7 && y <= 7);
        assert_eq!(a, g.crop(x, y, 5, 5).unwrap());
    }

    #[test]
    fn registry_builds_policies() {
        let reg = resize_registry();
        let fixed = reg.create("fixed", &KvMap::new()).unwrap();
        assert_eq!((fixed.eval_side(), fixed.to_kv().get("resize")), (56, Some("64")));
        let ap = reg.create("aspect_preserving", &KvMap::new()).unwrap();
        assert_eq!(ap.eval_side(), 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(DEFAULT_LONG_SIDES.contains(&ap.sample_side(&mut rng)));
        }
        let mut bad = KvMap::new();
        bad.set("sizes", "");
        assert!(reg.create("aspect_preserving", &bad).is_err());
        bad.set("crop", 99);
        assert!(reg.create("fixed", &bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn letterbox_keeps_aspect_and_fits(w in 1usize..300, h in 1usize..300, t in 8usize..128) {
                let g = letterbox_geometry(w, h, t);
                prop_assert!(g.x + g.width <= t && g.y + g.height <= t);
                prop_assert_eq!(g.width.max(g.height), t);
                // content aspect equals the source aspect up to one pixel of rounding
                let exact_short = w.min(h) as f64 * t as f64 / w.max(h) as f64;
                prop_assert!((g.width.min(g.height) as f64 - exact_short).abs() <= 1.0);
                prop_assert!(g.x.abs_diff(t - g.width - g.x) <= 1);
                prop_assert!(g.y.abs_diff(t - g.height - g.y) <= 1);
            }

            #[test]
            fn letterbox_pads_only_with_fill(w in 1usize..60, h in 1usize..60, t in 8usize..48) {
                let img = Image::filled(w, h, [1.0; 3]).unwrap();
                let out = resize_aspect_preserving(&img, t, [0.0; 3]).unwrap();
                let g = letterbox_geometry(w, h, t);
                let lit = out.data().iter().filter(|&&v| v == 1.0).count();
                prop_assert_eq!(lit, g.width * g.height * 3);
            }
        }
    }
}
