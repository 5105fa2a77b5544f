//! Synthetic attribute scenes: each attribute is a coloured shape token that
//! is drawn, inside its region, exactly when the attribute is present.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{write_image, Image};
use super::manifest::{DatasetManifest, Record, Split};
use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Diamond, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape `{s}`")))
    }

    /// Membership for box-normalized coordinates `u, v` in `[-1, 1]`
    /// (`v` grows downwards).
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    UpperHalf,
    LowerHalf,
    Anywhere,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::UpperHalf => "upper",
            Region::LowerHalf => "lower",
            Region::Anywhere => "anywhere",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Region::UpperHalf),
            "lower" => Ok(Region::LowerHalf),
            "anywhere" => Ok(Region::Anywhere),
            _ => Err(Error::config(format!("unknown region `{s}` (upper|lower|anywhere)"))),
        }
    }

    /// Allowed rows `[top, bottom)` in an image of height `h`.
    fn rows(self, h: usize) -> (usize, usize) {
        match self {
            Region::UpperHalf => (0, h / 2),
            Region::LowerHalf => (h.div_ceil(2), h),
            Region::Anywhere => (0, h),
        }
    }
}

const NAMED_COLORS: [(&str, [u8; 3]); 10] = [
    ("red", [220, 30, 30]),
    ("green", [30, 190, 40]),
    ("blue", [30, 60, 230]),
    ("yellow", [235, 220, 30]),
    ("magenta", [220, 40, 200]),
    ("cyan", [40, 210, 220]),
    ("orange", [245, 140, 20]),
    ("white", [250, 250, 250]),
    ("black", [10, 10, 10]),
    ("purple", [120, 40, 180]),
];

/// A colour name from the built-in palette or `#rrggbb`.
pub fn parse_color(s: &str) -> Result<[u8; 3]> {
    if let Some(hex) = s.strip_prefix('#') {
        if hex.len() == 6 {
            if let Ok(v) = u32::from_str_radix(hex, 16) {
                return Ok([(v >> 16) as u8, (v >> 8) as u8, v as u8]);
            }
        }
    }
    NAMED_COLORS
        .iter()
        .find(|(n, _)| *n == s)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::config(format!("unknown colour `{s}`")))
}

fn color_name(c: [u8; 3]) -> String {
    NAMED_COLORS
        .iter()
        .find(|(_, v)| *v == c)
        .map_or_else(|| format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]), |(n, _)| n.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub region: Region,
    pub prevalence: f64,
    /// Token width over token height.
    pub aspect: f32,
}

impl AttributeSpec {
    pub fn new(name: &str, shape: Shape, color: &str, region: Region, prevalence: f64) -> Result<Self> {
        Ok(AttributeSpec { name: name.into(), shape, color: parse_color(color)?, region, prevalence, aspect: 1.0 })
    }

    /// `name:shape:colour:region:prevalence[:aspect]`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if !(5..=6).contains(&parts.len()) {
            return Err(Error::config(format!("attribute `{s}`: expected name:shape:colour:region:prevalence[:aspect]")));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::config(format!("attribute `{s}`: bad number `{v}`")));
        let mut a = AttributeSpec::new(parts[0], Shape::parse(parts[1])?, parts[2], Region::parse(parts[3])?, num(parts[4])?)?;
        if let Some(aspect) = parts.get(5) {
            a.aspect = num(aspect)? as f32;
        }
        Ok(a)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}:{}",
            self.name,
            self.shape.name(),
            color_name(self.color),
            self.region.name(),
            self.prevalence,
            self.aspect
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Inclusive image width range.
    pub width: (usize, usize),
    /// Inclusive image height range.
    pub height: (usize, usize),
    pub attributes: Vec<AttributeSpec>,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Token height as a fraction of the longer image side.
    pub token_scale: (f32, f32),
    /// Amplitude of per-pixel background noise.
    pub noise: f32,
    /// Amplitude of per-token colour perturbation.
    pub color_noise: f32,
    /// Up to this many grey decoy shapes per image.
    pub distractors: usize,
}

impl SyntheticSpec {
    /// Eight attributes, prevalences 0.5 down to 0.05, 64x64 images,
    /// 2000/400/400 split. `shape_lower` sits in the lower half.
    pub fn standard(seed: u64) -> Self {
        let defs = [
            ("red_disk", Shape::Disk, "red", Region::Anywhere),
            ("green_square", Shape::Square, "green", Region::Anywhere),
            ("blue_triangle", Shape::Triangle, "blue", Region::UpperHalf),
            ("yellow_cross", Shape::Cross, "yellow", Region::LowerHalf),
            ("magenta_ring", Shape::Ring, "magenta", Region::Anywhere),
            ("cyan_diamond", Shape::Diamond, "cyan", Region::UpperHalf),
            ("orange_square", Shape::Square, "orange", Region::LowerHalf),
            ("white_disk", Shape::Disk, "white", Region::Anywhere),
        ];
        let n = defs.len();
        let attributes = defs
            .iter()
            .enumerate()
            .map(|(i, &(name, shape, color, region))| {
                let p = 0.5 - 0.45 * i as f64 / (n - 1) as f64;
                AttributeSpec::new(name, shape, color, region, (p * 1000.0).round() / 1000.0).expect("palette colour")
            })
            .collect();
        SyntheticSpec {
            width: (64, 64),
            height: (64, 64),
            attributes,
            seed,
            train: 2000,
            val: 400,
            test: 400,
            token_scale: (0.22, 0.3),
            noise: 0.08,
            color_noise: 0.06,
            distractors: 2,
        }
    }

    pub fn samples(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo >= 8 && lo <= hi;
        if !range_ok(self.width) || !range_ok(self.height) {
            return Err(Error::config("image size ranges must satisfy 8 <= min <= max"));
        }
        if self.attributes.is_empty() {
            return Err(Error::config("synthetic spec needs at least one attribute"));
        }
        for a in &self.attributes {
            if !(a.prevalence > 0.0 && a.prevalence < 1.0) {
                return Err(Error::config(format!("prevalence of `{}` must be in (0,1)", a.name)));
            }
            if !(a.aspect > 0.0 && a.aspect <= 4.0) {
                return Err(Error::config(format!("aspect of `{}` must be in (0,4]", a.name)));
            }
        }
        let (lo, hi) = self.token_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::config("token scale must satisfy 0 < min <= max <= 0.5"));
        }
        if !(self.noise >= 0.0 && self.color_noise >= 0.0) {
            return Err(Error::config("noise amplitudes must be nonnegative"));
        }
        if self.train == 0 {
            return Err(Error::config("synthetic train split is empty"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("width", format!("{},{}", self.width.0, self.width.1));
        kv.set("height", format!("{},{}", self.height.0, self.height.1));
        kv.set("seed", self.seed);
        kv.set("train", self.train);
        kv.set("val", self.val);
        kv.set("test", self.test);
        kv.set("token_scale", format!("{},{}", self.token_scale.0, self.token_scale.1));
        kv.set("noise", self.noise);
        kv.set("color_noise", self.color_noise);
        kv.set("distractors", self.distractors);
        for (i, a) in self.attributes.iter().enumerate() {
            kv.set(&format!("attribute.{i}"), a.to_text());
        }
        kv
    }

    /// Overrides `base` with whichever keys `kv` carries. Any `attribute.N`
    /// key replaces the whole attribute list.
    pub fn from_kv_with(kv: &KvMap, base: &SyntheticSpec) -> Result<Self> {
        let mut s = base.clone();
        let pair = |key: &str| -> Result<Option<(usize, usize)>> {
            match kv.list::<usize>(key)?.as_deref() {
                None => Ok(None),
                Some([v]) => Ok(Some((*v, *v))),
                Some([a, b]) => Ok(Some((*a, *b))),
                Some(_) => Err(Error::config(format!("`{key}` takes one or two values"))),
            }
        };
        if let Some(w) = pair("width")? {
            s.width = w;
        }
        if let Some(h) = pair("height")? {
            s.height = h;
        }
        s.seed = kv.parsed_or("seed", s.seed)?;
        s.train = kv.parsed_or("train", s.train)?;
        s.val = kv.parsed_or("val", s.val)?;
        s.test = kv.parsed_or("test", s.test)?;
        if let Some(v) = kv.list::<f32>("token_scale")? {
            match v[..] {
                [a, b] => s.token_scale = (a, b),
                _ => return Err(Error::config("`token_scale` takes two values")),
            }
        }
        s.noise = kv.parsed_or("noise", s.noise)?;
        s.color_noise = kv.parsed_or("color_noise", s.color_noise)?;
        s.distractors = kv.parsed_or("distractors", s.distractors)?;
        let mut attrs: Vec<(usize, AttributeSpec)> = Vec::new();
        for (k, v) in kv.iter() {
            if let Some(i) = k.strip_prefix("attribute.") {
                let i = i.parse().map_err(|_| Error::config(format!("bad key `{k}`")))?;
                attrs.push((i, AttributeSpec::parse(v)?));
            }
        }
        if !attrs.is_empty() {
            attrs.sort_by_key(|(i, _)| *i);
            s.attributes = attrs.into_iter().map(|(_, a)| a).collect();
        }
        s.validate()?;
        Ok(s)
    }
}

/// Token placement in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl BoundingBox {
    fn overlaps(&self, o: &BoundingBox) -> bool {
        self.x < o.x + o.width && o.x < self.x + self.width && self.y < o.y + o.height && o.y < self.y + self.height
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub split: Split,
    pub image: Image,
    pub labels: Vec<u8>,
    /// Token box per attribute, `Some` exactly for present attributes.
    pub boxes: Vec<Option<BoundingBox>>,
}

/// Exactly `round(p * n)` positives per attribute, at random positions.
fn stratified_labels(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut rows = vec![vec![0u8; spec.attributes.len()]; n];
    for (m, a) in spec.attributes.iter().enumerate() {
        let k = (a.prevalence * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for &i in &order[..k] {
            rows[i][m] = 1;
        }
    }
    rows
}

fn draw(image: &mut Image, shape: Shape, b: BoundingBox, color: [f32; 3]) {
    for y in b.y..b.y + b.height {
        for x in b.x..b.x + b.width {
            let u = ((x - b.x) as f32 + 0.5) / b.width as f32 * 2.0 - 1.0;
            let v = ((y - b.y) as f32 + 0.5) / b.height as f32 * 2.0 - 1.0;
            if shape.contains(u, v) {
                image.set_pixel(x, y, color);
            }
        }
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    region: Region,
    size: (usize, usize),
    taken: &[BoundingBox],
) -> BoundingBox {
    let (top, bottom) = region.rows(h);
    let tw = size.0.min(w);
    let th = size.1.min(bottom - top);
    let mut candidate = BoundingBox { x: 0, y: top, width: tw, height: th };
    for _ in 0..40 {
        candidate.x = rng.random_range(0..=w - tw);
        candidate.y = rng.random_range(top..=bottom - th);
        if !taken.iter().any(|t| t.overlaps(&candidate)) {
            break;
        }
    }
    candidate
}

fn render_one(spec: &SyntheticSpec, split: Split, labels: Vec<u8>, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    let w = rng.random_range(spec.width.0..=spec.width.1);
    let h = rng.random_range(spec.height.0..=spec.height.1);
    let base = rng.random_range(0.3f32..0.6);
    let tint = [(); 3].map(|_| base + rng.random_range(-0.05f32..0.05));
    let mut image = Image::filled(w, h, tint)?;
    if spec.noise > 0.0 {
        for v in image.data_mut() {
            *v += rng.random_range(-spec.noise..=spec.noise);
        }
    }
    let long = w.max(h) as f32;
    let token_side = |rng: &mut ChaCha8Rng| (rng.random_range(spec.token_scale.0..=spec.token_scale.1) * long).max(3.0);
    let mut taken = Vec::new();
    for _ in 0..rng.random_range(0..=spec.distractors) {
        let side = token_side(rng).round() as usize;
        let b = place(rng, w, h, Region::Anywhere, (side, side), &taken);
        let grey = rng.random_range(0.15f32..0.85);
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        draw(&mut image, shape, b, [grey; 3]);
    }
    // decoys stay behind the tokens and may be covered by them
    taken.clear();
    let mut boxes = vec![None; spec.attributes.len()];
    let mut order: Vec<usize> = (0..spec.attributes.len()).filter(|&m| labels[m] == 1).collect();
    order.shuffle(rng);
    for m in order {
        let a = &spec.attributes[m];
        let (top, bottom) = a.region.rows(h);
        let th = token_side(rng);
        let fit = (w as f32 / (th * a.aspect)).min((bottom - top) as f32 / th).min(1.0);
        let th = th * fit;
        let size = ((th * a.aspect).round().max(2.0) as usize, th.round() as usize);
        let b = place(rng, w, h, a.region, size, &taken);
        let color = a.color.map(|c| f32::from(c) / 255.0 + rng.random_range(-1.0f32..=1.0) * spec.color_noise);
        draw(&mut image, a.shape, b, color);
        taken.push(b);
        boxes[m] = Some(b);
    }
    // quantize now so in-memory scenes match what is read back from disk
    let image = Image::from_rgb8(w, h, &image.to_rgb8())?;
    Ok(SyntheticScene { split, image, labels, boxes })
}

/// Renders every scene: train first, then val, then test. Scene `i` draws
/// from its own random stream, so scenes do not depend on each other.
pub fn render_scenes(spec: &SyntheticSpec) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scenes = Vec::with_capacity(spec.samples());
    for (split, n) in [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)] {
        for labels in stratified_labels(spec, n, &mut label_rng) {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(scenes.len() as u64 + 1);
            scenes.push(render_one(spec, split, labels, &mut rng)?);
        }
    }
    Ok(scenes)
}

pub const IMAGE_DIR: &str = "images";
pub const SPEC_FILE: &str = "synthetic.txt";

/// Writes PPM images, the manifest and its sidecars under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let scenes = render_scenes(spec)?;
    fs::create_dir_all(out_dir.join(IMAGE_DIR))?;
    let mut records = Vec::with_capacity(scenes.len());
    let mut sum = [0.0f64; 3];
    let mut pixels = 0.0f64;
    for (i, s) in scenes.iter().enumerate() {
        let path = format!("{IMAGE_DIR}/{i:05}.ppm");
        write_image(&s.image, &out_dir.join(&path))?;
        if s.split == Split::Train {
            let n = (s.image.width() * s.image.height()) as f64;
            let m = s.image.mean_pixel();
            for c in 0..3 {
                sum[c] += m[c] * n;
            }
            pixels += n;
        }
        records.push(Record { path, labels: s.labels.clone(), split: s.split });
    }
    let mean = sum.map(|v| (v / pixels) as f32);
    let names = spec.attributes.iter().map(|a| a.name.clone()).collect();
    let manifest = DatasetManifest::new(out_dir, names, records, mean)?;
    manifest.save(out_dir)?;
    fs::write(out_dir.join(SPEC_FILE), spec.to_kv().to_text())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec { train: 40, val: 10, test: 10, ..SyntheticSpec::standard(seed) }
    }

    #[test]
    fn standard_prevalences_span_half_to_five_percent() {
        let s = SyntheticSpec::standard(0);
        let p: Vec<f64> = s.attributes.iter().map(|a| a.prevalence).collect();
        assert_eq!(p.len(), 8);
        assert_eq!((p[0], p[7]), (0.5, 0.05));
        assert!(p.windows(2).all(|w| w[0] > w[1]));
        s.validate().unwrap();
    }

    #[test]
    fn half_prevalence_lands_in_binomial_band() {
        let spec = SyntheticSpec { train: 2000, val: 0, test: 0, ..SyntheticSpec::standard(11) };
        let rows = stratified_labels(&spec, 2000, &mut ChaCha8Rng::seed_from_u64(11));
        let positives = rows.iter().filter(|r| r[0] == 1).count();
        assert!((960..=1040).contains(&positives), "{positives}");
        for (m, a) in spec.attributes.iter().enumerate() {
            let got = rows.iter().filter(|r| r[m] == 1).count() as f64 / 2000.0;
            assert!((got - a.prevalence).abs() <= 0.02);
        }
    }

    #[test]
    fn tokens_respect_regions_and_labels() {
        let spec = small(3);
        for s in render_scenes(&spec).unwrap() {
            let h = s.image.height();
            for (m, a) in spec.attributes.iter().enumerate() {
                assert_eq!(s.boxes[m].is_some(), s.labels[m] == 1);
                if let Some(b) = s.boxes[m] {
                    assert!(b.x + b.width <= s.image.width() && b.y + b.height <= h);
                    match a.region {
                        Region::LowerHalf => assert!(b.y >= h / 2),
                        Region::UpperHalf => assert!(b.y + b.height <= h / 2),
                        Region::Anywhere => {}
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = small(5);
        let ma = generate_synthetic(&spec, a.path()).unwrap();
        let mb = generate_synthetic(&spec, b.path()).unwrap();
        assert_eq!(ma.records(), mb.records());
        assert_eq!(ma.mean(), mb.mean());
        for r in ma.records() {
            assert_eq!(fs::read(a.path().join(&r.path)).unwrap(), fs::read(b.path().join(&r.path)).unwrap());
        }
        for f in ["manifest.csv", "train.txt", "mean.txt", SPEC_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let other = render_scenes(&small(6)).unwrap();
        assert_ne!(other[0].image, render_scenes(&spec).unwrap()[0].image);
    }

    #[test]
    fn generated_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(7);
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records(), m.records());
        assert_eq!(loaded.split(Split::Val).len(), 10);
        let mean = loaded.compute_mean().unwrap();
        for (a, b) in mean.iter().zip(m.mean()) {
            assert!((a - b).abs() < 1e-5);
        }
        let scenes = render_scenes(&spec).unwrap();
        assert_eq!(loaded.train().load().unwrap().images()[3], scenes[3].image);
    }

    #[test]
    fn ten_samples_give_ten_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { train: 6, val: 2, test: 2, ..SyntheticSpec::standard(1) };
        assert_eq!(generate_synthetic(&spec, dir.path()).unwrap().records().len(), 10);
    }

    #[test]
    fn tall_images_vary_in_size() {
        let spec = SyntheticSpec { width: (20, 30), height: (50, 70), ..small(2) };
        let scenes = render_scenes(&spec).unwrap();
        assert!(scenes.iter().all(|s| (20..=30).contains(&s.image.width()) && (50..=70).contains(&s.image.height())));
        assert!(scenes.iter().any(|s| s.image.width() != scenes[0].image.width()));
    }

    #[test]
    fn oversized_tokens_shrink_without_changing_shape() {
        let mut spec = SyntheticSpec { width: (10, 16), height: (64, 64), token_scale: (0.4, 0.5), distractors: 0, ..small(3) };
        spec.attributes.truncate(2);
        spec.attributes[1].aspect = 0.5;
        for s in render_scenes(&spec).unwrap() {
            for (m, b) in s.boxes.iter().enumerate() {
                let Some(b) = b else { continue };
                assert!(b.x + b.width <= s.image.width() && b.y + b.height <= s.image.height());
                let want = spec.attributes[m].aspect;
                let got = b.width as f32 / b.height as f32;
                assert!((got - want).abs() <= (1.0 + want) / b.height as f32, "{m}: {}x{}", b.width, b.height);
            }
        }
    }

    #[test]
    fn spec_text_round_trips() {
        let mut spec = SyntheticSpec::standard(9);
        spec.attributes[2].aspect = 1.5;
        spec.attributes[3].color = [1, 2, 3];
        let back = SyntheticSpec::from_kv_with(&spec.to_kv(), &SyntheticSpec::standard(0)).unwrap();
        assert_eq!(back, spec);
        assert!(AttributeSpec::parse("x:blob:red:upper:0.5").is_err());
        assert!(AttributeSpec::parse("x:disk:red:upper:1.5").map(|a| a.prevalence).unwrap() > 1.0);
        let mut bad = KvMap::new();
        bad.set("attribute.0", "x:disk:red:upper:1.5");
        assert!(SyntheticSpec::from_kv_with(&bad, &spec).is_err());
    }
}
