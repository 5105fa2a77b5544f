#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use attrikit::data::{generate_synthetic, AttributeSpec, AugmentationConfig, DatasetManifest, Region, Shape, SyntheticSpec};
use attrikit::kv::KvMap;
use attrikit::NetworkConfig;

/// Three easy attributes on small square images.
pub fn tiny_spec(seed: u64, train: usize, val: usize, test: usize) -> SyntheticSpec {
    let attributes = vec![
        AttributeSpec::new("red_disk", Shape::Disk, "red", Region::Anywhere, 0.5).unwrap(),
        AttributeSpec::new("blue_square", Shape::Square, "blue", Region::UpperHalf, 0.4).unwrap(),
        AttributeSpec::new("green_cross", Shape::Cross, "green", Region::LowerHalf, 0.3).unwrap(),
    ];
    SyntheticSpec {
        width: (24, 24),
        height: (24, 24),
        attributes,
        train,
        val,
        test,
        token_scale: (0.3, 0.4),
        distractors: 0,
        ..SyntheticSpec::standard(seed)
    }
}

pub fn tiny_dataset(dir: &Path, seed: u64, train: usize, val: usize, test: usize) -> DatasetManifest {
    generate_synthetic(&tiny_spec(seed, train, val, test), dir).unwrap()
}

pub fn tiny_net(m: usize) -> NetworkConfig {
    NetworkConfig::new(4, &[1, 1], &[4, 8], m)
}

/// Squash to `side` with no cropping or random pixel changes.
pub fn plain_augmentation(side: usize) -> AugmentationConfig {
    let mut resize_options = KvMap::new();
    resize_options.set("resize", side);
    resize_options.set("crop", side);
    AugmentationConfig { resize_policy: "fixed".into(), resize_options, ..AugmentationConfig::disabled() }
}
