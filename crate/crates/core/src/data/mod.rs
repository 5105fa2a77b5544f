//! Images, augmentation, datasets and batching.

pub mod augment;
pub mod batch;
pub mod image;
pub mod manifest;
pub mod resize;
pub mod synthetic;

pub use augment::{augment, AugmentationConfig};
pub use batch::{make_batch, shuffled_batches, Sample};
pub use image::{read_image, write_image, Image};
pub use manifest::{DatasetManifest, LoadedSplit, Record, Split, SplitView, TrainData, TrainSplit};
pub use resize::{resize_aspect_preserving, resize_fixed, resize_registry, ResizePolicy};
pub use synthetic::{generate_synthetic, render_scenes, AttributeSpec, Region, Shape, SyntheticScene, SyntheticSpec};
