//! Assembling network input batches.
//!
//! Output tensors are `N x 3 x S x S`, channels in RGB order, samples in
//! `[0, 1]` minus the dataset mean pixel when mean subtraction is on.

use rand::seq::SliceRandom;
use rand::RngCore;

use super::augment::{augment_pixels, subtract_mean, AugmentationConfig};
use super::image::Image;
use super::resize::ResizePolicy;
use crate::error::{Error, Result};
use crate::matrix::LabelMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub image: &'a Image,
    pub labels: &'a [u8],
}

/// Builds one batch. With an rng the batch is a training batch: one canvas
/// side is drawn for the whole batch, then every member is augmented and
/// resized to it. Without one, the policy's evaluation side is used and no
/// augmentation happens.
pub fn make_batch(
    samples: &[Sample<'_>],
    policy: &dyn ResizePolicy,
    augmentation: &AugmentationConfig,
    mean: [f32; 3],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Tensor, LabelMatrix)> {
    let Some(first) = samples.first() else {
        return Err(Error::data("cannot build a batch from no samples"));
    };
    let m = first.labels.len();
    let side = match rng.as_deref_mut() {
        Some(r) => policy.sample_side(r),
        None => policy.eval_side(),
    };
    let n = samples.len();
    let plane = side * side;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n * m);
    for (i, s) in samples.iter().enumerate() {
        if s.labels.len() != m {
            return Err(Error::shape("samples in a batch disagree on attribute count"));
        }
        labels.extend_from_slice(s.labels);
        let mut img = match rng.as_deref_mut() {
            Some(r) => {
                let pre = augment_pixels(s.image, augmentation, mean, r);
                policy.apply(&pre, side, mean, Some(r))?
            }
            None => policy.apply(s.image, side, mean, None)?,
        };
        if augmentation.mean_subtraction {
            subtract_mean(&mut img, mean);
        }
        let out = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
    }
    Ok((Tensor::new(&[n, 3, side, side], data)?, LabelMatrix::binary(n, m, labels)?))
}

/// A seeded shuffle of `0..n` cut into batches. A trailing batch of one is
/// dropped when `n > 1`, since batch statistics of a single image are empty.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if n > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::resize::resize_registry;
    use crate::kv::KvMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(name: &str, opts: &[(&str, &str)]) -> Box<dyn ResizePolicy> {
        let mut kv = KvMap::new();
        for (k, v) in opts {
            kv.set(k, v);
        }
        resize_registry().create(name, &kv).unwrap()
    }

    #[test]
    fn single_sample_batch_dims() {
        let img = Image::filled(30, 50, [0.5; 3]).unwrap();
        let labels = [1u8, 0];
        let s = [Sample { image: &img, labels: &labels }];
        let p = policy("aspect_preserving", &[("sizes", "40")]);
        let (x, y) = make_batch(&s, p.as_ref(), &AugmentationConfig::default(), [0.5; 3], None).unwrap();
        assert_eq!(x.dims(), [1, 3, 40, 40]);
        assert_eq!(y.row(0), labels);
        // constant image equal to the mean subtracts to zero, padding included
        assert!(x.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn single_size_set_fixes_every_batch() {
        let imgs: Vec<Image> = (1..6).map(|i| Image::filled(10 * i, 64, [0.3; 3]).unwrap()).collect();
        let labels = [0u8];
        let samples: Vec<Sample> = imgs.iter().map(|image| Sample { image, labels: &labels }).collect();
        let p = policy("aspect_preserving", &[("sizes", "64")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let (x, _) = make_batch(&samples, p.as_ref(), &AugmentationConfig::default(), [0.0; 3], Some(&mut rng)).unwrap();
            assert_eq!(x.dims(), [5, 3, 64, 64]);
        }
    }

    #[test]
    fn training_batches_use_one_side_from_the_set() {
        let img = Image::filled(20, 40, [0.3; 3]).unwrap();
        let labels = [0u8];
        let samples = vec![Sample { image: &img, labels: &labels }; 3];
        let p = policy("aspect_preserving", &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..40 {
            let (x, _) = make_batch(&samples, p.as_ref(), &AugmentationConfig::default(), [0.0; 3], Some(&mut rng)).unwrap();
            assert_eq!(x.dims()[2], x.dims()[3]);
            seen.insert(x.dims()[2]);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), [56, 64, 72, 80]);
    }

    #[test]
    fn labels_follow_images_through_shuffling() {
        // each image is a constant tracer value encoding its index; labels
        // carry the same index in binary
        let n = 37;
        let imgs: Vec<Image> = (0..n).map(|i| Image::filled(24, 12, [i as f32 / 64.0, 0.0, 0.0]).unwrap()).collect();
        let codes: Vec<Vec<u8>> = (0..n).map(|i| (0..6).map(|b| ((i >> b) & 1) as u8).collect()).collect();
        let p = policy("aspect_preserving", &[("sizes", "16,24")]);
        let aug = AugmentationConfig { mean_subtraction: false, ..AugmentationConfig::disabled() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = shuffled_batches(n, 8, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), n);
        for idx in batches {
            let samples: Vec<Sample> = idx.iter().map(|&i| Sample { image: &imgs[i], labels: &codes[i] }).collect();
            let (x, y) = make_batch(&samples, p.as_ref(), &aug, [0.0; 3], Some(&mut rng)).unwrap();
            let side = x.dims()[2];
            for r in 0..idx.len() {
                let tracer = x.at(&[r, 0, side / 2, side / 2]);
                let decoded: usize = y.row(r).iter().enumerate().map(|(b, &v)| usize::from(v) << b).sum();
                assert_eq!((tracer * 64.0).round() as usize, decoded);
            }
        }
    }

    #[test]
    fn channels_are_planar_rgb() {
        let img = Image::filled(4, 4, [0.1, 0.2, 0.3]).unwrap();
        let labels = [1u8];
        let p = policy("fixed", &[("resize", "4"), ("crop", "4")]);
        let aug = AugmentationConfig { mean_subtraction: false, ..AugmentationConfig::disabled() };
        let (x, _) = make_batch(&[Sample { image: &img, labels: &labels }], p.as_ref(), &aug, [0.0; 3], None).unwrap();
        assert_eq!((x.at(&[0, 0, 3, 3]), x.at(&[0, 1, 0, 0]), x.at(&[0, 2, 1, 2])), (0.1, 0.2, 0.3));
    }

    #[test]
    fn empty_batch_and_zero_size_are_errors() {
        let p = policy("fixed", &[]);
        assert!(make_batch(&[], p.as_ref(), &AugmentationConfig::default(), [0.0; 3], None).is_err());
        assert!(shuffled_batches(4, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let b = shuffled_batches(17, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [8, 8]);
        assert_eq!(shuffled_batches(1, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().len(), 1);
    }
}
