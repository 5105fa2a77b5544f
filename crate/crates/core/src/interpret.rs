//! GradCAM heatmaps for single attributes.
//!
//! The gradient of one attribute's pre-sigmoid logit with respect to the
//! final-stage feature maps `A^k` gives channel weights `alpha_k` (spatial
//! means). The map `relu(sum_k alpha_k A^k)` is divided by its maximum and
//! bilinearly upsampled to the input size.

use std::fmt::Write as _;

use crate::data::image::Image;
use crate::data::resize::resize_bilinear;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub attribute: usize,
    pub logit: f32,
    pub probability: f32,
    /// Feature-map resolution, row-major, values in `[0, 1]`.
    pub coarse: Vec<f32>,
    pub coarse_width: usize,
    pub coarse_height: usize,
    /// Input resolution, row-major.
    pub values: Vec<f32>,
    pub width: usize,
    pub height: usize,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.coarse.iter().all(|&v| v == 0.0)
    }

    /// Share of the upsampled mass in rows `[top, bottom)`; `None` for an
    /// all-zero map.
    pub fn mass_in_rows(&self, top: usize, bottom: usize) -> Option<f64> {
        let total: f64 = self.values.iter().map(|&v| f64::from(v)).sum();
        if total <= 0.0 {
            return None;
        }
        let part: f64 = self.values[top * self.width..bottom.min(self.height) * self.width].iter().map(|&v| f64::from(v)).sum();
        Some(part / total)
    }

    pub fn lower_half_mass(&self) -> Option<f64> {
        self.mass_in_rows(self.height / 2, self.height)
    }

    /// Entropy of the normalized coarse mass divided by its maximum, so 0
    /// means one hot cell and 1 means uniform. `None` for an all-zero map.
    pub fn spread(&self) -> Option<f64> {
        let total: f64 = self.coarse.iter().map(|&v| f64::from(v)).sum();
        if total <= 0.0 {
            return None;
        }
        if self.coarse.len() == 1 {
            return Some(0.0);
        }
        let h: f64 = self
            .coarse
            .iter()
            .map(|&v| f64::from(v) / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        Some(h / (self.coarse.len() as f64).ln())
    }
}

/// GradCAM for `attribute` on a single prepared input of shape `1 x C x H x W`.
/// The network is only read; all gradients live on a private tape.
pub fn gradcam(net: &Network, input: &Tensor, attribute: usize) -> Result<Heatmap> {
    let m = net.config().num_attributes;
    if attribute >= m {
        return Err(Error::shape(format!("attribute {attribute} out of range 0..{m}")));
    }
    let d = input.dims();
    if d.len() != 4 || d[0] != 1 {
        return Err(Error::shape(format!("gradcam takes one image as 1 x C x H x W, got {d:?}")));
    }
    let (height, width) = (d[2], d[3]);
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let out = net.forward_eval(&mut tape, x)?;
    let logit = tape.value(out.logits)[attribute];
    if !logit.is_finite() {
        return Err(Error::NonFinite(format!("logit of attribute {attribute}")));
    }
    let mut seed = vec![0.0; m];
    seed[attribute] = 1.0;
    tape.backward_with(out.logits, &seed)?;
    let fd = tape.dims(out.features).to_vec();
    let (k, fh, fw) = (fd[1], fd[2], fd[3]);
    let plane = fh * fw;
    let feats = tape.value(out.features);
    let zeros = vec![0.0; feats.len()];
    let grads = tape.grad(out.features).unwrap_or(&zeros);
    let mut cam = vec![0.0f32; plane];
    for c in 0..k {
        let g = &grads[c * plane..(c + 1) * plane];
        let alpha = g.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (acc, &a) in cam.iter_mut().zip(&feats[c * plane..(c + 1) * plane]) {
            *acc += (alpha * f64::from(a)) as f32;
        }
    }
    let peak = cam.iter().fold(0.0f32, |p, &v| p.max(v));
    for v in &mut cam {
        *v = if peak > 0.0 { v.max(0.0) / peak } else { 0.0 };
    }
    let values = upsample(&cam, fw, fh, width, height)?;
    Ok(Heatmap {
        attribute,
        logit,
        probability: 1.0 / (1.0 + (-logit).exp()),
        coarse: cam,
        coarse_width: fw,
        coarse_height: fh,
        values,
        width,
        height,
    })
}

fn upsample(map: &[f32], w: usize, h: usize, width: usize, height: usize) -> Result<Vec<f32>> {
    let grey = Image::new(w, h, map.iter().flat_map(|&v| [v; 3]).collect())?;
    let up = resize_bilinear(&grey, width, height)?;
    Ok(up.data().chunks_exact(3).map(|p| p[0].clamp(0.0, 1.0)).collect())
}

/// The jet colormap: dark blue at 0 through cyan, yellow, to dark red at 1.
pub fn jet(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// `(1 - alpha) * image + alpha * jet(heatmap)`.
pub fn overlay(image: &Image, heatmap: &Heatmap, alpha: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("overlay alpha {alpha} not in [0,1]")));
    }
    if (image.width(), image.height()) != (heatmap.width, heatmap.height) {
        return Err(Error::shape(format!(
            "image {}x{} vs heatmap {}x{}",
            image.width(),
            image.height(),
            heatmap.width,
            heatmap.height
        )));
    }
    let mut out = image.clone();
    for (px, &h) in out.data_mut().chunks_exact_mut(3).zip(&heatmap.values) {
        let c = jet(h);
        for k in 0..3 {
            px[k] = (1.0 - alpha) * px[k] + alpha * c[k];
        }
    }
    Ok(out)
}

/// Key=value summary written next to an overlay image.
pub fn sidecar_text(heatmap: &Heatmap, name: &str, threshold: f32) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "attribute={name}");
    let _ = writeln!(s, "probability={:.6}", heatmap.probability);
    let _ = writeln!(s, "logit={:.6}", heatmap.logit);
    let _ = writeln!(s, "threshold={threshold}");
    let verdict = if heatmap.probability >= threshold { "positive" } else { "negative" };
    let _ = writeln!(s, "verdict={verdict}");
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"));
    let _ = writeln!(s, "spread={}", fmt(heatmap.spread()));
    let _ = writeln!(s, "lower_half_mass={}", fmt(heatmap.lower_half_mass()));
    s
}
