//! Slice-level forward/backward kernels shared by the tape.

use crate::linalg::{gemm, MatRef};

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one CHW sample into a `(C*Kh*Kw) x (Oh*Ow)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let l = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - pad;
                    let seg = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, out) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - pad;
                        *out = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix into a CHW gradient.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let l = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let src = &cols[row * l..(row + 1) * l];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch; returns the output and the saved columns.
pub(crate) fn conv_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    kernel: &[f32],
    out_channels: usize,
    bias: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let (kr, l) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0f32; batch * kr * l];
    let mut out = vec![0.0f32; batch * out_channels * l];
    for n in 0..batch {
        let col = &mut cols[n * kr * l..(n + 1) * kr * l];
        im2col(&x[n * g.input_len()..(n + 1) * g.input_len()], g, col);
        let y = &mut out[n * out_channels * l..(n + 1) * out_channels * l];
        for (o, row) in y.chunks_exact_mut(l).enumerate() {
            row.fill(bias[o]);
        }
        gemm(
            MatRef::new(kernel, out_channels, kr),
            MatRef::new(col, kr, l),
            1.0,
            y,
        );
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv_backward(
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    kernel: &[f32],
    out_channels: usize,
    cols: &[f32],
    want_input: bool,
) -> ConvGrads {
    let (kr, l) = (g.col_rows(), g.col_cols());
    let mut dk = vec![0.0f32; out_channels * kr];
    let mut db = vec![0.0f32; out_channels];
    let mut dx = want_input.then(|| vec![0.0f32; batch * g.input_len()]);
    let mut dcols = if want_input { vec![0.0f32; kr * l] } else { Vec::new() };
    for n in 0..batch {
        let dyn_ = &dy[n * out_channels * l..(n + 1) * out_channels * l];
        let col = &cols[n * kr * l..(n + 1) * kr * l];
        gemm(MatRef::new(dyn_, out_channels, l), MatRef::t(col, l, kr), 1.0, &mut dk);
        for (o, row) in dyn_.chunks_exact(l).enumerate() {
            db[o] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::t(kernel, kr, out_channels),
                MatRef::new(dyn_, out_channels, l),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, g, &mut dx[n * g.input_len()..(n + 1) * g.input_len()]);
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln s(x) + (1-y) ln(1-s(x))]` evaluated as `max(x,0) - x*y + ln(1+e^{-|x|})`.
pub(crate) fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
