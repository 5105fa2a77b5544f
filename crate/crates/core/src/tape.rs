//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends its output node and a [`Record`] holding whatever
//! it needs for the backward pass. [`Tape::backward`] replays the records in
//! exact reverse order, accumulating gradients additively into every node that
//! feeds more than one consumer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    param: Option<usize>,
}

#[derive(Debug)]
enum Op {
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Gap(Var),
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    Sum(Var),
    Dot {
        input: Var,
        coeffs: Vec<f32>,
    },
    WeightedBce {
        logits: Var,
        labels: Vec<f32>,
        weights: Vec<f32>,
    },
}

#[derive(Debug)]
struct Record {
    out: Var,
    op: Op,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f32>,
}

/// Recorded computation graph plus the values and gradients of every node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
}

fn nchw(dims: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("{what} expects NCHW input, got {dims:?}"))),
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_node(&mut self, dims: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            dims,
            data,
            grad: None,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, dims: Vec<usize>, data: Vec<f32>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push_node(dims, data, rg);
        self.records.push(Record { out, op });
        out
    }

    /// Records a differentiable leaf (its gradient is kept after backward).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(t.dims().to_vec(), t.data().to_vec(), true)
    }

    /// Records a leaf that never receives a gradient (inputs, labels).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(t.dims().to_vec(), t.data().to_vec(), false)
    }

    /// Records a trainable parameter identified by its index in the owner's list.
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.dims, n.data.clone()).expect("tape nodes hold consistent dims")
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Number of operations recorded so far.
    /// Which ReLU inputs were positive, over every ReLU on the tape in order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.records
            .iter()
            .filter_map(|r| match r.op {
                Op::Relu(input) => Some(&self.nodes[input.0].data),
                _ => None,
            })
            .flat_map(|d| d.iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Gradients of every parameter leaf, keyed by parameter index.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    // -- operations ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw(self.dims(input), "conv2d")?;
        let (o, ki, kh, kw) = nchw(self.dims(kernel), "conv2d kernel")?;
        if ki != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {ki}"
            )));
        }
        if self.dims(bias) != [o] {
            return Err(Error::shape(format!(
                "conv2d: bias dims {:?}, expected [{o}]",
                self.dims(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: {h}x{w} input with padding {padding} is smaller than {kh}x{kw} kernel"
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(
            self.value(input),
            n,
            &geom,
            self.value(kernel),
            o,
            self.value(bias),
        );
        let dims = vec![n, o, geom.out_h, geom.out_w];
        Ok(self.push_op(
            dims,
            out,
            &[input, kernel, bias],
            Op::Conv2d { input, kernel, bias, geom, cols },
        ))
    }

    fn check_channel_params(&self, c: usize, scale: Var, shift: Var) -> Result<()> {
        if self.dims(scale) != [c] || self.dims(shift) != [c] {
            return Err(Error::shape(format!(
                "batch norm over {c} channels given scale {:?}, shift {:?}",
                self.dims(scale),
                self.dims(shift)
            )));
        }
        Ok(())
    }

    /// Batch normalisation using the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        epsilon: f32,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = nchw(self.dims(input), "batch_norm")?;
        self.check_channel_params(c, scale, shift)?;
        let count = n * h * w;
        if count < 2 {
            return Err(Error::Degenerate(format!(
                "batch norm in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        let hw = h * w;
        let x = self.value(input);
        let mut mean = vec![0.0f32; c];
        let mut var_b = vec![0.0f32; c];
        let mut var_u = vec![0.0f32; c];
        for ch in 0..c {
            let plane = |s: usize| &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let m = (0..n)
                .map(|s| plane(s).iter().map(|&v| v as f64).sum::<f64>())
                .sum::<f64>()
                / count as f64;
            let ss = (0..n)
                .map(|s| plane(s).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
                .sum::<f64>();
            mean[ch] = m as f32;
            var_b[ch] = (ss / count as f64) as f32;
            var_u[ch] = (ss / (count - 1) as f64) as f32;
        }
        let inv_std: Vec<f32> = var_b.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (g, b) = (self.value(scale), self.value(shift));
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let dims = self.dims(input).to_vec();
        let v = self.push_op(
            dims,
            out,
            &[input, scale, shift],
            Op::BatchNorm { input, scale, shift, xhat, inv_std },
        );
        Ok((v, BatchStats { mean, var: var_u }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f32],
        running_var: &[f32],
        epsilon: f32,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw(self.dims(input), "batch_norm")?;
        self.check_channel_params(c, scale, shift)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch norm running statistics length"));
        }
        let hw = h * w;
        let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (x, g, b) = (self.value(input), self.value(scale), self.value(shift));
        let mut out = vec![0.0f32; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = g[ch] * (x[i] - running_mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let dims = self.dims(input).to_vec();
        Ok(self.push_op(
            dims,
            out,
            &[input, scale, shift],
            Op::ChannelAffine {
                input,
                scale,
                shift,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, out, &[input], Op::Relu(input))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    /// Elementwise sum of two identically shaped values (the residual merge).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "residual_add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push_op(dims, out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push_op(dims, out, &[a, b], Op::Mul(a, b)))
    }

    /// Spatial mean of every feature map: NCHW to NC.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.dims(input), "global_average_pool")?;
        let hw = h * w;
        let out = self
            .value(input)
            .chunks_exact(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        Ok(self.push_op(vec![n, c], out, &[input], Op::Gap(input)))
    }

    /// `input * weight + bias` for `input: N x F`, `weight: F x M`, `bias: M`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = match *self.dims(input) {
            [n, f] => (n, f),
            ref d => return Err(Error::shape(format!("affine input must be N x F, got {d:?}"))),
        };
        let m = match *self.dims(weight) {
            [fi, m] if fi == f => m,
            ref d => {
                return Err(Error::shape(format!(
                    "affine weight {d:?} does not match {f} input features"
                )))
            }
        };
        if self.dims(bias) != [m] {
            return Err(Error::shape(format!(
                "affine bias {:?}, expected [{m}]",
                self.dims(bias)
            )));
        }
        let mut out: Vec<f32> = self.value(bias).repeat(n);
        gemm(
            MatRef::new(self.value(input), n, f),
            MatRef::new(self.value(weight), f, m),
            1.0,
            &mut out,
        );
        Ok(self.push_op(vec![n, m], out, &[input, weight, bias], Op::Affine { input, weight, bias }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| kernels::sigmoid(v)).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, out, &[input], Op::Sigmoid(input))
    }

    /// Inverted dropout: zeroes each value with probability `rate` and scales
    /// survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0,1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(input).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(input).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let dims = self.dims(input).to_vec();
        Ok(self.push_op(dims, out, &[input], Op::Dropout { input, mask }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push_op(vec![1], vec![s], &[input], Op::Sum(input))
    }

    /// Scalar `sum_i coeffs[i] * input[i]`.
    pub fn dot(&mut self, input: Var, coeffs: &[f32]) -> Result<Var> {
        if coeffs.len() != self.value(input).len() {
            return Err(Error::shape(format!(
                "dot: {} coefficients for {} values",
                coeffs.len(),
                self.value(input).len()
            )));
        }
        let s = self
            .value(input)
            .iter()
            .zip(coeffs)
            .map(|(&x, &c)| x as f64 * c as f64)
            .sum::<f64>() as f32;
        Ok(self.push_op(vec![1], vec![s], &[input], Op::Dot { input, coeffs: coeffs.to_vec() }))
    }

    /// Per-column weighted sigmoid BCE over `N x M` logits: returns an `M` vector.
    ///
    /// `labels` and `weights` are flat `N x M`, row-major like the logits.
    pub(crate) fn weighted_bce(
        &mut self,
        logits: Var,
        labels: Vec<f32>,
        weights: Vec<f32>,
    ) -> Result<Var> {
        let (n, m) = match *self.dims(logits) {
            [n, m] => (n, m),
            ref d => return Err(Error::shape(format!("logits must be N x M, got {d:?}"))),
        };
        if labels.len() != n * m || weights.len() != n * m {
            return Err(Error::shape("labels/weights do not match logits"));
        }
        let x = self.value(logits);
        let mut acc = vec![0.0f64; m];
        for (k, (&z, (&y, &w))) in x.iter().zip(labels.iter().zip(weights.iter())).enumerate() {
            acc[k % m] += w as f64 * kernels::bce_with_logit(z as f64, y as f64);
        }
        let out = acc.iter().map(|s| (s / n as f64) as f32).collect();
        Ok(self.push_op(vec![m], out, &[logits], Op::WeightedBce { logits, labels, weights }))
    }

    // -- backward -----------------------------------------------------------

    /// Backpropagates from a scalar, replacing any gradients from earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Backpropagates an explicit output gradient `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: &[f32]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(Error::shape("seed gradient length"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(seed.to_vec());
        let Tape { nodes, records } = self;
        for rec in records.iter().rev() {
            let Some(dy) = nodes[rec.out.0].grad.take() else {
                continue;
            };
            backward_op(nodes, &rec.op, &dy);
            nodes[rec.out.0].grad = Some(dy);
        }
        Ok(())
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_op(nodes: &mut [Node], op: &Op, dy: &[f32]) {
    match op {
        Op::Conv2d { input, kernel, bias, geom, cols } => {
            let n = nodes[input.0].dims[0];
            let o = nodes[kernel.0].dims[0];
            let g = kernels::conv_backward(
                dy,
                n,
                geom,
                &nodes[kernel.0].data,
                o,
                cols,
                wants(nodes, *input),
            );
            if let Some(dx) = g.input {
                add_into(&mut nodes[input.0].grad, &dx);
            }
            if wants(nodes, *kernel) {
                add_into(&mut nodes[kernel.0].grad, &g.kernel);
            }
            if wants(nodes, *bias) {
                add_into(&mut nodes[bias.0].grad, &g.bias);
            }
        }
        Op::BatchNorm { input, scale, shift, xhat, inv_std } => {
            let (n, c, h, w) = nchw(&nodes[input.0].dims, "").expect("checked in forward");
            let hw = h * w;
            let count = (n * hw) as f64;
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = vec![0.0f32; dy.len()];
            let gamma = &nodes[scale.0].data;
            for ch in 0..c {
                let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        sdy += dy[i] as f64;
                        sdyx += dy[i] as f64 * xhat[i] as f64;
                    }
                }
                dbeta[ch] = sdy as f32;
                dgamma[ch] = sdyx as f32;
                let k = gamma[ch] as f64 * inv_std[ch] as f64 / count;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = (k * (count * dy[i] as f64 - sdy - xhat[i] as f64 * sdyx)) as f32;
                    }
                }
            }
            if wants(nodes, *input) {
                add_into(&mut nodes[input.0].grad, &dx);
            }
            if wants(nodes, *scale) {
                add_into(&mut nodes[scale.0].grad, &dgamma);
            }
            if wants(nodes, *shift) {
                add_into(&mut nodes[shift.0].grad, &dbeta);
            }
        }
        Op::ChannelAffine { input, scale, shift, mean, inv_std } => {
            let (n, c, h, w) = nchw(&nodes[input.0].dims, "").expect("checked in forward");
            let hw = h * w;
            let x = &nodes[input.0].data;
            let gamma = &nodes[scale.0].data;
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            let mut dx = vec![0.0f32; dy.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        dbeta[ch] += dy[i] as f64;
                        dgamma[ch] += (dy[i] * (x[i] - mean[ch]) * inv_std[ch]) as f64;
                        dx[i] = dy[i] * gamma[ch] * inv_std[ch];
                    }
                }
            }
            let dgamma: Vec<f32> = dgamma.into_iter().map(|v| v as f32).collect();
            let dbeta: Vec<f32> = dbeta.into_iter().map(|v| v as f32).collect();
            if wants(nodes, *input) {
                add_into(&mut nodes[input.0].grad, &dx);
            }
            if wants(nodes, *scale) {
                add_into(&mut nodes[scale.0].grad, &dgamma);
            }
            if wants(nodes, *shift) {
                add_into(&mut nodes[shift.0].grad, &dbeta);
            }
        }
        Op::Relu(input) => {
            if wants(nodes, *input) {
                let dx: Vec<f32> = nodes[input.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                add_into(&mut nodes[input.0].grad, &dx);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if wants(nodes, *v) {
                    add_into(&mut nodes[v.0].grad, dy);
                }
            }
        }
        Op::Mul(a, b) => {
            let da: Vec<f32> = nodes[b.0].data.iter().zip(dy).map(|(x, g)| x * g).collect();
            let db: Vec<f32> = nodes[a.0].data.iter().zip(dy).map(|(x, g)| x * g).collect();
            if wants(nodes, *a) {
                add_into(&mut nodes[a.0].grad, &da);
            }
            if wants(nodes, *b) {
                add_into(&mut nodes[b.0].grad, &db);
            }
        }
        Op::Gap(input) => {
            if wants(nodes, *input) {
                let d = &nodes[input.0].dims;
                let hw = d[2] * d[3];
                let inv = 1.0 / hw as f32;
                let dx: Vec<f32> = dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                add_into(&mut nodes[input.0].grad, &dx);
            }
        }
        Op::Affine { input, weight, bias } => {
            let (n, f) = (nodes[input.0].dims[0], nodes[input.0].dims[1]);
            let m = nodes[weight.0].dims[1];
            if wants(nodes, *input) {
                let mut dx = vec![0.0f32; n * f];
                gemm(
                    MatRef::new(dy, n, m),
                    MatRef::t(&nodes[weight.0].data, m, f),
                    0.0,
                    &mut dx,
                );
                add_into(&mut nodes[input.0].grad, &dx);
            }
            if wants(nodes, *weight) {
                let mut dw = vec![0.0f32; f * m];
                gemm(
                    MatRef::t(&nodes[input.0].data, f, n),
                    MatRef::new(dy, n, m),
                    0.0,
                    &mut dw,
                );
                add_into(&mut nodes[weight.0].grad, &dw);
            }
            if wants(nodes, *bias) {
                let mut db = vec![0.0f32; m];
                for row in dy.chunks_exact(m) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                add_into(&mut nodes[bias.0].grad, &db);
            }
        }
        Op::Sigmoid(input) => {
            if wants(nodes, *input) {
                let dx: Vec<f32> = nodes[input.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 - s)
                    })
                    .collect();
                add_into(&mut nodes[input.0].grad, &dx);
            }
        }
        Op::Dropout { input, mask } => {
            if wants(nodes, *input) {
                let dx: Vec<f32> = mask.iter().zip(dy).map(|(m, g)| m * g).collect();
                add_into(&mut nodes[input.0].grad, &dx);
            }
        }
        Op::Sum(input) => {
            if wants(nodes, *input) {
                let dx = vec![dy[0]; nodes[input.0].data.len()];
                add_into(&mut nodes[input.0].grad, &dx);
            }
        }
        Op::Dot { input, coeffs } => {
            if wants(nodes, *input) {
                let dx: Vec<f32> = coeffs.iter().map(|c| c * dy[0]).collect();
                add_into(&mut nodes[input.0].grad, &dx);
            }
        }
        Op::WeightedBce { logits, labels, weights } => {
            if wants(nodes, *logits) {
                let n = nodes[logits.0].dims[0];
                let m = nodes[logits.0].dims[1];
                let inv_n = 1.0 / n as f32;
                let dx: Vec<f32> = nodes[logits.0]
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| {
                        weights[k] * (kernels::sigmoid(x) - labels[k]) * inv_n * dy[k % m]
                    })
                    .collect();
                add_into(&mut nodes[logits.0].grad, &dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let x = tape.constant(&t(&[1, 1, 3, 3], &data));
        let k = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.dims(y), [1, 1, 3, 3]);
        assert_eq!(tape.value(y), &data[..]);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let k = tape.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.dims(y), [1, 1, 1, 1]);
        assert_eq!(tape.value(y), [9.0]);
    }

    #[test]
    fn conv_output_dims_with_stride_and_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3, 8, 8]).unwrap());
        let k = tape.leaf(&Tensor::zeros(&[4, 3, 3, 3]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[4]).unwrap());
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.dims(y), [2, 4, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_small_input() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let k = tape.leaf(&Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[1]).unwrap());
        assert!(matches!(tape.conv2d(x, k, b, 1, 1), Err(Error::Shape(_))));
        let x = tape.constant(&Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_constant_input_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2, 2, 3, 3], 4.5).unwrap());
        let g = tape.leaf(&Tensor::full(&[2], 1.0).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_standardises_each_channel() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..2 * 2 * 4 * 4)
            .map(|i| ((i * 37) % 23) as f32 * 0.7 + if (i / 16) % 2 == 0 { 10.0 } else { -3.0 })
            .collect();
        let x = tape.constant(&t(&[2, 2, 4, 4], &data));
        let g = tape.leaf(&Tensor::full(&[2], 1.0).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| out[(s * 2 + ch) * 16..(s * 2 + ch + 1) * 16].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batch_norm_single_element_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        let g = tape.leaf(&Tensor::full(&[2], 1.0).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn relu_and_residual_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), [0.0, 0.0, 2.0]);
        let z = tape.constant(&Tensor::zeros(&[3]).unwrap());
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let other = tape.constant(&Tensor::zeros(&[4]).unwrap());
        assert!(tape.add(x, other).is_err());
    }

    #[test]
    fn residual_add_passes_gradient_to_both_addends() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let b = tape.leaf(&t(&[3], &[0.0, 4.0, -1.0]));
        let s = tape.add(a, b).unwrap();
        let loss = tape.dot(s, &[0.3, -0.7, 2.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), [0.3, -0.7, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), [0.3, -0.7, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn gap_means_and_spreads_gradient_uniformly() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.global_average_pool(x).unwrap();
        assert_eq!(tape.dims(p), [1, 1]);
        assert_eq!(tape.value(p), [2.5]);
        let loss = tape.dot(p, &[2.0]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, [0.5; 4]);
        assert_eq!(g.iter().sum::<f32>(), 2.0);

        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2, 3, 5, 7], -1.25).unwrap());
        let p = tape.global_average_pool(x).unwrap();
        assert_eq!(tape.value(p), [-1.25; 6]);
    }

    #[test]
    fn affine_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.leaf(&Tensor::zeros(&[2]).unwrap());
        let y = tape.affine(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zero_w = tape.leaf(&Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(&t(&[3], &[0.5, -1.0, 2.0]));
        let y = tape.affine(x, zero_w, b).unwrap();
        assert_eq!(tape.value(y), [0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        let bad = tape.leaf(&Tensor::zeros(&[3, 3]).unwrap());
        assert!(tape.affine(x, bad, b).is_err());
    }

    #[test]
    fn sigmoid_values_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[8], &[0.0, 1.0, -1.0, 5.0, -5.0, 30.0, -30.0, -100.0]));
        let s = tape.sigmoid(x);
        let v = tape.value(s);
        assert_eq!(v[0], 0.5);
        for (p, q) in [(1, 2), (3, 4), (5, 6)] {
            assert!((v[q] - (1.0 - v[p])).abs() < 1e-6);
        }
        assert!(v[7] > 0.0 && v[7] <= 1e-40 && v[7].is_finite());
    }

    #[test]
    fn sum_and_square_gradients() {
        let vals = [0.5f32, -1.5, 2.0, 3.25];
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &vals));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), [1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &vals));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let want: Vec<f32> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), [1.0, 2.0]);
    }
}
