//! Central finite-difference verification of tape gradients.
//!
//! Numeric derivatives only ever call forward passes, so they are independent
//! of the backward rules they check. Non-scalar outputs are reduced with a
//! fixed random projection, accumulated in f64, before differencing.
//! Agreement is measured per tensor in the Euclidean norm.
//!
//! In the full-network check a coordinate is dropped when the two probes see
//! different ReLU sign patterns; the count is reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::bce_with_logit;
use crate::loss::{self, AttributeWeights};
use crate::matrix::LabelMatrix;
use crate::network::{HeadKind, Network, NetworkConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_EPSILON: f32 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f32,
    /// Per-element denominator floor, so tensors whose true gradient is zero
    /// are compared absolutely.
    pub floor: f64,
    /// Upper bound on checked elements per input tensor (sampled when larger).
    pub max_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { epsilon: FD_EPSILON, floor: 2e-3, max_per_tensor: 48 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm over one tensor's checked
/// elements. The denominator never drops below `floor * sqrt(len)`.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(floor * (analytic.len() as f64).sqrt());
    if scale == 0.0 { 0.0 } else { diff / scale }
}

fn projection(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn sample_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|_| rng.random_range(0..len)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Checks `f` with respect to every tensor in `inputs`.
///
/// `f` receives fresh leaf handles for the inputs on a new tape and returns
/// the output to differentiate.
pub fn check<F>(name: &str, inputs: &[Tensor], seed: u64, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        // the projected value is formed in f64 from the f32 outputs so that
        // rounding of the reduction does not swamp the difference quotient
        let coeffs = projection(tape.value(out).len(), seed);
        let value = tape
            .value(out)
            .iter()
            .zip(&coeffs)
            .map(|(&y, &c)| y as f64 * c as f64)
            .sum::<f64>();
        let mut grads = Vec::new();
        if want_grad {
            tape.backward_with(out, &coeffs)?;
            for (v, t) in vars.iter().zip(ins) {
                grads.push(tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for i in sample_indices(t.len(), opts.max_per_tensor, &mut rng) {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + opts.epsilon;
            let (plus, _) = eval(&work, false)?;
            work[ti].data_mut()[i] = orig - opts.epsilon;
            let (minus, _) = eval(&work, false)?;
            work[ti].data_mut()[i] = orig;
            a.push(analytic[ti][i] as f64);
            n.push((plus - minus) / (2.0 * opts.epsilon as f64));
        }
        worst = worst.max(finite_error(name, &a, &n, opts.floor)?);
        checked += a.len();
    }
    Ok(GradCheckReport { name: name.to_string(), checked, skipped: 0, max_rel_error: worst })
}

fn finite_error(name: &str, analytic: &[f64], numeric: &[f64], floor: f64) -> Result<f64> {
    let err = tensor_relative_error(analytic, numeric, floor);
    if err.is_finite() {
        Ok(err)
    } else {
        Err(Error::NonFinite(format!("{name}: gradient check produced {err}")))
    }
}

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("valid dims")
}

/// Uniform values in `[-1,1]` kept at least `gap` away from zero (ReLU kink).
fn uniform_off_zero(dims: &[usize], gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(dims, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * 4.0;
        }
    }
    t
}

/// Small two-stage network used by the full-model check.
pub fn tiny_network_config(num_attributes: usize) -> NetworkConfig {
    NetworkConfig::new(4, &[1, 1], &[4, 8], num_attributes)
}

/// Every differentiable primitive plus a full tiny network, for one seed.
pub fn primitive_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let x = uniform(&[2, 3, 8, 8], &mut rng);
    let k = uniform(&[4, 3, 3, 3], &mut rng);
    let b = uniform(&[4], &mut rng);
    reports.push(check("conv2d", &[x, k, b], seed, opts, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1))?);

    let x = uniform(&[4, 2, 5, 5], &mut rng);
    let g = uniform(&[2], &mut rng);
    let s = uniform(&[2], &mut rng);
    reports.push(check("batch_norm_train", &[x, g, s], seed, opts, |t, v| {
        t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
    })?);

    let x = uniform(&[2, 2, 3, 3], &mut rng);
    let g = uniform(&[2], &mut rng);
    let s = uniform(&[2], &mut rng);
    let (rm, rv) = ([0.1f32, -0.2], [0.8f32, 1.3]);
    reports.push(check("batch_norm_eval", &[x, g, s], seed, opts, |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)
    })?);

    let x = uniform_off_zero(&[3, 7], 0.01, &mut rng);
    reports.push(check("relu", &[x], seed, opts, |t, v| Ok(t.relu(v[0])))?);

    let a = uniform(&[2, 3, 4], &mut rng);
    let c = uniform(&[2, 3, 4], &mut rng);
    reports.push(check("residual_add", &[a, c], seed, opts, |t, v| t.add(v[0], v[1]))?);

    let a = uniform(&[12], &mut rng);
    let c = uniform(&[12], &mut rng);
    reports.push(check("mul", &[a, c], seed, opts, |t, v| t.mul(v[0], v[1]))?);

    let x = uniform(&[2, 3, 4, 5], &mut rng);
    reports.push(check("global_average_pool", &[x], seed, opts, |t, v| t.global_average_pool(v[0]))?);

    let x = uniform(&[3, 5], &mut rng);
    let w = uniform(&[5, 4], &mut rng);
    let bb = uniform(&[4], &mut rng);
    reports.push(check("affine", &[x, w, bb], seed, opts, |t, v| t.affine(v[0], v[1], v[2]))?);

    let x = uniform(&[10], &mut rng);
    reports.push(check("sigmoid", &[x], seed, opts, |t, v| Ok(t.sigmoid(v[0])))?);

    let x = uniform(&[4, 6], &mut rng);
    let mask_seed = rng.random::<u64>();
    reports.push(check("dropout", &[x], seed, opts, |t, v| {
        t.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(mask_seed))
    })?);

    let (n, m) = (4, 3);
    let x = uniform(&[n, m], &mut rng);
    let labels = LabelMatrix::binary(n, m, (0..n * m).map(|_| rng.random_range(0..2u8)).collect())?;
    let weights = AttributeWeights::deepmar(&labels, 1.0)?;
    reports.push(check("weighted_bce", &[x], seed, opts, |t, v| {
        let per = loss::weighted_bce(t, v[0], &labels, Some(&weights))?;
        loss::total_loss(t, per, &loss::uniform_gamma(m))
    })?);

    reports.push(network_check(seed, opts, HeadKind::Logistic)?);
    reports.push(network_check(seed, opts, HeadKind::Dense)?);
    Ok(reports)
}

/// Gradient check of every parameter of a tiny network trained on one batch:
/// conv, BN, ReLU, residual merge, GAP, head, weighted BCE, total loss.
///
/// The differenced loss is reduced in f64 from the f32 logits; analytic
/// gradients come from the tape's own f32 loss.
pub fn network_check(seed: u64, opts: &GradCheckOptions, head: HeadKind) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let (n, m) = (3, 3);
    let mut cfg = tiny_network_config(m);
    cfg.head = head;
    cfg.dense_hidden = 6;
    cfg.dropout_rate = 0.25;
    let net = Network::build(&cfg, seed)?;
    let batch = uniform(&[n, 3, 6, 6], &mut rng);
    let labels = LabelMatrix::binary(n, m, (0..n * m).map(|_| rng.random_range(0..2u8)).collect())?;
    let weights = AttributeWeights::deepmar(&labels, 1.0)?;
    let per_element = weights.per_element(&labels)?;
    let gamma = loss::uniform_gamma(m);
    let dropout_seed = rng.random::<u64>();

    let loss_of = |params: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f32>>, Vec<bool>)> {
        let mut net = net.clone();
        for (p, q) in net.params_mut().iter_mut().zip(params) {
            p.data_mut().copy_from_slice(q.data());
        }
        let mut tape = Tape::new();
        let x = tape.constant(&batch);
        let out = net.forward_train(&mut tape, x, &mut ChaCha8Rng::seed_from_u64(dropout_seed))?;
        let value = tape
            .value(out.logits)
            .iter()
            .zip(labels.data())
            .zip(&per_element)
            .enumerate()
            .map(|(k, ((&x, &y), &w))| {
                gamma[k % m] as f64 * w as f64 * bce_with_logit(x as f64, y as f64) / n as f64
            })
            .sum::<f64>();
        let pattern = tape.relu_pattern();
        if !want_grad {
            return Ok((value, Vec::new(), pattern));
        }
        let per = loss::weighted_bce(&mut tape, out.logits, &labels, Some(&weights))?;
        let total = loss::total_loss(&mut tape, per, &gamma)?;
        tape.backward(total)?;
        net.zero_grad();
        net.accumulate_grads(&tape)?;
        let grads = net
            .params()
            .iter()
            .map(|p| p.grad().map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
            .collect();
        Ok((value, grads, pattern))
    };

    let base: Vec<Tensor> = net.params().to_vec();
    let (_, analytic, _) = loss_of(&base, true)?;
    let mut skipped = 0;
    let mut work = base.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let per_tensor = (opts.max_per_tensor / 4).max(4);
    let name = format!("network_{}", head.name());
    for ti in 0..base.len() {
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in sample_indices(base[ti].len(), per_tensor, &mut rng) {
            let orig = base[ti].data()[i];
            work[ti].data_mut()[i] = orig + opts.epsilon;
            let (plus, _, pp) = loss_of(&work, false)?;
            work[ti].data_mut()[i] = orig - opts.epsilon;
            let (minus, _, pm) = loss_of(&work, false)?;
            work[ti].data_mut()[i] = orig;
            // a ReLU input changed sign between the two probes, so the
            // difference quotient straddles a kink and says nothing
            if pp != pm {
                skipped += 1;
                continue;
            }
            a.push(analytic[ti][i] as f64);
            num.push((plus - minus) / (2.0 * opts.epsilon as f64));
        }
        let e = finite_error(&name, &a, &num, opts.floor)?;
        worst = worst.max(e);
        checked += a.len();
    }
    Ok(GradCheckReport { name, checked, skipped, max_rel_error: worst })
}
