//! Residual feature extractor with a joint multi-attribute head.
//!
//! Layout: 3x3 stem conv + BN + ReLU, then stages of basic blocks
//! (`conv3x3-BN-ReLU-conv3x3-BN`, merged with the shortcut, then ReLU). The
//! first block of every stage after the first halves the resolution and uses
//! a 1x1 conv + BN projection shortcut. Global average pooling feeds either a
//! single affine layer (logistic head) or `affine-ReLU-dropout-affine`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPSILON: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Logistic,
    Dense,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Logistic => "logistic",
            HeadKind::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(HeadKind::Logistic),
            "dense" => Ok(HeadKind::Dense),
            other => Err(Error::Unknown { kind: "head kind", name: other.to_string() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_attributes: usize,
    pub head: HeadKind,
    pub dense_hidden: usize,
    pub dropout_rate: f32,
}

impl NetworkConfig {
    /// Basic-block network with `stage_blocks` and the given widths, logistic head.
    pub fn new(stem_channels: usize, stage_blocks: &[usize], stage_channels: &[usize], num_attributes: usize) -> Self {
        NetworkConfig {
            in_channels: 3,
            stem_channels,
            stage_blocks: stage_blocks.to_vec(),
            stage_channels: stage_channels.to_vec(),
            num_attributes,
            head: HeadKind::Logistic,
            dense_hidden: 256,
            dropout_rate: 0.5,
        }
    }

    /// Eighteen weighted layers: stem, 4 stages of 2 basic blocks, head.
    pub fn resnet18(num_attributes: usize) -> Self {
        Self::new(64, &[2, 2, 2, 2], &[64, 128, 256, 512], num_attributes)
    }

    /// Thirty-four weighted layers: stem, stages of 3/4/6/3 basic blocks, head.
    pub fn resnet34(num_attributes: usize) -> Self {
        Self::new(64, &[3, 4, 6, 3], &[64, 128, 256, 512], num_attributes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.is_empty() || self.stage_blocks.len() != self.stage_channels.len() {
            return Err(Error::config(
                "stage_blocks and stage_channels must be nonempty and of equal length",
            ));
        }
        if self.in_channels == 0
            || self.stem_channels == 0
            || self.num_attributes == 0
            || self.stage_blocks.contains(&0)
            || self.stage_channels.contains(&0)
        {
            return Err(Error::config("all counts and widths must be positive"));
        }
        if self.head == HeadKind::Dense && self.dense_hidden == 0 {
            return Err(Error::config("dense head needs dense_hidden > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Weight-carrying layers along the main path (stem + block convs + head).
    pub fn weighted_layers(&self) -> usize {
        let head = match self.head {
            HeadKind::Logistic => 1,
            HeadKind::Dense => 2,
        };
        1 + 2 * self.stage_blocks.iter().sum::<usize>() + head
    }

    /// Smallest spatial side for which every final feature map cell sees real input.
    pub fn min_input_side(&self) -> usize {
        1 << (self.stage_blocks.len() - 1)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated nonempty")
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("in_channels", self.in_channels);
        kv.set("stem_channels", self.stem_channels);
        kv.set("stage_blocks", join(&self.stage_blocks));
        kv.set("stage_channels", join(&self.stage_channels));
        kv.set("num_attributes", self.num_attributes);
        kv.set("head", self.head.name());
        kv.set("dense_hidden", self.dense_hidden);
        kv.set("dropout_rate", self.dropout_rate);
        kv
    }

    /// Reads a config, taking unspecified keys from `base`.
    pub fn from_kv_with(kv: &KvMap, base: &NetworkConfig) -> Result<Self> {
        let cfg = NetworkConfig {
            in_channels: kv.parsed_or("in_channels", base.in_channels)?,
            stem_channels: kv.parsed_or("stem_channels", base.stem_channels)?,
            stage_blocks: kv.list("stage_blocks")?.unwrap_or_else(|| base.stage_blocks.clone()),
            stage_channels: kv
                .list("stage_channels")?
                .unwrap_or_else(|| base.stage_channels.clone()),
            num_attributes: kv.parsed_or("num_attributes", base.num_attributes)?,
            head: match kv.get("head") {
                Some(h) => HeadKind::parse(h)?,
                None => base.head,
            },
            dense_hidden: kv.parsed_or("dense_hidden", base.dense_hidden)?,
            dropout_rate: kv.parsed_or("dropout_rate", base.dropout_rate)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        for key in ["stem_channels", "stage_blocks", "stage_channels", "num_attributes"] {
            if !kv.contains(key) {
                return Err(Error::config(format!("network config missing `{key}`")));
            }
        }
        Self::from_kv_with(kv, &NetworkConfig::new(1, &[1], &[1], 1))
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    scale: usize,
    shift: usize,
    /// Index of the running mean; the running variance follows it.
    stats: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
enum Head {
    Logistic { weight: usize, bias: usize },
    Dense { w1: usize, b1: usize, w2: usize, b2: usize },
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `N x M` pre-sigmoid attribute logits.
    pub logits: Var,
    /// Final-stage activation maps (`N x C x H' x W'`) feeding the pooling layer.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
    stem: ConvBn,
    blocks: Vec<Block>,
    head: Head,
    metadata: KvMap,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
}

impl Builder {
    fn normal(&mut self, name: String, dims: &[usize], std: f32) -> usize {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, Tensor::new(dims, data).expect("dims are positive"))
    }

    fn constant(&mut self, name: String, dims: &[usize], value: f32) -> usize {
        self.push(name, Tensor::full(dims, value).expect("dims are positive"))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.param_names.push(name);
        self.params.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let fan_in = (cin * k * k) as f32;
        let weight = self.normal(format!("{prefix}.conv.weight"), &[cout, cin, k, k], (2.0 / fan_in).sqrt());
        let scale = self.constant(format!("{prefix}.bn.scale"), &[cout], 1.0);
        let shift = self.constant(format!("{prefix}.bn.shift"), &[cout], 0.0);
        let stats = self.buffers.len();
        self.buffers.push(Tensor::zeros(&[cout]).expect("positive"));
        self.buffer_names.push(format!("{prefix}.bn.running_mean"));
        self.buffers.push(Tensor::full(&[cout], 1.0).expect("positive"));
        self.buffer_names.push(format!("{prefix}.bn.running_var"));
        ConvBn { weight, scale, shift, stats, stride, padding: k / 2 }
    }
}

impl Network {
    /// Instantiates a network; identical `(config, seed)` give identical weights.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
        };
        let stem = b.conv_bn("stem", config.in_channels, config.stem_channels, 3, 1);
        let mut blocks = Vec::new();
        let mut cin = config.stem_channels;
        for (s, (&nblocks, &cout)) in config.stage_blocks.iter().zip(&config.stage_channels).enumerate() {
            for i in 0..nblocks {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let prefix = format!("stage{}.block{}", s + 1, i + 1);
                let conv1 = b.conv_bn(&format!("{prefix}.conv1"), cin, cout, 3, stride);
                let conv2 = b.conv_bn(&format!("{prefix}.conv2"), cout, cout, 3, 1);
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| b.conv_bn(&format!("{prefix}.shortcut"), cin, cout, 1, stride));
                blocks.push(Block { conv1, conv2, shortcut });
                cin = cout;
            }
        }
        let m = config.num_attributes;
        let head = match config.head {
            HeadKind::Logistic => Head::Logistic {
                weight: b.normal("head.weight".into(), &[cin, m], (1.0 / cin as f32).sqrt()),
                bias: b.constant("head.bias".into(), &[m], 0.0),
            },
            HeadKind::Dense => {
                let h = config.dense_hidden;
                Head::Dense {
                    w1: b.normal("head.fc1.weight".into(), &[cin, h], (2.0 / cin as f32).sqrt()),
                    b1: b.constant("head.fc1.bias".into(), &[h], 0.0),
                    w2: b.normal("head.fc2.weight".into(), &[h, m], (1.0 / h as f32).sqrt()),
                    b2: b.constant("head.fc2.bias".into(), &[m], 0.0),
                }
            }
        };
        Ok(Network {
            config: config.clone(),
            params: b.params,
            param_names: b.param_names,
            buffers: b.buffers,
            buffer_names: b.buffer_names,
            stem,
            blocks,
            head,
            metadata: KvMap::new(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Free-form provenance carried through checkpoints.
    pub fn metadata(&self) -> &KvMap {
        &self.metadata
    }

    pub fn stamp(&mut self, key: &str, value: impl std::fmt::Display) {
        self.metadata.set(key, value);
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// Running statistics of every batch-norm layer.
    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients computed on `tape` into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (i, g) in tape.param_grads() {
            self.params[i].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Indices of the head weights; used by tests and interpretation.
    pub fn head_param_indices(&self) -> Vec<usize> {
        match self.head {
            Head::Logistic { weight, bias } => vec![weight, bias],
            Head::Dense { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    /// Sets every head parameter to zero, so all logits become 0.
    pub fn zero_head(&mut self) {
        for i in self.head_param_indices() {
            self.params[i].data_mut().fill(0.0);
        }
    }

    /// Zeroes the head weights feeding a single attribute's logit.
    pub fn zero_attribute_weights(&mut self, attribute: usize) -> Result<()> {
        let m = self.config.num_attributes;
        if attribute >= m {
            return Err(Error::shape(format!("attribute {attribute} out of range 0..{m}")));
        }
        let (w, b) = match self.head {
            Head::Logistic { weight, bias } => (weight, bias),
            Head::Dense { w2, b2, .. } => (w2, b2),
        };
        for (k, v) in self.params[w].data_mut().iter_mut().enumerate() {
            if k % m == attribute {
                *v = 0.0;
            }
        }
        self.params[b].data_mut()[attribute] = 0.0;
        Ok(())
    }

    fn check_input(&self, tape: &Tape, input: Var) -> Result<()> {
        let d = tape.dims(input);
        let min = self.config.min_input_side();
        match *d {
            [_, c, h, w] if c == self.config.in_channels => {
                if h < min || w < min {
                    Err(Error::shape(format!(
                        "input {h}x{w} is smaller than the network minimum {min}x{min}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::shape(format!(
                "network expects N x {} x H x W input, got {d:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Training-mode forward: batch statistics, running-stat updates, dropout.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, tape: &mut Tape, input: Var, rng: &mut R) -> Result<Forward> {
        self.check_input(tape, input)?;
        let mut pass = Pass {
            params: &self.params,
            vars: vec![None; self.params.len()],
            tape,
            mode: PassMode::Train { buffers: &mut self.buffers, rng, dropout: self.config.dropout_rate },
        };
        pass.run(&self.stem, &self.blocks, &self.head, input)
    }

    /// Evaluation-mode forward; never mutates the network.
    pub fn forward_eval(&self, tape: &mut Tape, input: Var) -> Result<Forward> {
        self.check_input(tape, input)?;
        let mut pass: Pass<'_, ChaCha8Rng> = Pass {
            params: &self.params,
            vars: vec![None; self.params.len()],
            tape,
            mode: PassMode::Eval { buffers: &self.buffers },
        };
        pass.run(&self.stem, &self.blocks, &self.head, input)
    }

    /// Eval-mode logits for a batch tensor.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = self.forward_eval(&mut tape, x)?;
        let logits = tape.tensor(out.logits);
        logits.check_finite("logits")?;
        Ok(logits)
    }
}

enum PassMode<'a, R: Rng + ?Sized> {
    Train { buffers: &'a mut [Tensor], rng: &'a mut R, dropout: f32 },
    Eval { buffers: &'a [Tensor] },
}

struct Pass<'a, R: Rng + ?Sized> {
    params: &'a [Tensor],
    vars: Vec<Option<Var>>,
    tape: &'a mut Tape,
    mode: PassMode<'a, R>,
}

impl<R: Rng + ?Sized> Pass<'_, R> {
    fn p(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = self.tape.param(i, &self.params[i]);
        self.vars[i] = Some(v);
        v
    }

    fn conv_bn(&mut self, layer: &ConvBn, x: Var) -> Result<Var> {
        let (w, g, s) = (self.p(layer.weight), self.p(layer.scale), self.p(layer.shift));
        // batch norm removes any per-channel offset, so the conv carries none
        let b = self.tape.constant(&Tensor::zeros(&self.params[layer.weight].dims()[..1])?);
        let y = self.tape.conv2d(x, w, b, layer.stride, layer.padding)?;
        match &mut self.mode {
            PassMode::Train { buffers, .. } => {
                let (out, stats) = self.tape.batch_norm_train(y, g, s, BN_EPSILON)?;
                let (m, v) = buffers.split_at_mut(layer.stats + 1);
                let rm = m[layer.stats].data_mut();
                let rv = v[0].data_mut();
                for c in 0..rm.len() {
                    rm[c] = BN_MOMENTUM * rm[c] + (1.0 - BN_MOMENTUM) * stats.mean[c];
                    rv[c] = BN_MOMENTUM * rv[c] + (1.0 - BN_MOMENTUM) * stats.var[c];
                }
                Ok(out)
            }
            PassMode::Eval { buffers } => {
                let (rm, rv) = (buffers[layer.stats].data(), buffers[layer.stats + 1].data());
                self.tape.batch_norm_eval(y, g, s, rm, rv, BN_EPSILON)
            }
        }
    }

    fn run(&mut self, stem: &ConvBn, blocks: &[Block], head: &Head, input: Var) -> Result<Forward> {
        let y = self.conv_bn(stem, input)?;
        let mut x = self.tape.relu(y);
        for block in blocks {
            let h = self.conv_bn(&block.conv1, x)?;
            let h = self.tape.relu(h);
            let h = self.conv_bn(&block.conv2, h)?;
            let short = match &block.shortcut {
                Some(sc) => self.conv_bn(sc, x)?,
                None => x,
            };
            let merged = self.tape.add(h, short)?;
            x = self.tape.relu(merged);
        }
        let features = x;
        let pooled = self.tape.global_average_pool(features)?;
        let logits = match *head {
            Head::Logistic { weight, bias } => {
                let (w, b) = (self.p(weight), self.p(bias));
                self.tape.affine(pooled, w, b)?
            }
            Head::Dense { w1, b1, w2, b2 } => {
                let (w1, b1) = (self.p(w1), self.p(b1));
                let h = self.tape.affine(pooled, w1, b1)?;
                let mut h = self.tape.relu(h);
                if let PassMode::Train { rng, dropout, .. } = &mut self.mode {
                    if *dropout > 0.0 {
                        h = self.tape.dropout(h, *dropout, &mut **rng)?;
                    }
                }
                let (w2, b2) = (self.p(w2), self.p(b2));
                self.tape.affine(h, w2, b2)?
            }
        };
        Ok(Forward { logits, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig::new(8, &[1, 1], &[8, 16], 4)
    }

    fn random_batch(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn named_depths() {
        assert_eq!(NetworkConfig::resnet18(35).weighted_layers(), 18);
        assert_eq!(NetworkConfig::resnet34(35).weighted_layers(), 34);
    }

    #[test]
    fn tiny_parameter_count_matches_hand_count() {
        // conv weights O*I*k*k, BN scale+shift 2*O, head F*M + M
        let stem = 8 * 3 * 9 + 2 * 8;
        let stage1 = 2 * (8 * 8 * 9 + 2 * 8);
        let stage2 = (16 * 8 * 9 + 2 * 16) + (16 * 16 * 9 + 2 * 16) + (16 * 8 + 2 * 16);
        let head = 16 * 4 + 4;
        assert_eq!(stem + stage1 + stage2 + head, 5164);
        let net = Network::build(&tiny(), 1).unwrap();
        assert_eq!(net.param_count(), 5164);
        assert_eq!(Network::build(&tiny(), 99).unwrap().param_count(), 5164);
    }

    #[test]
    fn dense_head_adds_two_layers() {
        let mut cfg = tiny();
        cfg.head = HeadKind::Dense;
        cfg.dense_hidden = 10;
        let net = Network::build(&cfg, 0).unwrap();
        assert_eq!(net.param_count(), 5164 - 68 + (16 * 10 + 10) + (10 * 4 + 4));
        assert_eq!(cfg.weighted_layers(), 1 + 4 + 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.stage_channels = vec![8];
        assert!(matches!(Network::build(&c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.num_attributes = 0;
        assert!(Network::build(&c, 0).is_err());
        let mut c = tiny();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        assert!(NetworkConfig::new(8, &[], &[], 2).validate().is_err());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = Network::build(&tiny(), 5).unwrap();
        let b = Network::build(&tiny(), 5).unwrap();
        let c = Network::build(&tiny(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut net = Network::build(&tiny(), 2).unwrap();
        net.zero_head();
        let logits = net.predict_logits(&random_batch(&[3, 3, 12, 12], 0)).unwrap();
        assert_eq!(logits.dims(), &[3, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn any_input_size_gives_m_logits() {
        let net = Network::build(&tiny(), 3).unwrap();
        for (h, w) in [(8, 8), (13, 21), (2, 2), (64, 40)] {
            let logits = net.predict_logits(&random_batch(&[2, 3, h, w], 1)).unwrap();
            assert_eq!(logits.dims(), &[2, 4]);
        }
        assert!(net.predict_logits(&random_batch(&[1, 3, 1, 4], 1)).is_err());
        assert!(net.predict_logits(&random_batch(&[1, 1, 8, 8], 1)).is_err());
    }

    #[test]
    fn duplicated_rows_in_eval_give_identical_logits() {
        let net = Network::build(&tiny(), 4).unwrap();
        let one = random_batch(&[1, 3, 10, 10], 2);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let logits = net.predict_logits(&Tensor::new(&[2, 3, 10, 10], data).unwrap()).unwrap();
        assert_eq!(logits.data()[..4], logits.data()[4..]);
    }

    #[test]
    fn eval_forward_does_not_mutate() {
        let net = Network::build(&tiny(), 4).unwrap();
        let before = net.clone();
        let x = random_batch(&[2, 3, 8, 8], 3);
        let first = net.predict_logits(&x).unwrap();
        assert_eq!(net.predict_logits(&x).unwrap(), first);
        assert_eq!(net.params(), before.params());
        assert_eq!(net.buffers(), before.buffers());
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = Network::build(&tiny(), 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&random_batch(&[4, 3, 8, 8], 3));
        net.forward_train(&mut tape, x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rm = &net.buffers()[0];
        assert!(rm.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zeroed_block_passes_identity_through() {
        let cfg = NetworkConfig::new(4, &[1], &[4], 2);
        let mut net = Network::build(&cfg, 8).unwrap();
        for name in ["stage1.block1.conv1.conv.weight", "stage1.block1.conv2.conv.weight"] {
            let i = net.param_index(name).unwrap();
            net.params_mut()[i].data_mut().fill(0.0);
        }
        let x = random_batch(&[2, 3, 6, 6], 4);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let features = net.forward_eval(&mut tape, xv).unwrap().features;
        let got = tape.value(features).to_vec();

        // stem alone: relu(bn(conv(x))) with fresh running stats
        let p = |n: &str| net.params()[net.param_index(n).unwrap()].clone();
        let mut t2 = Tape::new();
        let xv = t2.constant(&x);
        let w = t2.constant(&p("stem.conv.weight"));
        let b = t2.constant(&Tensor::zeros(&[4]).unwrap());
        let y = t2.conv2d(xv, w, b, 1, 1).unwrap();
        let g = t2.constant(&p("stem.bn.scale"));
        let s = t2.constant(&p("stem.bn.shift"));
        let y = t2.batch_norm_eval(y, g, s, &[0.0; 4], &[1.0; 4], BN_EPSILON).unwrap();
        let stem = t2.relu(y);
        assert_eq!(got, t2.value(stem));
    }

    #[test]
    fn parameter_grads_accumulate_across_backward_calls() {
        let mut net = Network::build(&tiny(), 9).unwrap();
        let x = random_batch(&[2, 3, 8, 8], 5);
        let run = |net: &mut Network| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let out = net.forward_eval(&mut tape, xv).unwrap();
            let loss = tape.sum(out.logits);
            tape.backward(loss).unwrap();
            net.accumulate_grads(&tape).unwrap();
        };
        run(&mut net);
        let once: Vec<Vec<f32>> = net.params().iter().map(|p| p.grad().unwrap().to_vec()).collect();
        run(&mut net);
        for (p, g) in net.params().iter().zip(&once) {
            for (a, b) in p.grad().unwrap().iter().zip(g) {
                assert!((a - 2.0 * b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
        net.zero_grad();
        assert!(net.params().iter().all(|p| p.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = tiny();
        cfg.head = HeadKind::Dense;
        cfg.dropout_rate = 0.3;
        let text = cfg.to_kv().to_text();
        assert_eq!(NetworkConfig::from_kv(&KvMap::parse(&text).unwrap()).unwrap(), cfg);
        assert!(NetworkConfig::from_kv(&KvMap::parse("stem_channels=4").unwrap()).is_err());
    }
}
