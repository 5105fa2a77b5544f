//! Training loop, calibration and evaluation drivers, and run artifacts.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{config_hash, TrainConfig};

use crate::calibration::{apply_thresholds, CalibrationTable, ThresholdStrategy, TrainScores};
use crate::data::{make_batch, shuffled_batches, AugmentationConfig, DatasetManifest, LoadedSplit, Sample, Split, TrainData};
use crate::error::{Error, Result};
use crate::loss::{total_loss, uniform_gamma, weighted_bce};
use crate::matrix::{LabelMatrix, ScoreMatrix};
use crate::metrics::{example_based, MetricsReport};
use crate::network::save_checkpoint;
use crate::network::{Network, NetworkConfig};
use crate::optim::SgdNesterov;
use crate::tape::Tape;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CALIBRATION_FILE: &str = "calibration.tsv";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Eval-mode attribute probabilities for every image of a split, in order.
pub fn predict_scores(net: &Network, data: &LoadedSplit, augmentation: &AugmentationConfig, batch_size: usize) -> Result<ScoreMatrix> {
    let m = net.config().num_attributes;
    if data.labels().cols() != m {
        return Err(Error::shape(format!("network predicts {m} attributes, data has {}", data.labels().cols())));
    }
    let policy = augmentation.policy()?;
    let mut out = ScoreMatrix::empty(m);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| Sample { image: &data.images()[i], labels: data.labels().row(i) }).collect();
        let (x, _) = make_batch(&samples, policy.as_ref(), augmentation, data.mean(), None)?;
        let logits = net.predict_logits(&x)?;
        out.append(&ScoreMatrix::from_vec(chunk.len(), m, logits.data().iter().map(|&z| sigmoid(z)).collect())?)?;
    }
    Ok(out)
}

/// Scores the train split and fits one threshold per attribute.
///
/// Only [`TrainData`] is accepted, so validation data cannot be passed:
///
/// ```compile_fail
/// # use attrikit::data::{DatasetManifest, Split};
/// # use attrikit::train::{calibrate, TrainConfig};
/// # fn f(m: &DatasetManifest, net: &attrikit::Network, cfg: &TrainConfig) {
/// let val = m.split(Split::Val).load().unwrap();
/// let s = cfg.threshold_strategy().unwrap();
/// calibrate(net, &val, &cfg.augmentation, s.as_ref(), 16);
/// # }
/// ```
pub fn calibrate(net: &Network, train: &TrainData, augmentation: &AugmentationConfig, strategy: &dyn ThresholdStrategy, batch_size: usize) -> Result<CalibrationTable> {
    let scores = predict_scores(net, train, augmentation, batch_size)?;
    let ts = TrainScores::new(scores, train.labels().clone())?;
    let mut table = CalibrationTable::fit(&ts, train.attributes(), strategy)?;
    for (k, v) in net.metadata().iter() {
        table.stamp(k, v);
    }
    Ok(table)
}

/// Thresholds the split's scores with `table` and computes every metric.
pub fn evaluate(net: &Network, data: &LoadedSplit, table: &CalibrationTable, augmentation: &AugmentationConfig, batch_size: usize) -> Result<MetricsReport> {
    if table.len() != data.labels().cols() || table.names() != data.attributes() {
        return Err(Error::shape(format!(
            "calibration table covers {} attributes, data has {}",
            table.len(),
            data.labels().cols()
        )));
    }
    let scores = predict_scores(net, data, augmentation, batch_size)?;
    let preds = apply_thresholds(&scores, table)?;
    MetricsReport::compute(data.attributes(), &scores, data.labels(), &preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f32,
    pub elapsed_secs: f64,
    /// Validation example-F1 under train-calibrated thresholds.
    pub val_f1: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} loss={:.6} lr={} elapsed={:.2}",
            self.epoch, self.mean_loss, self.lr, self.elapsed_secs
        );
        if let Some(f) = self.val_f1 {
            let _ = write!(s, " val_f1={f:.6}");
        }
        s
    }
}

pub struct TrainOutcome {
    /// Network from the epoch with the best validation example-F1 (the last
    /// epoch when there is no validation data).
    pub network: Network,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Runs the optimization loop. `on_epoch` sees each epoch's log line as it
/// completes.
pub fn fit(
    net_config: &NetworkConfig,
    config: &TrainConfig,
    train: &TrainData,
    val: Option<&LoadedSplit>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let m = train.labels().cols();
    if net_config.num_attributes != m {
        return Err(Error::shape(format!("network config has {} attributes, data has {m}", net_config.num_attributes)));
    }
    let hash = config_hash(net_config, config)?;
    let mut net = Network::build(net_config, config.seed)?;
    net.stamp("config_hash", &hash);
    net.stamp("seed", config.seed);
    let schedule = config.schedule()?;
    let weights = config.weighting_scheme()?.weights(train.labels())?;
    let strategy = config.threshold_strategy()?;
    let policy = config.augmentation.policy()?;
    let gamma = uniform_gamma(m);
    let mut opt = SgdNesterov::new(config.base_lr, config.momentum, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let start = Instant::now();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..config.epochs {
        opt.lr = schedule.lr_at(epoch);
        let mut sum = 0.0;
        let batches = shuffled_batches(train.len(), config.batch_size, &mut rng)?;
        for (b, idx) in batches.iter().enumerate() {
            let samples: Vec<Sample> = idx.iter().map(|&i| Sample { image: &train.images()[i], labels: train.labels().row(i) }).collect();
            let (x, y) = make_batch(&samples, policy.as_ref(), &config.augmentation, train.mean(), Some(&mut rng))?;
            let loss = train_step(&mut net, &mut opt, &x, &y, weights.as_ref(), &gamma, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {} batch {} (lr {}); lower base_lr or check the data",
                    epoch + 1,
                    b + 1,
                    opt.lr
                )));
            }
            sum += loss;
            step_losses.push(loss);
        }
        let val_f1 = match val {
            Some(v) if !v.is_empty() => {
                let table = calibrate(&net, train, &config.augmentation, strategy.as_ref(), config.eval_batch_size)?;
                let scores = predict_scores(&net, v, &config.augmentation, config.eval_batch_size)?;
                Some(example_based(v.labels(), &apply_thresholds(&scores, &table)?)?.f1)
            }
            _ => None,
        };
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: sum / batches.len() as f64,
            lr: opt.lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
            val_f1,
        };
        info!("{}", log.line());
        on_epoch(&log);
        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || val_f1.is_none()) {
            best = Some((score, epoch + 1, net.clone()));
        }
        epochs.push(log);
    }
    let (_, best_epoch, network) = best.expect("at least one epoch");
    Ok(TrainOutcome { network, best_epoch, epochs, step_losses })
}

fn train_step(
    net: &mut Network,
    opt: &mut SgdNesterov,
    x: &crate::tensor::Tensor,
    y: &LabelMatrix,
    weights: Option<&crate::loss::AttributeWeights>,
    gamma: &[f32],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let out = net.forward_train(&mut tape, input, rng)?;
    let per_attr = weighted_bce(&mut tape, out.logits, y, weights)?;
    let loss = total_loss(&mut tape, per_attr, gamma)?;
    let value = f64::from(tape.value(loss)[0]);
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    net.zero_grad();
    net.accumulate_grads(&tape)?;
    opt.step(net.params_mut())?;
    Ok(value)
}

/// Paths written by [`train`], stamped with the configuration hash and seed.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub calibration: PathBuf,
    pub metrics: Vec<(Split, PathBuf)>,
    pub log: PathBuf,
    pub config: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub best_epoch: usize,
}

fn stamp_header(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash}\n# seed={seed}\n")
}

/// Writes a metrics report with its provenance header.
pub fn write_report(report: &MetricsReport, split: Split, hash: &str, seed: u64, path: &Path) -> Result<()> {
    let text = format!("{}# split={split}\n{}\n{}", stamp_header(hash, seed), report.summary_text(), report.attribute_table());
    fs::write(path, text)?;
    Ok(())
}

/// Trains on the manifest's train split, selects by validation example-F1,
/// calibrates on the train split, and reports on validation and test.
pub fn train(manifest: &DatasetManifest, net_config: &NetworkConfig, config: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<RunArtifacts> {
    let dir = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir)?;
    let hash = config_hash(net_config, config)?;
    let mut resolved = config.to_kv()?;
    resolved.merge(&net_config.to_kv());
    fs::write(dir.join(CONFIG_FILE), format!("{}{}", stamp_header(&hash, config.seed), resolved.to_text()))?;
    let log_path = dir.join(LOG_FILE);
    let mut log_text = stamp_header(&hash, config.seed);
    for (k, v) in resolved.iter() {
        let _ = writeln!(log_text, "# {k}={v}");
    }
    fs::write(&log_path, &log_text)?;

    let train_data = manifest.train().load()?;
    let val = manifest.split(Split::Val).load()?;
    let outcome = fit(net_config, config, &train_data, Some(&val), |e| {
        log_text.push_str(&e.line());
        log_text.push('\n');
        // progress stays on disk even if a later epoch fails
        let _ = fs::write(&log_path, &log_text);
    })?;
    let _ = writeln!(log_text, "best_epoch={}", outcome.best_epoch);
    fs::write(&log_path, &log_text)?;

    let net = outcome.network;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&net, &checkpoint)?;
    let table = calibrate(&net, &train_data, &config.augmentation, config.threshold_strategy()?.as_ref(), config.eval_batch_size)?;
    let calibration = dir.join(CALIBRATION_FILE);
    table.save(&calibration)?;
    let mut metrics = Vec::new();
    for (split, data) in [(Split::Val, val), (Split::Test, manifest.split(Split::Test).load()?)] {
        if data.is_empty() {
            continue;
        }
        let report = evaluate(&net, &data, &table, &config.augmentation, config.eval_batch_size)?;
        let path = dir.join(format!("metrics_{split}.txt"));
        write_report(&report, split, &hash, config.seed, &path)?;
        metrics.push((split, path));
    }
    Ok(RunArtifacts {
        dir: dir.clone(),
        checkpoint,
        calibration,
        metrics,
        log: log_path,
        config: dir.join(CONFIG_FILE),
        config_hash: hash,
        seed: config.seed,
        best_epoch: outcome.best_epoch,
    })
}
