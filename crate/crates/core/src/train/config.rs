//! Training hyperparameters as flat `key=value` text.

use sha2::{Digest, Sha256};

use crate::calibration::{calibration_registry, ThresholdStrategy, DEFAULT_FPR_BUDGET};
use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::loss::{weighting_registry, WeightingScheme, DEFAULT_SIGMA};
use crate::network::NetworkConfig;
use crate::optim::LrSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batch size for scoring; does not affect results.
    pub eval_batch_size: usize,
    pub base_lr: f32,
    /// Fractions of `epochs` at which the rate is divided by `lr_drop_factor`.
    pub lr_milestones: Vec<f32>,
    pub lr_drop_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Registered weighting scheme: `deepmar` or `none`.
    pub weighting: String,
    pub sigma: f32,
    /// Registered calibration method.
    pub calibration: String,
    /// FPR budget for the `fpr` method.
    pub fpr_budget: f64,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            eval_batch_size: 64,
            base_lr: 0.1,
            lr_milestones: vec![0.5, 0.83],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            weighting: "none".into(),
            sigma: DEFAULT_SIGMA,
            calibration: "f1".into(),
            fpr_budget: DEFAULT_FPR_BUDGET,
            augmentation: AugmentationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("epochs and batch sizes must be positive"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must be in [0,1) and weight decay nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.fpr_budget) {
            return Err(Error::config(format!("FPR budget {} outside [0,1]", self.fpr_budget)));
        }
        self.schedule()?;
        self.weighting_scheme()?;
        self.threshold_strategy()?;
        self.augmentation.validate()
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.base_lr, self.lr_milestones.clone(), self.lr_drop_factor, self.epochs)
    }

    pub fn weighting_scheme(&self) -> Result<Box<dyn WeightingScheme>> {
        let mut o = KvMap::new();
        o.set("sigma", self.sigma);
        weighting_registry().create(&self.weighting, &o)
    }

    pub fn threshold_strategy(&self) -> Result<Box<dyn ThresholdStrategy>> {
        let mut o = KvMap::new();
        o.set("k", self.fpr_budget);
        calibration_registry().create(&self.calibration, &o)
    }

    pub fn to_kv(&self) -> Result<KvMap> {
        let mut kv = self.augmentation.to_kv()?;
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("eval_batch_size", self.eval_batch_size);
        kv.set("base_lr", self.base_lr);
        kv.set("lr_milestones", join(&self.lr_milestones));
        kv.set("lr_drop_factor", self.lr_drop_factor);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("weighting", &self.weighting);
        kv.set("sigma", self.sigma);
        kv.set("calibration", &self.calibration);
        kv.set("k", self.fpr_budget);
        kv.set("seed", self.seed);
        Ok(kv)
    }

    pub fn from_kv_with(kv: &KvMap, base: &TrainConfig) -> Result<Self> {
        let cfg = TrainConfig {
            epochs: kv.parsed_or("epochs", base.epochs)?,
            batch_size: kv.parsed_or("batch_size", base.batch_size)?,
            eval_batch_size: kv.parsed_or("eval_batch_size", base.eval_batch_size)?,
            base_lr: kv.parsed_or("base_lr", base.base_lr)?,
            lr_milestones: kv.list("lr_milestones")?.unwrap_or_else(|| base.lr_milestones.clone()),
            lr_drop_factor: kv.parsed_or("lr_drop_factor", base.lr_drop_factor)?,
            momentum: kv.parsed_or("momentum", base.momentum)?,
            weight_decay: kv.parsed_or("weight_decay", base.weight_decay)?,
            weighting: kv.get("weighting").map_or_else(|| base.weighting.clone(), str::to_string),
            sigma: kv.parsed_or("sigma", base.sigma)?,
            calibration: kv.get("calibration").map_or_else(|| base.calibration.clone(), str::to_string),
            fpr_budget: kv.parsed_or("k", base.fpr_budget)?,
            augmentation: AugmentationConfig::from_kv_with(kv, &base.augmentation)?,
            seed: kv.parsed_or("seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        Self::from_kv_with(kv, &TrainConfig::default())
    }
}

/// Hex SHA-256 prefix of the resolved network and training configuration.
pub fn config_hash(net: &NetworkConfig, train: &TrainConfig) -> Result<String> {
    let mut kv = train.to_kv()?;
    kv.merge(&net.to_kv());
    let digest = Sha256::digest(kv.to_text().as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.base_lr, c.lr_drop_factor, c.momentum, c.weight_decay), (16, 0.1, 10.0, 0.9, 1e-4));
        assert_eq!(c.lr_milestones, [0.5, 0.83]);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig { epochs: 7, weighting: "deepmar".into(), calibration: "fpr".into(), fpr_budget: 0.1, seed: 9, ..TrainConfig::default() };
        c.augmentation.rotation_degrees = 10.0;
        let back = TrainConfig::from_kv(&c.to_kv().unwrap()).unwrap();
        assert_eq!(back.to_kv().unwrap(), c.to_kv().unwrap());
        c.augmentation.resize_options = back.augmentation.resize_options.clone();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_rejections() {
        let kv = KvMap::parse("epochs=3\nlr_milestones=0.5\n").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!((c.epochs, c.lr_milestones.as_slice()), (3, &[0.5][..]));
        for bad in ["lr_milestones=0.8,0.5", "base_lr=0", "weighting=focal", "calibration=magic", "batch_size=0", "k=2"] {
            assert!(TrainConfig::from_kv(&KvMap::parse(bad).unwrap()).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_every_setting() {
        let net = NetworkConfig::new(8, &[1], &[8], 3);
        let a = TrainConfig::default();
        let h = config_hash(&net, &a).unwrap();
        assert_eq!(h.len(), 16);
        assert_eq!(h, config_hash(&net, &a.clone()).unwrap());
        assert_ne!(h, config_hash(&net, &TrainConfig { seed: 1, ..a.clone() }).unwrap());
        assert_ne!(h, config_hash(&NetworkConfig::new(8, &[1], &[8], 4), &a).unwrap());
    }
}
