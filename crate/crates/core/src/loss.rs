//! Weighted multi-attribute sigmoid cross-entropy.
//!
//! For attribute `m` over a batch of `N` samples
//!
//! ```text
//! loss_m = -(1/N) sum_i w_mi [ y_mi ln p(x_mi) + (1 - y_mi) ln(1 - p(x_mi)) ]
//! total  = sum_m gamma_m loss_m
//! ```
//!
//! with `p` the logistic function. Under DeepMAR weighting, `w_mi` is
//! `exp((1 - p_m) / sigma^2)` for positives and `exp(p_m / sigma^2)` for
//! negatives, where `p_m` is the positive fraction of attribute `m` in the
//! training split. Weights are used as-is inside the batch mean (no
//! per-batch renormalisation).

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::matrix::LabelMatrix;
use crate::registry::Registry;
use crate::tape::{Tape, Var};

/// Per-attribute example weights derived from label frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeWeights {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub positive_ratio: Vec<f64>,
    pub sigma: f32,
}

impl AttributeWeights {
    /// DeepMAR weights from a training label matrix.
    pub fn deepmar(labels: &LabelMatrix, sigma: f32) -> Result<Self> {
        if labels.rows() == 0 || labels.cols() == 0 {
            return Err(Error::Degenerate("sample weights need a nonempty label matrix".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        let n = labels.rows() as f64;
        let s2 = (sigma as f64).powi(2);
        let ratio: Vec<f64> = (0..labels.cols())
            .map(|c| labels.positives_in_column(c) as f64 / n)
            .collect();
        Ok(AttributeWeights {
            positive: ratio.iter().map(|p| ((1.0 - p) / s2).exp()).collect(),
            negative: ratio.iter().map(|p| (p / s2).exp()).collect(),
            positive_ratio: ratio,
            sigma,
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.positive.len()
    }

    /// Weight of every element of a label matrix, chosen by its label.
    pub fn per_element(&self, labels: &LabelMatrix) -> Result<Vec<f32>> {
        if labels.cols() != self.num_attributes() {
            return Err(Error::shape(format!(
                "weights for {} attributes, labels have {}",
                self.num_attributes(),
                labels.cols()
            )));
        }
        let m = labels.cols();
        Ok(labels
            .data()
            .iter()
            .enumerate()
            .map(|(k, &y)| if y == 1 { self.positive[k % m] } else { self.negative[k % m] } as f32)
            .collect())
    }
}

/// Free-function form of [`AttributeWeights::deepmar`].
pub fn compute_sample_weights(labels: &LabelMatrix, sigma: f32) -> Result<AttributeWeights> {
    AttributeWeights::deepmar(labels, sigma)
}

/// Records per-attribute losses (`M` values) for `N x M` logits.
pub fn weighted_bce(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelMatrix,
    weights: Option<&AttributeWeights>,
) -> Result<Var> {
    let dims = tape.dims(logits);
    if dims != [labels.rows(), labels.cols()] {
        return Err(Error::shape(format!(
            "logits {dims:?} vs labels {}x{}",
            labels.rows(),
            labels.cols()
        )));
    }
    let w = match weights {
        Some(w) => w.per_element(labels)?,
        None => vec![1.0; labels.data().len()],
    };
    tape.weighted_bce(logits, labels.to_f32(), w)
}

/// `sum_m gamma_m * loss_m` as a scalar.
pub fn total_loss(tape: &mut Tape, per_attribute: Var, gamma: &[f32]) -> Result<Var> {
    tape.dot(per_attribute, gamma)
}

/// Equal per-attribute weighting `1/M`.
pub fn uniform_gamma(num_attributes: usize) -> Vec<f32> {
    vec![1.0 / num_attributes as f32; num_attributes]
}

/// How a training split is turned into per-attribute example weights.
pub trait WeightingScheme: Send + Sync {
    fn name(&self) -> &'static str;
    /// `None` means every example has weight 1.
    fn weights(&self, train_labels: &LabelMatrix) -> Result<Option<AttributeWeights>>;
}

pub struct DeepMarWeighting {
    pub sigma: f32,
}

impl WeightingScheme for DeepMarWeighting {
    fn name(&self) -> &'static str {
        "deepmar"
    }

    fn weights(&self, train_labels: &LabelMatrix) -> Result<Option<AttributeWeights>> {
        AttributeWeights::deepmar(train_labels, self.sigma).map(Some)
    }
}

pub struct NoWeighting;

impl WeightingScheme for NoWeighting {
    fn name(&self) -> &'static str {
        "none"
    }

    fn weights(&self, _: &LabelMatrix) -> Result<Option<AttributeWeights>> {
        Ok(None)
    }
}

pub const DEFAULT_SIGMA: f32 = 1.0;

/// `deepmar` (option `sigma`, default 1) and `none`.
pub fn weighting_registry() -> Registry<dyn WeightingScheme> {
    let mut reg: Registry<dyn WeightingScheme> = Registry::new("weighting scheme");
    reg.register("deepmar", |o: &KvMap| {
        let sigma = o.parsed_or("sigma", DEFAULT_SIGMA)?;
        if !(sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Box::new(DeepMarWeighting { sigma }))
    });
    reg.register("none", |_| Ok(Box::new(NoWeighting)));
    reg
}
