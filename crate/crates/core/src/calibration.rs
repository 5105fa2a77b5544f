//! Per-attribute decision thresholds chosen from training-split scores.
//!
//! Every method works on the empirical ROC over the distinct scores
//! `s_0 < s_1 < ... < s_{K-1}`. A sample is predicted positive when
//! `score >= t`, so all thresholds inside one interval `(s_{j-1}, s_j]` give
//! the same predictions. Interval `0` is `(-inf, s_0]` (everything positive)
//! and interval `K` is `(s_{K-1}, +inf)` (nothing positive). A method picks an
//! interval and returns one threshold inside it:
//!
//! * interval `0`: `s_0`
//! * interval `K`: the next `f32` above `s_{K-1}`
//! * otherwise the midpoint `(s_{j-1} + s_j) / 2` for the balance methods, or
//!   the next `f32` above `s_{j-1}` for the FPR budget method.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::matrix::{LabelMatrix, ScoreMatrix};
use crate::registry::Registry;

pub const NAIVE_THRESHOLD: f32 = 0.5;
pub const DEFAULT_FPR_BUDGET: f64 = 0.2;

/// Empirical ROC curve of one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    thresholds: Vec<f32>,
    tp: Vec<usize>,
    fp: Vec<usize>,
    positives: usize,
    negatives: usize,
}

pub fn roc_curve(scores: &[f32], labels: &[u8]) -> Result<RocCurve> {
    RocCurve::new(scores, labels)
}

impl RocCurve {
    pub fn new(scores: &[f32], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {s}")));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        let positives = labels.iter().filter(|&&y| y == 1).count();
        let negatives = labels.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(Error::Degenerate(format!(
                "ROC needs both classes, got {positives} positives and {negatives} negatives"
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        // walk from the highest score down, emitting one point per distinct value
        let (mut thresholds, mut tp, mut fp) = (Vec::new(), Vec::new(), Vec::new());
        let (mut t, mut f) = (0, 0);
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if labels[order[i]] == 1 {
                    t += 1;
                } else {
                    f += 1;
                }
                i += 1;
            }
            thresholds.push(s);
            tp.push(t);
            fp.push(f);
        }
        thresholds.reverse();
        tp.reverse();
        fp.reverse();
        Ok(RocCurve { thresholds, tp, fp, positives, negatives })
    }

    /// Distinct scores, ascending.
    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    /// Number of decision intervals (`distinct scores + 1`).
    pub fn intervals(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// `(TP, FP)` for thresholds in interval `j`.
    pub fn counts(&self, j: usize) -> (usize, usize) {
        if j < self.thresholds.len() {
            (self.tp[j], self.fp[j])
        } else {
            (0, 0)
        }
    }

    pub fn tpr(&self, j: usize) -> f64 {
        self.counts(j).0 as f64 / self.positives as f64
    }

    pub fn fpr(&self, j: usize) -> f64 {
        self.counts(j).1 as f64 / self.negatives as f64
    }

    /// `(FPR, TPR)` from `(1,1)` to `(0,0)` as the threshold rises.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.intervals()).map(|j| (self.fpr(j), self.tpr(j))).collect()
    }

    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points()
            .windows(2)
            .map(|w| (w[0].0 - w[1].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }

    /// Threshold representing interval `j` for the balance methods.
    pub fn midpoint(&self, j: usize) -> f32 {
        let k = self.thresholds.len();
        match j {
            0 => self.thresholds[0],
            _ if j == k => self.thresholds[k - 1].next_up(),
            _ => {
                let (a, b) = (self.thresholds[j - 1], self.thresholds[j]);
                let m = ((a as f64 + b as f64) / 2.0) as f32;
                // neighbouring floats: the rounded midpoint may land on `a`
                if m > a { m } else { b }
            }
        }
    }

    /// Smallest threshold inside interval `j`.
    pub fn lower_edge(&self, j: usize) -> f32 {
        if j == 0 { self.thresholds[0] } else { self.thresholds[j - 1].next_up() }
    }
}

/// Nonnegative rational used to compare gaps exactly.
#[derive(Clone, Copy, Debug)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn lt(self, o: Ratio) -> bool {
        self.num * o.den < o.num * self.den
    }

    fn eq(self, o: Ratio) -> bool {
        self.num * o.den == o.num * self.den
    }
}

/// Interval minimising `gap`; ties go to the midpoint nearest 0.5, then the lower one.
fn balance_point(curve: &RocCurve, gap: impl Fn(usize, usize) -> Option<Ratio>) -> f32 {
    let mut best: Option<(Ratio, f32, f32)> = None;
    for j in 0..curve.intervals() {
        let (tp, fp) = curve.counts(j);
        let Some(g) = gap(tp, fp) else { continue };
        let t = curve.midpoint(j);
        let d = (t - NAIVE_THRESHOLD).abs();
        let better = match best {
            None => true,
            Some((bg, _, bd)) => g.lt(bg) || (g.eq(bg) && d < bd),
        };
        if better {
            best = Some((g, t, d));
        }
    }
    best.map_or(NAIVE_THRESHOLD, |(_, t, _)| t)
}

/// Equal-error-rate threshold: minimises `|TPR - (1 - FPR)|`.
pub fn f1_calibrate(curve: &RocCurve) -> f32 {
    let (p, n) = (curve.positives as u128, curve.negatives as u128);
    balance_point(curve, |tp, fp| {
        let a = tp as u128 * n;
        let b = (n - fp as u128) * p;
        Some(Ratio { num: a.abs_diff(b), den: p * n })
    })
}

/// Precision/recall break-even threshold: minimises `|precision - recall|`.
/// Intervals that predict nothing positive have no precision and are skipped.
pub fn pr_breakeven_calibrate(curve: &RocCurve) -> f32 {
    let p = curve.positives as u128;
    balance_point(curve, |tp, fp| {
        let predicted = (tp + fp) as u128;
        (predicted > 0).then(|| Ratio {
            num: tp as u128 * predicted.abs_diff(p),
            den: predicted * p,
        })
    })
}

/// Smallest threshold whose FPR is at most `k`, i.e. the highest recall
/// within the false-positive budget.
pub fn fpr_calibrate(curve: &RocCurve, k: f64) -> Result<f32> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::config(format!("FPR budget {k} outside [0,1]")));
    }
    let n = curve.negatives as f64;
    let j = (0..curve.intervals())
        .find(|&j| curve.counts(j).1 as f64 / n <= k)
        .expect("the top interval has FPR 0");
    Ok(curve.lower_edge(j))
}

/// Threshold selection rule applied to one attribute's ROC curve.
pub trait ThresholdStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Method column written into calibration tables.
    fn tag(&self) -> String {
        self.name().to_string()
    }
    fn threshold(&self, curve: &RocCurve) -> Result<f32>;
}

pub struct EqualErrorRate;

impl ThresholdStrategy for EqualErrorRate {
    fn name(&self) -> &'static str {
        "f1"
    }

    fn threshold(&self, curve: &RocCurve) -> Result<f32> {
        Ok(f1_calibrate(curve))
    }
}

pub struct PrBreakEven;

impl ThresholdStrategy for PrBreakEven {
    fn name(&self) -> &'static str {
        "pr_breakeven"
    }

    fn threshold(&self, curve: &RocCurve) -> Result<f32> {
        Ok(pr_breakeven_calibrate(curve))
    }
}

pub struct FprBudget {
    pub k: f64,
}

impl ThresholdStrategy for FprBudget {
    fn name(&self) -> &'static str {
        "fpr"
    }

    fn tag(&self) -> String {
        format!("fpr_at_{}", self.k)
    }

    fn threshold(&self, curve: &RocCurve) -> Result<f32> {
        fpr_calibrate(curve, self.k)
    }
}

pub struct Naive;

impl ThresholdStrategy for Naive {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn threshold(&self, _: &RocCurve) -> Result<f32> {
        Ok(NAIVE_THRESHOLD)
    }
}

/// `f1` (alias `eer`), `pr_breakeven`, `fpr` (option `k`, default 0.2) and `naive`.
pub fn calibration_registry() -> Registry<dyn ThresholdStrategy> {
    let mut reg: Registry<dyn ThresholdStrategy> = Registry::new("calibration method");
    reg.register("f1", |_| Ok(Box::new(EqualErrorRate)));
    reg.register("eer", |_| Ok(Box::new(EqualErrorRate)));
    reg.register("pr_breakeven", |_| Ok(Box::new(PrBreakEven)));
    reg.register("fpr", |o: &KvMap| {
        let k = o.parsed_or("k", DEFAULT_FPR_BUDGET)?;
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::config(format!("FPR budget {k} outside [0,1]")));
        }
        Ok(Box::new(FprBudget { k }))
    });
    reg.register("naive", |_| Ok(Box::new(Naive)));
    reg
}

/// Scores and labels of the training split. Only the crate's scoring code
/// builds these, so a calibration table can never see other splits.
#[derive(Clone, Debug)]
pub struct TrainScores {
    scores: ScoreMatrix,
    labels: LabelMatrix,
}

impl TrainScores {
    pub(crate) fn new(scores: ScoreMatrix, labels: LabelMatrix) -> Result<Self> {
        scores.same_shape(&labels)?;
        Ok(TrainScores { scores, labels })
    }

    pub fn scores(&self) -> &ScoreMatrix {
        &self.scores
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationEntry {
    pub name: String,
    pub threshold: f32,
    pub method: String,
}

/// Per-attribute thresholds plus provenance comments.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    entries: Vec<CalibrationEntry>,
    provenance: KvMap,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\t', '\n', '\r']) || name.starts_with('#') {
        return Err(Error::data(format!("invalid attribute name {name:?}")));
    }
    Ok(())
}

impl CalibrationTable {
    pub fn new(entries: Vec<CalibrationEntry>) -> Result<Self> {
        for e in &entries {
            check_name(&e.name)?;
            if !e.threshold.is_finite() {
                return Err(Error::NonFinite(format!("threshold for `{}`", e.name)));
            }
            if e.method.is_empty() || e.method.contains(char::is_whitespace) {
                return Err(Error::data(format!("invalid method tag {:?}", e.method)));
            }
        }
        let mut provenance = KvMap::new();
        provenance.set("split", "train");
        Ok(CalibrationTable { entries, provenance })
    }

    /// Same threshold for every attribute.
    pub fn uniform(names: &[String], threshold: f32, method: &str) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| CalibrationEntry { name: n.clone(), threshold, method: method.into() })
                .collect(),
        )
    }

    /// Fits one threshold per attribute column. Single-class columns fall
    /// back to 0.5 with a warning.
    pub fn fit(train: &TrainScores, names: &[String], strategy: &dyn ThresholdStrategy) -> Result<Self> {
        let (scores, labels) = (train.scores(), train.labels());
        if names.len() != scores.cols() {
            return Err(Error::shape(format!(
                "{} attribute names for {} score columns",
                names.len(),
                scores.cols()
            )));
        }
        let mut entries = Vec::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            let entry = match RocCurve::new(&scores.column(c), &labels.column(c)) {
                Ok(curve) => CalibrationEntry {
                    name: name.clone(),
                    threshold: strategy.threshold(&curve)?,
                    method: strategy.tag(),
                },
                Err(Error::Degenerate(why)) => {
                    warn!("attribute `{name}`: {why}; using threshold {NAIVE_THRESHOLD}");
                    CalibrationEntry { name: name.clone(), threshold: NAIVE_THRESHOLD, method: "naive".into() }
                }
                Err(e) => return Err(e),
            };
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[CalibrationEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn thresholds(&self) -> Vec<f32> {
        self.entries.iter().map(|e| e.threshold).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Comment header: split, config hash, seed and anything else stamped on.
    pub fn provenance(&self) -> &KvMap {
        &self.provenance
    }

    pub fn stamp(&mut self, key: &str, value: impl std::fmt::Display) {
        self.provenance.set(key, value);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.provenance.iter() {
            let _ = writeln!(out, "# {k}={v}");
        }
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.name, e.threshold, e.method);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut provenance = KvMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    provenance.set(k.trim(), v.trim());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, threshold, method] = fields[..] else {
                return Err(Error::Format(format!(
                    "calibration line {}: expected 3 tab-separated fields",
                    ln + 1
                )));
            };
            let threshold = threshold.parse::<f32>().map_err(|_| {
                Error::Format(format!("calibration line {}: bad threshold {threshold:?}", ln + 1))
            })?;
            entries.push(CalibrationEntry { name: name.into(), threshold, method: method.into() });
        }
        let mut table = Self::new(entries)?;
        table.provenance.merge(&provenance);
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// `1` where `p >= t_m`.
pub fn apply_threshold_values(probabilities: &ScoreMatrix, thresholds: &[f32]) -> Result<LabelMatrix> {
    let m = probabilities.cols();
    if thresholds.len() != m {
        return Err(Error::shape(format!(
            "{} thresholds for {m} attributes",
            thresholds.len()
        )));
    }
    if let Some(p) = probabilities.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::data(format!("probability {p} outside [0,1]")));
    }
    let data = probabilities
        .data()
        .iter()
        .enumerate()
        .map(|(k, &p)| u8::from(p >= thresholds[k % m]))
        .collect();
    LabelMatrix::from_vec(probabilities.rows(), m, data)
}

pub fn apply_thresholds(probabilities: &ScoreMatrix, table: &CalibrationTable) -> Result<LabelMatrix> {
    apply_threshold_values(probabilities, &table.thresholds())
}
