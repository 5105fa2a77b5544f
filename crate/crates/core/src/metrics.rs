//! Multi-label evaluation: label-based mean accuracy, example-based
//! (Jaccard) accuracy/precision/recall/F1, micro-averaged AUC and subset
//! accuracy.
//!
//! Example-based conventions for empty sets, per sample:
//! accuracy is 1 when both the truth and the prediction are empty; precision
//! with nothing predicted is 1 if nothing was true, else 0; recall with
//! nothing true is 1 if nothing was predicted, else 0.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::matrix::{LabelMatrix, ScoreMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }

    pub fn tpr(&self) -> Option<f64> {
        (self.positives() > 0).then(|| self.tp as f64 / self.positives() as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        (self.negatives() > 0).then(|| self.tn as f64 / self.negatives() as f64)
    }

    /// `(TPR + TNR) / 2`, undefined without both classes.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some((self.tpr()? + self.tnr()?) / 2.0)
    }
}

fn check_pair(labels: &LabelMatrix, predictions: &LabelMatrix) -> Result<()> {
    labels.same_shape(predictions)?;
    if labels.data().iter().chain(predictions.data()).any(|&v| v > 1) {
        return Err(Error::data("label and prediction matrices must be binary"));
    }
    Ok(())
}

pub fn confusion_counts(labels: &LabelMatrix, predictions: &LabelMatrix) -> Result<Vec<ConfusionCounts>> {
    check_pair(labels, predictions)?;
    let m = labels.cols();
    let mut counts = vec![ConfusionCounts::default(); m];
    for (k, (&y, &p)) in labels.data().iter().zip(predictions.data()).enumerate() {
        let c = &mut counts[k % m];
        match (y, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(counts)
}

/// Mean over attributes of `(TPR + TNR) / 2`. Attributes lacking either
/// class are skipped with a warning.
pub fn mean_accuracy(counts: &[ConfusionCounts]) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0;
    for (m, c) in counts.iter().enumerate() {
        match c.balanced_accuracy() {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => warn!(
                "attribute {m} has {} positives and {} negatives; left out of mA",
                c.positives(),
                c.negatives()
            ),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("no attribute has both classes; mA undefined".into()));
    }
    Ok(sum / used as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleBased {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio_or(num: usize, den: usize, empty: bool) -> f64 {
    if den == 0 {
        f64::from(u8::from(empty))
    } else {
        num as f64 / den as f64
    }
}

pub fn example_based(labels: &LabelMatrix, predictions: &LabelMatrix) -> Result<ExampleBased> {
    check_pair(labels, predictions)?;
    let n = labels.rows();
    if n == 0 {
        return Err(Error::Degenerate("example-based metrics need at least one sample".into()));
    }
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (y, p) = (labels.row(i), predictions.row(i));
        let inter = y.iter().zip(p).filter(|(a, b)| **a == 1 && **b == 1).count();
        let union = y.iter().zip(p).filter(|(a, b)| **a == 1 || **b == 1).count();
        let ny = y.iter().filter(|&&v| v == 1).count();
        let np = p.iter().filter(|&&v| v == 1).count();
        acc += ratio_or(inter, union, true);
        prec += ratio_or(inter, np, ny == 0);
        rec += ratio_or(inter, ny, np == 0);
    }
    let (precision, recall) = (prec / n as f64, rec / n as f64);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ExampleBased { accuracy: acc / n as f64, precision, recall, f1 })
}

/// Fraction of rows predicted exactly.
pub fn subset_accuracy(labels: &LabelMatrix, predictions: &LabelMatrix) -> Result<f64> {
    check_pair(labels, predictions)?;
    if labels.rows() == 0 {
        return Err(Error::Degenerate("subset accuracy needs at least one sample".into()));
    }
    let exact = (0..labels.rows()).filter(|&i| labels.row(i) == predictions.row(i)).count();
    Ok(exact as f64 / labels.rows() as f64)
}

/// ROC area over every (sample, attribute) pair pooled together, via the
/// Mann-Whitney statistic with tied scores counted as one half.
pub fn micro_auc(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<f64> {
    scores.same_shape(labels)?;
    if let Some(s) = scores.data().iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.data().iter().filter(|&&y| y == 1).count();
    let neg = labels.data().len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("micro AUC needs both classes".into()));
    }
    let s = scores.data();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && s[order[j]] == s[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels.data()[k] == 1).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMetrics {
    pub name: String,
    pub counts: ConfusionCounts,
}

/// Everything the evaluator reports for one prediction set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    /// `None` when no attribute has both classes.
    pub mean_accuracy: Option<f64>,
    pub example: ExampleBased,
    /// `None` when the pooled labels have a single class.
    pub micro_auc: Option<f64>,
    pub subset_accuracy: f64,
    pub per_attribute: Vec<AttributeMetrics>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn compute(
        names: &[String],
        scores: &ScoreMatrix,
        labels: &LabelMatrix,
        predictions: &LabelMatrix,
    ) -> Result<Self> {
        if names.len() != labels.cols() {
            return Err(Error::shape(format!(
                "{} names for {} attributes",
                names.len(),
                labels.cols()
            )));
        }
        let counts = confusion_counts(labels, predictions)?;
        let degenerate = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricsReport {
            samples: labels.rows(),
            mean_accuracy: degenerate(mean_accuracy(&counts))?,
            example: example_based(labels, predictions)?,
            micro_auc: degenerate(micro_auc(scores, labels))?,
            subset_accuracy: subset_accuracy(labels, predictions)?,
            per_attribute: names
                .iter()
                .zip(counts)
                .map(|(n, c)| AttributeMetrics { name: n.clone(), counts: c })
                .collect(),
        })
    }

    /// Flat `key=value` block.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", self.samples);
        let _ = writeln!(out, "mA={}", fmt_opt(self.mean_accuracy));
        let _ = writeln!(out, "example_accuracy={:.6}", self.example.accuracy);
        let _ = writeln!(out, "example_precision={:.6}", self.example.precision);
        let _ = writeln!(out, "example_recall={:.6}", self.example.recall);
        let _ = writeln!(out, "example_f1={:.6}", self.example.f1);
        let _ = writeln!(out, "micro_auc={}", fmt_opt(self.micro_auc));
        let _ = writeln!(out, "subset_accuracy={:.6}", self.subset_accuracy);
        out
    }

    /// Tab-separated per-attribute breakdown with a header row.
    pub fn attribute_table(&self) -> String {
        let mut out = String::from("attribute\ttp\tfp\ttn\tfn\ttpr\ttnr\tbalanced_accuracy\n");
        for a in &self.per_attribute {
            let c = a.counts;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                a.name,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                fmt_opt(c.tpr()),
                fmt_opt(c.tnr()),
                fmt_opt(c.balanced_accuracy())
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(rows: &[&[u8]]) -> LabelMatrix {
        LabelMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let y = lm(&[&[1, 0, 1], &[0, 1, 0], &[1, 1, 0]]);
        let c = confusion_counts(&y, &y).unwrap();
        assert_eq!(mean_accuracy(&c).unwrap(), 1.0);
        let e = example_based(&y, &y).unwrap();
        assert_eq!((e.accuracy, e.precision, e.recall, e.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(subset_accuracy(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn always_positive_scores_half() {
        let y = lm(&[&[1, 0], &[0, 1], &[0, 0], &[1, 1]]);
        let p = lm(&[&[1, 1], &[1, 1], &[1, 1], &[1, 1]]);
        assert_eq!(mean_accuracy(&confusion_counts(&y, &p).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_mean_accuracy() {
        let y = lm(&[&[1, 0, 1], &[0, 0, 1], &[1, 1, 0], &[0, 1, 0], &[1, 0, 0]]);
        let p = lm(&[&[1, 0, 0], &[1, 0, 1], &[0, 1, 0], &[0, 0, 0], &[1, 1, 1]]);
        // attr0: TP 2 FN 1 TN 1 FP 1 -> (2/3 + 1/2)/2
        // attr1: TP 1 FN 1 TN 2 FP 1 -> (1/2 + 2/3)/2
        // attr2: TP 1 FN 1 TN 2 FP 1 -> (1/2 + 2/3)/2
        let c = confusion_counts(&y, &p).unwrap();
        assert_eq!(c[0], ConfusionCounts { tp: 2, fp: 1, tn: 1, fn_: 1 });
        let want = (2.0 / 3.0 + 0.5) / 2.0;
        assert!((mean_accuracy(&c).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn degenerate_attributes_are_skipped() {
        let y = lm(&[&[1, 0], &[1, 1]]);
        let p = lm(&[&[1, 0], &[0, 1]]);
        // attr0 has no negatives, attr1 is perfect
        assert_eq!(mean_accuracy(&confusion_counts(&y, &p).unwrap()).unwrap(), 1.0);
        let all_pos = lm(&[&[1], &[1]]);
        assert!(matches!(
            mean_accuracy(&confusion_counts(&all_pos, &all_pos).unwrap()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn hand_example_based() {
        let y = lm(&[&[1, 0, 1], &[0, 1, 1]]);
        let p = lm(&[&[1, 0, 0], &[0, 1, 1]]);
        let e = example_based(&y, &p).unwrap();
        assert_eq!(e.accuracy, 0.75);
        assert_eq!(e.recall, 0.75);
        assert_eq!(e.precision, 1.0);
        assert!((e.f1 - 2.0 * 0.75 / 1.75).abs() < 1e-15);
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let y = lm(&[&[1, 0, 0], &[0, 1, 0]]);
        let p = lm(&[&[0, 1, 1], &[1, 0, 1]]);
        let e = example_based(&y, &p).unwrap();
        assert_eq!((e.accuracy, e.precision, e.recall, e.f1), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_set_conventions() {
        let y = lm(&[&[0, 0], &[0, 0], &[1, 0]]);
        let p = lm(&[&[0, 0], &[1, 0], &[0, 0]]);
        let e = example_based(&y, &p).unwrap();
        // rows: both empty -> 1,1,1; nothing true -> acc 0, prec 0, rec 0;
        // nothing predicted -> acc 0, prec 0, rec 0
        assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((e.precision - 1.0 / 3.0).abs() < 1e-15);
        assert!((e.recall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn subset_accuracy_counts_exact_rows() {
        let y = lm(&[&[1, 0, 1], &[0, 1, 1]]);
        let p = lm(&[&[1, 0, 1], &[0, 0, 1]]);
        assert_eq!(subset_accuracy(&y, &p).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let y = lm(&[&[1, 0]]);
        let p = lm(&[&[1, 0, 1]]);
        assert!(example_based(&y, &p).is_err());
        assert!(confusion_counts(&y, &p).is_err());
    }

    #[test]
    fn perfectly_ranked_auc_is_one() {
        let s = ScoreMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let y = lm(&[&[1, 0], &[0, 1]]);
        assert_eq!(micro_auc(&s, &y).unwrap(), 1.0);
    }

    #[test]
    fn auc_of_four_pairs_matches_pair_count() {
        // positives 0.7, 0.4; negatives 0.4, 0.2
        let s = ScoreMatrix::from_rows(&[vec![0.7, 0.4], vec![0.4, 0.2]]).unwrap();
        let y = lm(&[&[1, 1], &[0, 0]]);
        // pairs: (0.7>0.4) 1, (0.7>0.2) 1, (0.4=0.4) 0.5, (0.4>0.2) 1
        assert_eq!(micro_auc(&s, &y).unwrap(), 3.5 / 4.0);
        assert!(micro_auc(&s, &lm(&[&[1, 1], &[1, 1]])).is_err());
    }

    #[test]
    fn random_scores_give_half_auc() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (500, 8);
        let s = ScoreMatrix::from_vec(n, m, (0..n * m).map(|_| rng.random()).collect()).unwrap();
        let y = LabelMatrix::from_vec(n, m, (0..n * m).map(|_| rng.random_range(0..2)).collect()).unwrap();
        assert!((micro_auc(&s, &y).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn report_text_blocks() {
        let names = vec!["a".to_string(), "b".to_string()];
        let s = ScoreMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let y = lm(&[&[1, 0], &[0, 1]]);
        let r = MetricsReport::compute(&names, &s, &y, &y).unwrap();
        let text = r.summary_text();
        assert!(text.contains("mA=1.000000"));
        assert!(text.contains("micro_auc=1.000000"));
        let table = r.attribute_table();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(1).unwrap().starts_with("a\t1\t0\t1\t0\t"));
        let one = lm(&[&[1, 1], &[1, 1]]);
        let r = MetricsReport::compute(&names, &s, &one, &one).unwrap();
        assert_eq!(r.mean_accuracy, None);
        assert!(r.summary_text().contains("mA=NA"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (LabelMatrix, LabelMatrix, ScoreMatrix)> {
            (1usize..12, 1usize..6).prop_flat_map(|(n, m)| {
                (
                    prop::collection::vec(0u8..2, n * m),
                    prop::collection::vec(0u8..2, n * m),
                    prop::collection::vec((0u8..10).prop_map(|v| v as f32 / 10.0), n * m),
                )
                    .prop_map(move |(a, b, s)| {
                        (
                            LabelMatrix::from_vec(n, m, a).unwrap(),
                            LabelMatrix::from_vec(n, m, b).unwrap(),
                            ScoreMatrix::from_vec(n, m, s).unwrap(),
                        )
                    })
            })
        }

        proptest! {
            #[test]
            fn metrics_lie_in_unit_interval((y, p, s) in pair()) {
                let e = example_based(&y, &p).unwrap();
                for v in [e.accuracy, e.precision, e.recall, e.f1, subset_accuracy(&y, &p).unwrap()] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if let Ok(a) = mean_accuracy(&confusion_counts(&y, &p).unwrap()) {
                    prop_assert!((0.0..=1.0).contains(&a));
                }
                if let Ok(a) = micro_auc(&s, &y) {
                    prop_assert!((0.0..=1.0).contains(&a));
                }
            }

            #[test]
            fn counts_partition_every_column((y, p, _s) in pair()) {
                for c in confusion_counts(&y, &p).unwrap() {
                    prop_assert_eq!(c.total(), y.rows());
                }
            }

            #[test]
            fn f1_is_harmonic_mean((y, p, _s) in pair()) {
                let e = example_based(&y, &p).unwrap();
                if e.precision > 0.0 && e.recall > 0.0 {
                    let h = 2.0 / (1.0 / e.precision + 1.0 / e.recall);
                    prop_assert!((e.f1 - h).abs() < 1e-12);
                }
            }

            #[test]
            fn majority_predictor_has_half_mean_accuracy((y, _p, _s) in pair()) {
                let c = confusion_counts(&y, &y).unwrap();
                prop_assume!(c.iter().any(|c| c.positives() > 0 && c.negatives() > 0));
                // predict each column's majority class everywhere
                let m = y.cols();
                let major: Vec<u8> = (0..m).map(|j| u8::from(2 * y.positives_in_column(j) >= y.rows())).collect();
                let pred = LabelMatrix::from_vec(y.rows(), m, (0..y.rows() * m).map(|k| major[k % m]).collect()).unwrap();
                prop_assert_eq!(mean_accuracy(&confusion_counts(&y, &pred).unwrap()).unwrap(), 0.5);
            }

            #[test]
            fn auc_ignores_increasing_transforms((y, _p, s) in pair()) {
                prop_assume!(micro_auc(&s, &y).is_ok());
                let moved = ScoreMatrix::from_vec(s.rows(), s.cols(), s.data().iter().map(|v| v * v * 3.0 + 1.0).collect()).unwrap();
                prop_assert_eq!(micro_auc(&s, &y).unwrap(), micro_auc(&moved, &y).unwrap());
            }

            #[test]
            fn set_algebra_agrees_with_loop((y, p, _s) in pair()) {
                // bitmask form of the same per-sample ratios
                let n = y.rows();
                let mask = |r: &[u8]| r.iter().enumerate().fold(0u32, |a, (i, &b)| a | (u32::from(b) << i));
                let mut acc = 0.0;
                for i in 0..n {
                    let (a, b) = (mask(y.row(i)), mask(p.row(i)));
                    let (inter, union) = ((a & b).count_ones(), (a | b).count_ones());
                    acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                }
                prop_assert_eq!(example_based(&y, &p).unwrap().accuracy, acc / n as f64);
            }
        }
    }
}
