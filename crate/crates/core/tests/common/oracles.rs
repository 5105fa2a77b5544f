//! Brute-force reference implementations used to cross-check the library.

use std::collections::BTreeSet;

/// Threshold the library reports for interval `j` of the sorted distinct
/// scores `u` under the balance methods.
fn balance_representative(u: &[f32], j: usize) -> f32 {
    if j == 0 {
        u[0]
    } else if j == u.len() {
        u[j - 1].next_up()
    } else {
        let (a, b) = (u[j - 1], u[j]);
        let m = ((f64::from(a) + f64::from(b)) / 2.0) as f32;
        if m > a { m } else { b }
    }
}

fn distinct(scores: &[f32]) -> Vec<f32> {
    let mut u = scores.to_vec();
    u.sort_by(f32::total_cmp);
    u.dedup();
    u
}

fn count_at(scores: &[f32], labels: &[u8], t: f32) -> (i128, i128) {
    let tp = scores.iter().zip(labels).filter(|(&s, &y)| y == 1 && s >= t).count();
    let fp = scores.iter().zip(labels).filter(|(&s, &y)| y == 0 && s >= t).count();
    (tp as i128, fp as i128)
}

/// Exhaustive sweep for the equal-error-rate threshold: smallest
/// `|TPR - TNR|`, then closest to 0.5, then the lowest threshold.
pub fn sweep_eer(scores: &[f32], labels: &[u8]) -> f32 {
    let p = labels.iter().filter(|&&y| y == 1).count() as i128;
    let n = labels.len() as i128 - p;
    let u = distinct(scores);
    let mut best: Option<(i128, f32, f32)> = None;
    for j in 0..=u.len() {
        let t = balance_representative(&u, j);
        let (tp, fp) = count_at(scores, labels, t);
        // |tp/p - (n-fp)/n| scaled by p*n
        let gap = (tp * n - (n - fp) * p).abs();
        let d = (t - 0.5).abs();
        if best.is_none_or(|(g, _, bd)| gap < g || (gap == g && d < bd)) {
            best = Some((gap, t, d));
        }
    }
    best.unwrap().1
}

/// Exhaustive sweep for the lowest threshold whose false-positive rate is
/// within `k`.
pub fn sweep_fpr(scores: &[f32], labels: &[u8], k: f64) -> f32 {
    let n = labels.iter().filter(|&&y| y == 0).count() as f64;
    let u = distinct(scores);
    let mut candidates: Vec<f32> = vec![u[0]];
    candidates.extend(u.iter().map(|s| s.next_up()));
    candidates
        .into_iter()
        .find(|&t| count_at(scores, labels, t).1 as f64 / n <= k)
        .unwrap()
}

pub struct BruteMetrics {
    pub mean_accuracy: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub subset: f64,
    pub micro_auc: Option<f64>,
}

/// Rows are samples, columns attributes.
pub fn brute_metrics(y: &[Vec<u8>], p: &[Vec<u8>], s: &[Vec<f32>]) -> BruteMetrics {
    let n = y.len();
    let m = y[0].len();
    let mut balanced = Vec::new();
    for a in 0..m {
        let pos: Vec<usize> = (0..n).filter(|&i| y[i][a] == 1).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| y[i][a] == 0).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let tpr = pos.iter().filter(|&&i| p[i][a] == 1).count() as f64 / pos.len() as f64;
        let tnr = neg.iter().filter(|&&i| p[i][a] == 0).count() as f64 / neg.len() as f64;
        balanced.push((tpr + tnr) / 2.0);
    }
    let mean_accuracy = (!balanced.is_empty()).then(|| balanced.iter().sum::<f64>() / balanced.len() as f64);

    let (mut acc, mut prec, mut rec, mut exact) = (0.0, 0.0, 0.0, 0);
    for i in 0..n {
        let ys: BTreeSet<usize> = (0..m).filter(|&a| y[i][a] == 1).collect();
        let ps: BTreeSet<usize> = (0..m).filter(|&a| p[i][a] == 1).collect();
        let inter = ys.intersection(&ps).count() as f64;
        let union = ys.union(&ps).count() as f64;
        acc += if union == 0.0 { 1.0 } else { inter / union };
        prec += if ps.is_empty() { f64::from(u8::from(ys.is_empty())) } else { inter / ps.len() as f64 };
        rec += if ys.is_empty() { f64::from(u8::from(ps.is_empty())) } else { inter / ys.len() as f64 };
        exact += usize::from(ys == ps);
    }
    let (precision, recall) = (prec / n as f64, rec / n as f64);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };

    let mut pos_scores = Vec::new();
    let mut neg_scores = Vec::new();
    for i in 0..n {
        for a in 0..m {
            if y[i][a] == 1 { pos_scores.push(s[i][a]) } else { neg_scores.push(s[i][a]) }
        }
    }
    let micro_auc = (!pos_scores.is_empty() && !neg_scores.is_empty()).then(|| {
        let mut wins = 0.0;
        for &a in &pos_scores {
            for &b in &neg_scores {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        wins / (pos_scores.len() * neg_scores.len()) as f64
    });

    BruteMetrics {
        mean_accuracy,
        accuracy: acc / n as f64,
        precision,
        recall,
        f1,
        subset: exact as f64 / n as f64,
        micro_auc,
    }
}
