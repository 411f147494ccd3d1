//! Ranking, calibration and multi-class classification metrics.
//!
//! Binary metrics take positive-class scores and labels in `{0, 1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("binary label expected, got {l}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

fn check_probabilities(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(s) => Err(Error::Validation(format!("score {s} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Mann–Whitney AUROC with half credit for ties.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (n_pos, n_neg) = check_binary(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Average ranks over tied groups.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ (R_i − R_{i−1}) P_i` over descending unique
/// thresholds, tied scores sharing one threshold.
pub fn auprc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (n_pos, _) = check_binary(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        seen += j - i + 1;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Expected calibration error over `bins` equal-width bins on `[0, 1]`.
pub fn ece(scores: &[f64], labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    check_binary(scores, labels)?;
    check_probabilities(scores)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("ECE of an empty sample".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += s;
        hits[b] += l as f64;
    }
    let n = scores.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            c / n * (hits[b] / c - conf[b] / c).abs()
        })
        .sum())
}

/// Mean squared difference between score and label.
pub fn brier(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_binary(scores, labels)?;
    check_probabilities(scores)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("Brier score of an empty sample".into()));
    }
    let total: f64 = scores.iter().zip(labels).map(|(&s, &l)| (s - l as f64).powi(2)).sum();
    Ok(total / scores.len() as f64)
}

/// Mean score over the positive samples.
pub fn mean_pos_prob(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (n_pos, _) = check_binary(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("no positive samples".into()));
    }
    let total: f64 = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| s).sum();
    Ok(total / n_pos as f64)
}

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Multi-class summary from predicted classes. A class with no predictions
/// (or no members) contributes 0 to the macro precision (or recall).
pub fn multiclass(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<MulticlassReport> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Validation("predictions and labels must be non-empty and aligned".into()));
    }
    if let Some(c) = predicted.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Validation(format!("class {c} outside 0..{n_classes}")));
    }
    let mut tp = vec![0.0; n_classes];
    let mut pred = vec![0.0; n_classes];
    let mut truth = vec![0.0; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        pred[p] += 1.0;
        truth[l] += 1.0;
        if p == l {
            tp[p] += 1.0;
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let p = ratio(tp[c], pred[c]);
        let r = ratio(tp[c], truth[c]);
        sp += p;
        sr += r;
        sf += ratio(2.0 * p * r, p + r);
    }
    let k = n_classes as f64;
    Ok(MulticlassReport {
        accuracy: tp.iter().sum::<f64>() / labels.len() as f64,
        macro_precision: sp / k,
        macro_recall: sr / k,
        macro_f1: sf / k,
    })
}

/// Metrics on one split. Undefined entries (for example AUROC with one
/// class present) are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub ece: Option<f64>,
    pub brier: Option<f64>,
    pub mean_pos_prob: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub multiclass: Option<MulticlassReport>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Report from class probabilities `[N, C]` (row-major). For `C = 2` the
/// binary metrics use column 1; for `C > 2` the multi-class summary is
/// filled instead.
pub fn report(probs: &[f64], labels: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if n_classes < 2 || probs.len() != labels.len() * n_classes {
        return Err(Error::Validation(format!(
            "{} probabilities for {} samples and {n_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let predicted: Vec<usize> = probs
        .chunks(n_classes)
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    if n_classes > 2 {
        return Ok(MetricsReport {
            n_pos: 0,
            n_neg: 0,
            multiclass: Some(multiclass(&predicted, labels, n_classes)?),
            ..Default::default()
        });
    }
    let scores: Vec<f64> = probs.chunks(2).map(|r| r[1].clamp(0.0, 1.0)).collect();
    let (n_pos, n_neg) = check_binary(&scores, labels)?;
    Ok(MetricsReport {
        auroc: defined(auroc(&scores, labels))?,
        auprc: defined(auprc(&scores, labels))?,
        ece: defined(ece(&scores, labels, DEFAULT_ECE_BINS))?,
        brier: defined(brier(&scores, labels))?,
        mean_pos_prob: defined(mean_pos_prob(&scores, labels))?,
        n_pos,
        n_neg,
        multiclass: if labels.is_empty() {
            None
        } else {
            Some(multiclass(&predicted, labels, 2)?)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.7], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auroc(&[0.3, 0.7], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.5; 4], &[1, 0, 0, 0]).unwrap(), 0.25);
        assert!(ece(&[0.8; 5], &[1, 1, 1, 1, 0], 10).unwrap().abs() < 1e-15);
        assert_eq!(ece(&[1.0], &[0], 10).unwrap(), 1.0);
        assert!(matches!(ece(&[1.0], &[0], 0), Err(Error::Config(_))));
        assert_eq!(brier(&[1.0], &[1]).unwrap(), 0.0);
        assert_eq!(brier(&[0.5, 0.5], &[0, 1]).unwrap(), 0.25);
        assert_eq!(mean_pos_prob(&[0.7], &[1]).unwrap(), 0.7);
        assert!((mean_pos_prob(&[0.6, 0.1, 0.8], &[1, 0, 1]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn multiclass_counts() {
        let r = multiclass(&[0, 1, 2, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert!((r.macro_recall - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_report_has_gaps() {
        let r = report(&[0.2, 0.8, 0.6, 0.4], &[1, 1], 2).unwrap();
        assert_eq!(r.auroc, None);
        assert!(r.auprc.is_some());
        assert_eq!(r.n_pos, 2);
    }
}
