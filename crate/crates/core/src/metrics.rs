//! Multi-label evaluation: AUROC, AUPR, accuracy and macro-F1.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ehr::LabelVector;
use crate::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; equal scores are adjacent.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Runs of equal scores in `order`, as `(positives, negatives)` per run.
fn tie_groups(scores: &[f64], labels: &[u8], order: &[usize]) -> Vec<(usize, usize)> {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &i in order {
        if prev.is_none_or(|p| p.total_cmp(&scores[i]) != Ordering::Equal) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed above");
        if labels[i] != 0 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUROC needs both classes".into()));
    }
    let order = order_desc(scores);
    let mut negatives_below = neg as f64;
    let mut wins = 0.0;
    for (p, n) in tie_groups(scores, labels, &order) {
        negatives_below -= n as f64;
        wins += p as f64 * (negatives_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve: the precision after
/// each group of tied scores, weighted by that group's recall increment.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::InvalidArgument("AUPR needs a positive".into()));
    }
    let order = order_desc(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    for (p, n) in tie_groups(scores, labels, &order) {
        tp += p;
        seen += p + n;
        if p > 0 {
            area += (tp as f64 / seen as f64) * (p as f64 / pos as f64);
        }
    }
    Ok(area)
}

/// F1 for one label from hard predictions, 0 when undefined.
fn f1(pred: &[bool], labels: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        match (p, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Micro accuracy over all (example, label) cells and macro F1 over labels,
/// predicting positive when `score >= threshold`. `scores[i][j]` is example
/// `i`, label `j`.
pub fn acc_f1(scores: &[Vec<f64>], labels: &[LabelVector], threshold: f64) -> Result<(f64, f64)> {
    let (cols, per_label) = columns(scores, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut correct = 0usize;
    let mut f1_sum = 0.0;
    for (s, y) in cols.iter().zip(&per_label) {
        let pred: Vec<bool> = s.iter().map(|&v| v >= threshold).collect();
        correct += pred.iter().zip(y).filter(|(&p, &t)| p == (t != 0)).count();
        f1_sum += f1(&pred, y);
    }
    let cells = scores.len() * cols.len();
    Ok((correct as f64 / cells as f64, f1_sum / cols.len() as f64))
}

type Columns = (Vec<Vec<f64>>, Vec<Vec<u8>>);

/// Transposes row-major predictions and labels into per-label columns.
fn columns(scores: &[Vec<f64>], labels: &[LabelVector]) -> Result<Columns> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let n = labels[0].len();
    if scores.iter().any(|r| r.len() != n) || labels.iter().any(|l| l.len() != n) {
        return Err(Error::InvalidArgument("ragged prediction or label rows".into()));
    }
    let cols = (0..n).map(|j| scores.iter().map(|r| r[j]).collect()).collect();
    let ys = (0..n).map(|j| labels.iter().map(|l| l.values()[j]).collect()).collect();
    Ok((cols, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub acc: f64,
    pub f1: f64,
    /// `None` when the label has a single class in the evaluated set.
    pub auroc: Option<f64>,
    /// `None` when the label has no positives.
    pub aupr: Option<f64>,
}

/// Macro-averaged metrics; labels with undefined AUROC or AUPR are left out
/// of those means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub macro_f1: f64,
    pub per_label: Vec<LabelMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, what: &str) -> Result<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        return Err(Error::Data(format!("{what} is undefined for every label")));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &[LabelVector],
    label_names: &[String],
    threshold: f64,
) -> Result<EvalReport> {
    let (acc, macro_f1) = acc_f1(scores, labels, threshold)?;
    let (cols, ys) = columns(scores, labels)?;
    let per_label: Vec<LabelMetrics> = cols
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(j, (s, y))| {
            let pred: Vec<bool> = s.iter().map(|&v| v >= threshold).collect();
            let correct = pred.iter().zip(y).filter(|(&p, &t)| p == (t != 0)).count();
            LabelMetrics {
                label: label_names.get(j).cloned().unwrap_or_else(|| format!("label{j}")),
                acc: correct as f64 / y.len() as f64,
                f1: f1(&pred, y),
                auroc: auroc(s, y).ok(),
                aupr: aupr(s, y).ok(),
            }
        })
        .collect();
    Ok(EvalReport {
        acc,
        auroc: mean_defined(per_label.iter().map(|m| m.auroc), "AUROC")?,
        aupr: mean_defined(per_label.iter().map(|m| m.aupr), "AUPR")?,
        macro_f1,
        per_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    fn labs(v: &[&[u8]]) -> Vec<LabelVector> {
        v.iter().map(|r| LabelVector::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn auroc_hand_values() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn aupr_hand_values() {
        assert_eq!(aupr(&[0.9, 0.3, 0.2], &[1, 0, 0]).unwrap(), 1.0);
        assert!((aupr(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!(aupr(&[0.9, 0.8], &[0, 0]).is_err());
    }

    #[test]
    fn aupr_of_random_scores_is_prevalence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        let pi = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
        assert!((aupr(&scores, &labels).unwrap() - pi).abs() < 0.05);
    }

    #[test]
    fn acc_f1_cases() {
        let y = labs(&[&[1], &[0], &[1], &[0]]);
        assert_eq!(acc_f1(&rows(&[&[0.9], &[0.1], &[0.7], &[0.2]]), &y, 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(acc_f1(&rows(&[&[0.1], &[0.1], &[0.1], &[0.1]]), &y, 0.5).unwrap(), (0.5, 0.0));
        // tp=1 (row 0), fp=1 (row 1), fn=1 (row 2), tn=1 (row 3): f1 = 2/(2+1+1)
        let (acc, f) = acc_f1(&rows(&[&[0.6], &[0.5], &[0.4], &[0.0]]), &y, 0.5).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(f, 0.5);
    }

    #[test]
    fn report_excludes_undefined_labels() {
        let scores = rows(&[&[0.9, 0.2], &[0.1, 0.3], &[0.8, 0.4]]);
        let y = labs(&[&[1, 0], &[0, 0], &[1, 0]]);
        let r = evaluate(&scores, &y, &["a".into(), "b".into()], 0.5).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.aupr, 1.0);
        assert_eq!(r.per_label[1].auroc, None);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["acc", "auroc", "aupr", "macro_f1", "per_label"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 5.0).collect()),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_complement_sums_to_one((s, y) in case()) {
            let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            if let (Ok(a), Ok(b)) = (auroc(&s, &y), auroc(&s, &flipped)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn auroc_invariant_to_increasing_transform((s, y) in case()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&s, &y).ok(), auroc(&t, &y).ok());
        }
    }
}
