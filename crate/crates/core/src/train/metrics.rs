use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and unweighted mean per-class F1 over `num_classes` classes.
/// A class with no gold and no predicted examples scores F1 = 0.
pub fn classification_metrics(predicted: &[usize], gold: &[usize], num_classes: usize) -> Result<ClassMetrics> {
    if gold.is_empty() {
        return Err(Error::Contract("cannot evaluate on empty data".into()));
    }
    if predicted.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predicted.len(),
            gold.len()
        )));
    }
    let k = num_classes.max(1);
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    let mut correct = 0;
    for (&p, &g) in predicted.iter().zip(gold) {
        if p >= k || g >= k {
            return Err(Error::Contract(format!("class {} outside 0..{k}", p.max(g))));
        }
        if p == g {
            tp[g] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let mut f1_sum = 0.0;
    for c in 0..k {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(ClassMetrics {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1: f1_sum / k as f64,
    })
}

/// Index of the largest value; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
