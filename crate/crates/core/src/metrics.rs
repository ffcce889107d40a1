//! Accuracy, micro-averaged precision/recall/F1 and label density.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Dataset, TaskKind};

/// TP/FP/FN summed over documents and classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTotals {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl ConfusionTotals {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

// 0/0 is 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Fraction of exact matches.
pub fn accuracy<L: PartialEq>(predictions: &[L], golds: &[L]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            what: "accuracy",
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

pub fn confusion<L: Ord>(pred_sets: &[BTreeSet<L>], gold_sets: &[BTreeSet<L>]) -> Result<ConfusionTotals> {
    if pred_sets.len() != gold_sets.len() {
        return Err(Error::LengthMismatch {
            what: "micro_prf",
            left: pred_sets.len(),
            right: gold_sets.len(),
        });
    }
    let mut t = ConfusionTotals::default();
    for (p, g) in pred_sets.iter().zip(gold_sets) {
        let tp = p.intersection(g).count() as u64;
        t.true_positive += tp;
        t.false_positive += p.len() as u64 - tp;
        t.false_negative += g.len() as u64 - tp;
    }
    Ok(t)
}

/// Micro-averaged precision, recall and F1 over label sets.
pub fn micro_prf<L: Ord>(pred_sets: &[BTreeSet<L>], gold_sets: &[BTreeSet<L>]) -> Result<Prf> {
    let t = confusion(pred_sets, gold_sets)?;
    Ok(Prf {
        precision: t.precision(),
        recall: t.recall(),
        f1: t.f1(),
    })
}

/// Mean number of labels per example over both splits.
pub fn label_density(dataset: &Dataset) -> Result<f64> {
    let n = dataset.train.len() + dataset.test.len();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let total: usize = dataset.examples().map(|e| e.labels.len()).sum();
    Ok(total as f64 / n as f64)
}

/// Evaluation summary of one pass over a split. All values are fractions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Exact-set match rate (plain accuracy for single-label tasks).
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "precision", "recall", "f1"];

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    /// The headline number: accuracy for single-label, micro-F1 for multi-label.
    pub fn headline(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::SingleLabel => self.accuracy,
            TaskKind::MultiLabel => self.f1,
        }
    }
}

pub fn summarize(pred_sets: &[BTreeSet<usize>], gold_sets: &[BTreeSet<usize>]) -> Result<Metrics> {
    let prf = micro_prf(pred_sets, gold_sets)?;
    Ok(Metrics {
        accuracy: accuracy(pred_sets, gold_sets)?,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::LabeledExample;

    fn sets(v: &[&[&'static str]]) -> Vec<BTreeSet<&'static str>> {
        v.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!((accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(accuracy::<u8>(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn worked_micro_fixture() {
        let golds = sets(&[&["a"], &["a", "b"]]);
        let preds = sets(&[&["a"], &["b"]]);
        let t = confusion(&preds, &golds).unwrap();
        assert_eq!((t.true_positive, t.false_positive, t.false_negative), (2, 0, 1));
        let prf = micro_prf(&preds, &golds).unwrap();
        assert_eq!(prf.precision, 1.0);
        assert!((prf.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let golds = sets(&[&["a"], &["b"]]);
        let perfect = micro_prf(&golds, &golds).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let empty = sets(&[&[], &[]]);
        let prf = micro_prf(&empty, &golds).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        assert!(micro_prf(&empty[..1], &golds).is_err());
    }

    #[test]
    fn densities() {
        let d = Dataset::new(
            "d",
            vec![LabeledExample::new("x", ["a"]), LabeledExample::new("y", ["a", "b"])],
            vec![],
        )
        .unwrap();
        assert_eq!(label_density(&d).unwrap(), 1.5);
        let d = Dataset::new(
            "d",
            vec![LabeledExample::new("x", ["a"])],
            vec![LabeledExample::new("y", ["b"])],
        )
        .unwrap();
        assert_eq!(label_density(&d).unwrap(), 1.0);
    }
}
