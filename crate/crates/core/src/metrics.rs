//! Evaluation primitives shared by the sequence labeler, the outcome
//! classifier and the case predictor.
//!
//! Ratios with a zero denominator are reported as `0.0` and carry a
//! `by_convention` flag so reports can tell "no signal" apart from "scored
//! zero".

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty list of scores")]
    Empty,
    #[error("confusion matrix has no evaluated items")]
    NoItems,
    #[error("label {0} is not one of the matrix classes")]
    UnknownClass(String),
}

/// Precision, recall and F1 for one class or one aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when at least one of the three values came from a 0/0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub by_convention: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> Prf {
    let (precision, p_conv) = ratio(tp, tp + fp);
    let (recall, r_conv) = ratio(tp, tp + fn_);
    let (f1, f_conv) =
        if precision + recall == 0.0 { (0.0, true) } else { (2.0 * precision * recall / (precision + recall), false) };
    Prf { precision, recall, f1, by_convention: p_conv || r_conv || f_conv }
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(per_class_f1: &[f64]) -> Result<f64, MetricsError> {
    if per_class_f1.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(per_class_f1.iter().sum::<f64>() / per_class_f1.len() as f64)
}

/// Square count matrix indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Self {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let n = classes.len();
        Self { classes, counts: vec![vec![0; n]; n] }
    }

    /// Builds a matrix from `(truth, prediction)` class indices.
    pub fn from_indices<S: Into<String>>(
        classes: impl IntoIterator<Item = S>,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.counts[t][p] += 1;
        }
        cm
    }

    pub fn add(&mut self, truth: &str, predicted: &str) -> Result<(), MetricsError> {
        let t = self.index_of(truth)?;
        let p = self.index_of(predicted)?;
        self.counts[t][p] += 1;
        Ok(())
    }

    fn index_of(&self, class: &str) -> Result<usize, MetricsError> {
        self.classes.iter().position(|c| c == class).ok_or_else(|| MetricsError::UnknownClass(class.to_string()))
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// One-vs-rest scores for class `k`.
    pub fn class_prf(&self, k: usize) -> Prf {
        let n = self.classes.len();
        let tp = self.counts[k][k];
        let fp = (0..n).filter(|&t| t != k).map(|t| self.counts[t][k]).sum();
        let fn_ = (0..n).filter(|&p| p != k).map(|p| self.counts[k][p]).sum();
        precision_recall_f1(tp, fp, fn_)
    }

    pub fn macro_f1(&self) -> Result<f64, MetricsError> {
        let f1s: Vec<f64> = (0..self.classes.len()).map(|k| self.class_prf(k).f1).collect();
        macro_f1(&f1s)
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::NoItems);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Accuracy and macro-F1 for a binary classifier, the pair the case and
/// sentence classifiers both report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryEval {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

pub fn binary_eval(truth: &[u8], predicted: &[u8]) -> Result<BinaryEval, MetricsError> {
    let cm =
        ConfusionMatrix::from_indices(["0", "1"], truth.iter().zip(predicted).map(|(&t, &p)| (t as usize, p as usize)));
    Ok(BinaryEval { accuracy: accuracy(&cm)?, macro_f1: cm.macro_f1()?, n: cm.total() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_counts() {
        let s = precision_recall_f1(10, 0, 0);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert!(!s.by_convention);
    }

    #[test]
    fn one_of_each() {
        let s = precision_recall_f1(1, 1, 1);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn all_zero_is_flagged() {
        let s = precision_recall_f1(0, 0, 0);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(s.by_convention);
    }

    #[test]
    fn macro_of_two() {
        assert_eq!(macro_f1(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(macro_f1(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn identity_matrix_accuracy() {
        let cm = ConfusionMatrix::from_indices(["a", "b", "c"], [(0, 0), (1, 1), (2, 2)]);
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
    }

    #[test]
    fn three_class_fixture() {
        // rows = truth: [5 1 0], [2 3 1], [0 0 4] -> trace 12 of 16
        let mut cm = ConfusionMatrix::new(["a", "b", "c"]);
        cm.counts = vec![vec![5, 1, 0], vec![2, 3, 1], vec![0, 0, 4]];
        assert_eq!(accuracy(&cm).unwrap(), 0.75);
        assert_eq!(cm.total(), 16);
    }

    #[test]
    fn unknown_class_rejected() {
        let mut cm = ConfusionMatrix::new(["a"]);
        assert!(cm.add("a", "z").is_err());
    }

    fn permute(cm: &ConfusionMatrix, perm: &[usize]) -> ConfusionMatrix {
        let n = perm.len();
        let mut out = ConfusionMatrix::new(perm.iter().map(|&i| cm.classes[i].clone()));
        for i in 0..n {
            for j in 0..n {
                out.counts[i][j] = cm.counts[perm[i]][perm[j]];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn metrics_bounded(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let s = precision_recall_f1(tp, fp, fn_);
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn permutation_invariance(
            counts in proptest::collection::vec(0usize..20, 9),
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            let mut cm = ConfusionMatrix::new(["a", "b", "c"]);
            for (k, c) in counts.iter().enumerate() {
                cm.counts[k / 3][k % 3] = *c;
            }
            prop_assume!(cm.total() > 0);
            let p = permute(&cm, &perm);
            prop_assert_eq!(accuracy(&cm).unwrap(), accuracy(&p).unwrap());
            let a = cm.macro_f1().unwrap();
            let b = p.macro_f1().unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
