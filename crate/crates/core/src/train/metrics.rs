use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Confusion matrix (rows: true class, columns: predicted class) with the
/// accuracies derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    n_classes: usize,
    confusion: Vec<u64>,
    /// Fraction of correctly classified samples.
    pub overall_accuracy: f64,
    /// Recall of every class; `NaN` for a class with no samples.
    pub per_class_accuracy: Vec<f64>,
}

impl Metrics {
    /// Builds metrics from `(true, predicted)` class pairs.
    pub fn from_pairs(n_classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(invalid("metrics", "no samples to evaluate"));
        }
        let mut confusion = vec![0u64; n_classes * n_classes];
        for &(truth, pred) in pairs {
            if truth >= n_classes || pred >= n_classes {
                return Err(invalid("metrics", "class index out of range"));
            }
            confusion[truth * n_classes + pred] += 1;
        }
        Ok(Self::from_confusion(n_classes, confusion))
    }

    pub fn from_confusion(n_classes: usize, confusion: Vec<u64>) -> Self {
        assert_eq!(confusion.len(), n_classes * n_classes);
        let total: u64 = confusion.iter().sum();
        let trace: u64 = (0..n_classes).map(|c| confusion[c * n_classes + c]).sum();
        let per_class_accuracy = (0..n_classes)
            .map(|c| {
                let row: u64 = confusion[c * n_classes..(c + 1) * n_classes].iter().sum();
                if row == 0 {
                    f64::NAN
                } else {
                    confusion[c * n_classes + c] as f64 / row as f64
                }
            })
            .collect();
        let overall_accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        Self {
            n_classes,
            confusion,
            overall_accuracy,
            per_class_accuracy,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Count of samples of class `truth` predicted as `pred`.
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.confusion[truth * self.n_classes + pred]
    }

    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes).map(|c| self.count(c, c)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracies_follow_the_confusion_matrix() {
        let pairs = [(0, 0), (0, 1), (1, 1), (1, 1), (2, 0), (2, 2)];
        let m = Metrics::from_pairs(3, &pairs).unwrap();
        assert_eq!(m.total(), 6);
        assert_eq!(m.correct(), 4);
        assert_eq!(m.overall_accuracy, 4.0 / 6.0);
        assert_eq!(m.per_class_accuracy, vec![0.5, 1.0, 0.5]);
        for c in 0..3 {
            let row: u64 = (0..3).map(|p| m.count(c, p)).sum();
            assert_eq!(m.per_class_accuracy[c], m.count(c, c) as f64 / row as f64);
        }
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        assert!(Metrics::from_pairs(2, &[]).is_err());
        assert!(Metrics::from_pairs(2, &[(2, 0)]).is_err());
    }

    #[test]
    fn missing_class_is_nan() {
        let m = Metrics::from_pairs(3, &[(0, 0)]).unwrap();
        assert!(m.per_class_accuracy[1].is_nan());
        assert_eq!(m.overall_accuracy, 1.0);
    }
}
