use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Confusion matrix (rows: true class, columns: predicted) with WAR and UAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    /// Overall accuracy.
    pub war: f64,
    /// Mean per-class recall over classes with non-zero support.
    pub uar: f64,
    pub support: Vec<u64>,
    /// Classes left out of UAR because no test sample carries them.
    pub excluded_classes: Vec<usize>,
}

impl MetricsReport {
    /// # Panics
    /// If the slices differ in length or hold a class index `>= classes`.
    pub fn from_predictions(classes: usize, labels: &[usize], predictions: &[usize]) -> Self {
        assert_eq!(labels.len(), predictions.len());
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let total: u64 = support.iter().sum();
        let correct: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        let war = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        let recalls: Vec<f64> = (0..confusion.len())
            .filter(|&c| support[c] > 0)
            .map(|c| confusion[c][c] as f64 / support[c] as f64)
            .collect();
        let uar = if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        };
        let excluded_classes = (0..confusion.len()).filter(|&c| support[c] == 0).collect();
        MetricsReport {
            confusion,
            war,
            uar,
            support,
            excluded_classes,
        }
    }

    pub fn total(&self) -> u64 {
        self.support.iter().sum()
    }

    /// `key = value` text report.
    pub fn to_report(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        writeln!(s, "samples = {}", self.total()).unwrap();
        writeln!(s, "war = {:.6}", self.war).unwrap();
        writeln!(s, "uar = {:.6}", self.uar).unwrap();
        for (c, row) in self.confusion.iter().enumerate() {
            let name = class_names.get(c).map_or_else(|| c.to_string(), Clone::clone);
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(s, "confusion.{name} = {}", cells.join(",")).unwrap();
        }
        if !self.excluded_classes.is_empty() {
            let ex: Vec<String> = self.excluded_classes.iter().map(usize::to_string).collect();
            writeln!(s, "uar_excluded_classes = {}", ex.join(",")).unwrap();
        }
        s
    }
}

/// Per-fold reports and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFoldMetrics {
    pub folds: Vec<(usize, MetricsReport)>,
    pub mean_war: f64,
    pub mean_uar: f64,
}

impl CrossFoldMetrics {
    pub fn new(folds: Vec<(usize, MetricsReport)>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_war = folds.iter().map(|(_, m)| m.war).sum::<f64>() / n;
        let mean_uar = folds.iter().map(|(_, m)| m.uar).sum::<f64>() / n;
        CrossFoldMetrics {
            folds,
            mean_war,
            mean_uar,
        }
    }

    pub fn to_report(&self) -> String {
        let mut s = String::new();
        for (fold, m) in &self.folds {
            writeln!(s, "fold{fold}.war = {:.6}", m.war).unwrap();
            writeln!(s, "fold{fold}.uar = {:.6}", m.uar).unwrap();
        }
        writeln!(s, "mean.war = {:.6}", self.mean_war).unwrap();
        writeln!(s, "mean.uar = {:.6}", self.mean_uar).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        let m = MetricsReport::from_predictions(3, &y, &y);
        assert_eq!((m.war, m.uar), (1.0, 1.0));
    }

    #[test]
    fn constant_class_on_balanced_set() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = MetricsReport::from_predictions(4, &y, &[0; 40]);
        assert_eq!((m.war, m.uar), (0.25, 0.25));
    }

    #[test]
    fn zero_support_class_is_excluded() {
        let m = MetricsReport::from_predictions(3, &[0, 0, 1], &[0, 1, 1]);
        assert_eq!(m.excluded_classes, vec![2]);
        assert!((m.uar - 0.75).abs() < 1e-15);
        assert!(m.to_report(&[]).contains("uar_excluded_classes = 2"));
    }

    #[test]
    fn cross_fold_means() {
        let a = MetricsReport::from_predictions(2, &[0, 1], &[0, 1]);
        let b = MetricsReport::from_predictions(2, &[0, 1], &[0, 0]);
        let cf = CrossFoldMetrics::new(vec![(1, a), (2, b)]);
        assert_eq!(cf.mean_war, 0.75);
        assert_eq!(cf.mean_uar, 0.75);
    }
}
