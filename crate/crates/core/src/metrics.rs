//! Task and concept accuracy / macro-F1.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub task_accuracy: f64,
    pub task_f1: f64,
    pub concept_accuracy: f64,
    pub concept_f1: f64,
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class with no
/// true positives (including one absent from both sides) scores 0.
pub fn macro_f1(pred: &[usize], gold: &[usize], num_classes: usize) -> f64 {
    assert_eq!(pred.len(), gold.len());
    if num_classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gold_count = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        pred_count[p] += 1;
        gold_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = pred_count[c] + gold_count[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / num_classes as f64
}

/// Predictions and labels collected over a split.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub grade_pred: Vec<usize>,
    pub grade_gold: Vec<usize>,
    /// `[instance][concept]`
    pub concept_pred: Vec<Vec<usize>>,
    pub concept_gold: Vec<Vec<usize>>,
}

impl PredictionSet {
    pub fn task_metrics(&self, num_grades: usize) -> (f64, f64) {
        (
            accuracy(&self.grade_pred, &self.grade_gold),
            macro_f1(&self.grade_pred, &self.grade_gold, num_grades),
        )
    }

    /// Mean over concepts of per-concept accuracy and per-concept macro-F1.
    pub fn concept_metrics(&self, num_levels: usize) -> (f64, f64) {
        let k = self.concept_gold.first().map_or(0, Vec::len);
        if k == 0 {
            return (0.0, 0.0);
        }
        let (mut acc, mut f1) = (0.0, 0.0);
        for c in 0..k {
            let p: Vec<usize> = self.concept_pred.iter().map(|v| v[c]).collect();
            let g: Vec<usize> = self.concept_gold.iter().map(|v| v[c]).collect();
            acc += accuracy(&p, &g);
            f1 += macro_f1(&p, &g, num_levels);
        }
        (acc / k as f64, f1 / k as f64)
    }

    pub fn metrics(&self, num_grades: usize, num_levels: usize) -> Metrics {
        let (task_accuracy, task_f1) = self.task_metrics(num_grades);
        let (concept_accuracy, concept_f1) = self.concept_metrics(num_levels);
        Metrics {
            task_accuracy,
            task_f1,
            concept_accuracy,
            concept_f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        assert_eq!(accuracy(&y, &y), 1.0);
        assert_eq!(macro_f1(&y, &y, 3), 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_binary() {
        // class 0: P = 1/2, R = 1, F1 = 2/3; class 1: F1 = 0.
        let gold = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        assert_eq!(accuracy(&pred, &gold), 0.5);
        assert!((macro_f1(&pred, &gold, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_count_as_zero() {
        let y = [0, 0];
        assert_eq!(macro_f1(&y, &y, 4), 0.25);
    }

    #[test]
    fn single_instance_split() {
        let set = PredictionSet {
            grade_pred: vec![1],
            grade_gold: vec![2],
            concept_pred: vec![vec![1, 0]],
            concept_gold: vec![vec![1, 1]],
        };
        let m = set.metrics(3, 2);
        assert_eq!(m.task_accuracy, 0.0);
        assert_eq!(m.concept_accuracy, 0.5);
    }
}
