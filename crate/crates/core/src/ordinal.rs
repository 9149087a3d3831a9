//! Within-batch ordinal pairwise calibration with a Bradley–Terry style
//! logistic ranking loss over expected concept scores.

use crate::tensor::Matrix;

/// Per concept, the ordered pairs `(i, j)` with `c_k^{(i)} > c_k^{(j)}`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSet {
    pub per_concept: Vec<Vec<(usize, usize)>>,
}

impl PairSet {
    /// Number of concepts with at least one pair.
    pub fn active_concepts(&self) -> usize {
        self.per_concept.iter().filter(|p| !p.is_empty()).count()
    }
}

/// Enumerates all strictly ordered pairs per concept, `i` ascending then `j`.
/// `batch_labels[i][k]` is the level of concept `k` for batch item `i`.
pub fn build_pairs(batch_labels: &[Vec<usize>]) -> PairSet {
    let k = batch_labels.first().map_or(0, Vec::len);
    let per_concept = (0..k)
        .map(|c| {
            let mut pairs = Vec::new();
            for (i, li) in batch_labels.iter().enumerate() {
                for (j, lj) in batch_labels.iter().enumerate() {
                    if li[c] > lj[c] {
                        pairs.push((i, j));
                    }
                }
            }
            pairs
        })
        .collect();
    PairSet { per_concept }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over active concepts of the per-concept mean `−log σ(ĉ_i − ĉ_j)`.
/// `scores` is `B×K`. Returns the loss and `∂L/∂scores`; with no active
/// concept both are zero.
pub fn ranking_loss(scores: &Matrix, pairs: &PairSet) -> (f64, Matrix) {
    let (b, k) = scores.shape();
    let mut grad = Matrix::zeros(b, k);
    let active = pairs.active_concepts();
    if active == 0 {
        return (0.0, grad);
    }
    let norm_k = 1.0 / active as f64;
    let mut loss = 0.0;
    for (c, list) in pairs.per_concept.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let weight = norm_k / list.len() as f64;
        for &(i, j) in list {
            let margin = scores[(i, c)] - scores[(j, c)];
            loss -= weight * log_sigmoid(margin);
            let g = weight * (1.0 - sigmoid(margin));
            grad[(i, c)] -= g;
            grad[(j, c)] += g;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(labels: &[usize]) -> Vec<Vec<usize>> {
        labels.iter().map(|&l| vec![l]).collect()
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(build_pairs(&col(&[2, 0])).per_concept[0], vec![(0, 1)]);
        assert!(build_pairs(&col(&[1, 1, 1])).per_concept[0].is_empty());
        assert_eq!(
            build_pairs(&col(&[0, 1, 2])).per_concept[0],
            vec![(1, 0), (2, 0), (2, 1)]
        );
        assert_eq!(build_pairs(&[]).per_concept.len(), 0);
    }

    #[test]
    fn closed_forms() {
        let pairs = build_pairs(&col(&[1, 0]));
        let (l, _) = ranking_loss(&Matrix::from_rows(&[vec![0.7], vec![0.7]]), &pairs);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, g) = ranking_loss(&Matrix::from_rows(&[vec![3.5], vec![0.5]]), &pairs);
        assert!((l - (1.0 + (-3f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.048587).abs() < 1e-6);
        assert_eq!(g[(0, 0)], -g[(1, 0)]);
    }

    #[test]
    fn empty_pairs_give_zero() {
        let pairs = build_pairs(&[vec![1, 2], vec![1, 2]]);
        let (l, g) = ranking_loss(
            &Matrix::from_rows(&[vec![0.1, 2.0], vec![3.0, 0.0]]),
            &pairs,
        );
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn large_negative_margin_is_finite() {
        let pairs = build_pairs(&col(&[1, 0]));
        let (l, g) = ranking_loss(&Matrix::from_rows(&[vec![-800.0], vec![0.0]]), &pairs);
        assert!((l - 800.0).abs() < 1e-9);
        assert!((g[(0, 0)] + 1.0).abs() < 1e-12);
    }
}
