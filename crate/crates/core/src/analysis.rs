//! Analyses of a frozen, fully trained model: concept interventions,
//! per-instance decision traces and the denoising report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::partial_correlations;
use crate::metrics::{accuracy, macro_f1, Metrics, PredictionSet};
use crate::model::Model;
use crate::rubric::{Dataset, GradingInstance};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    None,
    Oracle,
    Wrong,
    Random,
}

impl std::str::FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "oracle" => Ok(Self::Oracle),
            "wrong" => Ok(Self::Wrong),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
        }
    }
}

/// How the `wrong` policy picks its substitute level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongRule {
    /// Level farthest from the label (ties to the lower level).
    #[default]
    Farthest,
    /// Greedily, the level that minimizes the head's probability of the
    /// labeled grade. Experimental alternative reading of "most damaging".
    GradeMinimizing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub kind: InterventionKind,
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub wrong_rule: WrongRule,
}

impl InterventionPolicy {
    pub fn new(kind: InterventionKind, k: usize) -> Self {
        Self {
            kind,
            k,
            seed: 0,
            wrong_rule: WrongRule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub task_accuracy: f64,
    pub task_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub policy: InterventionPolicy,
    /// Metrics with the policy applied at `policy.k`.
    pub metrics: Metrics,
    /// Task metrics for every `k` in `0..=K`.
    pub curve: Vec<CurvePoint>,
}

/// Concept indices ordered by descending confidence; ties keep the lower index.
pub fn confidence_order(confidence: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order
}

/// `argmax_m |m − label|`, ties to the lower level.
pub fn farthest_level(label: usize, max_level: usize) -> usize {
    if max_level - label > label {
        max_level
    } else {
        0
    }
}

struct InstanceState {
    observed: Vec<f64>,
    order: Vec<usize>,
    labels: Vec<usize>,
    grade: usize,
    random_levels: Vec<usize>,
}

/// Substituted `s̃` vectors for `k = 0..=K`, nested by construction.
fn substitution_path(
    model: &Model,
    state: &InstanceState,
    policy: &InterventionPolicy,
) -> Result<Vec<Vec<f64>>> {
    let m = model.spec.max_concept_level;
    let mf = m as f64;
    let mut current = state.observed.clone();
    let mut path = vec![current.clone()];
    for &c in &state.order {
        let value = match policy.kind {
            InterventionKind::None => current[c],
            InterventionKind::Oracle => state.labels[c] as f64 / mf,
            InterventionKind::Random => state.random_levels[c] as f64 / mf,
            InterventionKind::Wrong => match policy.wrong_rule {
                WrongRule::Farthest => farthest_level(state.labels[c], m) as f64 / mf,
                WrongRule::GradeMinimizing => {
                    let mut best = (f64::INFINITY, 0.0);
                    for level in 0..=m {
                        let mut trial = current.clone();
                        trial[c] = level as f64 / mf;
                        let p = model.grade_from_observed(&trial)?.probs[state.grade];
                        if p < best.0 {
                            best = (p, trial[c]);
                        }
                    }
                    best.1
                }
            },
        };
        current[c] = value;
        path.push(current.clone());
    }
    Ok(path)
}

/// Substitution path of one instance: `observed[k]` is `s̃` with the top-`k`
/// most confident concepts replaced, `grades[k]` the frozen head's grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceIntervention {
    pub order: Vec<usize>,
    pub observed: Vec<Vec<f64>>,
    pub grades: Vec<usize>,
}

/// Runs `policy` on one instance for every `k = 0..=K`. `index` is the
/// instance's position in its split and seeds the random policy.
pub fn intervene_instance(
    model: &Model,
    inst: &GradingInstance,
    index: usize,
    policy: &InterventionPolicy,
) -> Result<InstanceIntervention> {
    model.latent()?;
    let k_total = model.spec.num_concepts;
    let m = model.spec.max_concept_level;
    let (_, fwd) = model.concepts(inst)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(policy.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let state = InstanceState {
        observed: model.normalize(&fwd.expected),
        order: confidence_order(&fwd.confidence()),
        labels: inst.concept_labels.clone(),
        grade: inst.grade,
        random_levels: (0..k_total).map(|_| rng.random_range(0..=m)).collect(),
    };
    let observed = substitution_path(model, &state, policy)?;
    let grades = observed
        .iter()
        .map(|s| Ok(model.grade_from_observed(s)?.predicted_grade()))
        .collect::<Result<_>>()?;
    Ok(InstanceIntervention {
        order: state.order,
        observed,
        grades,
    })
}

/// Replaces `s̃` for the top-`k` most confident concepts of every instance
/// according to `policy`, re-runs the frozen grade head and reports task
/// metrics per `k`.
pub fn intervene_and_score(
    split: &Dataset,
    model: &Model,
    policy: InterventionPolicy,
) -> Result<InterventionCurve> {
    let k_total = model.spec.num_concepts;
    if policy.k > k_total {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the number of concepts {k_total}",
            policy.k
        )));
    }
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    model.latent()?;
    let mut per_k_pred: Vec<Vec<usize>> = vec![Vec::with_capacity(split.len()); k_total + 1];
    let mut set = PredictionSet::default();
    for (idx, inst) in split.instances.iter().enumerate() {
        let path = intervene_instance(model, inst, idx, &policy)?;
        for (k, g) in path.grades.into_iter().enumerate() {
            per_k_pred[k].push(g);
        }
        let (_, fwd) = model.concepts(inst)?;
        set.concept_pred.push(fwd.levels);
        set.concept_gold.push(inst.concept_labels.clone());
        set.grade_gold.push(inst.grade);
    }
    let grades = model.spec.num_grades();
    let curve: Vec<CurvePoint> = per_k_pred
        .iter()
        .enumerate()
        .map(|(k, pred)| CurvePoint {
            k,
            task_accuracy: accuracy(pred, &set.grade_gold),
            task_f1: macro_f1(pred, &set.grade_gold, grades),
        })
        .collect();
    set.grade_pred = per_k_pred.swap_remove(policy.k);
    Ok(InterventionCurve {
        policy,
        metrics: set.metrics(grades, model.spec.num_levels()),
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendedToken {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrace {
    pub index: usize,
    pub name: String,
    pub top_tokens: Vec<AttendedToken>,
    /// Full attention row over `tokens`.
    pub attention: Vec<f64>,
    pub level: usize,
    pub level_probs: Vec<f64>,
    pub confidence: f64,
    pub expected_score: f64,
    pub observed: f64,
    pub posterior_mean: f64,
    /// `W_{ŷ,k} · μ_post,k` for the predicted grade `ŷ`.
    pub contribution: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Per-instance audit record linking token evidence, concept scores, the
/// posterior correction and the additive decomposition of the grade logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub id: String,
    pub tokens: Vec<String>,
    pub concepts: Vec<ConceptTrace>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_grade: usize,
    /// `b_ŷ`
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl DecisionTrace {
    /// `|Σ_k contribution_k + b_ŷ − logit_ŷ|`
    pub fn decomposition_residual(&self) -> f64 {
        let sum: f64 = self.concepts.iter().map(|c| c.contribution).sum();
        (sum + self.bias - self.logits[self.predicted_grade]).abs()
    }
}

pub fn build_trace(
    inst: &GradingInstance,
    model: &Model,
    top_n_tokens: usize,
) -> Result<DecisionTrace> {
    trace_with_labels(
        model,
        inst,
        Some((inst.concept_labels.as_slice(), inst.grade)),
        top_n_tokens,
    )
}

/// Trace for an instance whose labels may be unknown (ad-hoc input).
pub fn trace_with_labels(
    model: &Model,
    inst: &GradingInstance,
    labels: Option<(&[usize], usize)>,
    top_n_tokens: usize,
) -> Result<DecisionTrace> {
    let pred = model.predict(inst)?;
    let latent = model.latent()?;
    let grade = pred.posterior.predicted_grade();
    let confidence = pred.concepts.confidence();
    let tokens = pred.embedded.tokens.clone();
    let concepts = (0..model.spec.num_concepts)
        .map(|k| {
            let attention = pred.concepts.attention.row(k).to_vec();
            let mut order: Vec<usize> = (0..attention.len()).collect();
            order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
            let top_tokens = order
                .into_iter()
                .take(top_n_tokens)
                .map(|t| AttendedToken {
                    position: t,
                    token: tokens[t].clone(),
                    weight: attention[t],
                })
                .collect();
            let mean = pred.posterior.mean[k];
            ConceptTrace {
                index: k,
                name: model.spec.concept_names[k].clone(),
                top_tokens,
                attention,
                level: pred.concepts.levels[k],
                level_probs: pred.concepts.probs.row(k).to_vec(),
                confidence: confidence[k],
                expected_score: pred.concepts.expected[k],
                observed: pred.observed[k],
                posterior_mean: mean,
                contribution: latent.task_weights[(grade, k)] * mean,
                label: labels.map(|(c, _)| c[k]),
            }
        })
        .collect();
    Ok(DecisionTrace {
        id: inst.id.clone(),
        tokens,
        concepts,
        logits: pred.posterior.logits.clone(),
        probabilities: pred.posterior.probs.clone(),
        predicted_grade: grade,
        bias: latent.task_bias[grade],
        label: labels.map(|(_, g)| g),
    })
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mean_abs_off_diagonal(m: &Matrix) -> f64 {
    let k = m.rows();
    if k < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += m[(i, j)].abs();
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

fn fraction_below(m: &Matrix, threshold: f64) -> f64 {
    let k = m.rows();
    if k < 2 {
        return 0.0;
    }
    let mut count = 0usize;
    for i in 0..k {
        for j in 0..k {
            if i != j && m[(i, j)].abs() < threshold {
                count += 1;
            }
        }
    }
    count as f64 / (k * (k - 1)) as f64
}

/// Pearson correlation of integer concept labels. Zero-variance concepts get
/// a zero row/column with unit diagonal and are listed in the second return.
pub fn label_correlation(split: &Dataset) -> (Matrix, Vec<usize>) {
    let k = split.spec.num_concepts;
    let n = split.len() as f64;
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            split
                .instances
                .iter()
                .map(|i| i.concept_labels[c] as f64)
                .collect()
        })
        .collect();
    let means: Vec<f64> = cols.iter().map(|v| v.iter().sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .zip(&means)
        .map(|(v, m)| v.iter().map(|x| x - m).collect())
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let degenerate: Vec<usize> = (0..k).filter(|&c| norms[c] == 0.0).collect();
    let corr = Matrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            crate::tensor::dot(&centered[i], &centered[j]) / (norms[i] * norms[j])
        }
    });
    (corr, degenerate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingReport {
    pub concept_names: Vec<String>,
    pub empirical: Vec<Vec<f64>>,
    pub partial: Vec<Vec<f64>>,
    pub zero_variance_concepts: Vec<usize>,
    pub mean_abs_empirical: f64,
    pub mean_abs_partial: f64,
    pub fraction_partial_below_0_1: f64,
    pub fraction_empirical_below_0_1: f64,
}

/// Empirical label correlation of `split` next to the partial correlations
/// implied by the learned precision matrix.
pub fn denoising_report(model: &Model, split: &Dataset) -> Result<DenoisingReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let (empirical, zero_variance_concepts) = label_correlation(split);
    let partial = partial_correlations(model.latent()?);
    Ok(DenoisingReport {
        concept_names: model.spec.concept_names.clone(),
        mean_abs_empirical: mean_abs_off_diagonal(&empirical),
        mean_abs_partial: mean_abs_off_diagonal(&partial),
        fraction_partial_below_0_1: fraction_below(&partial, 0.1),
        fraction_empirical_below_0_1: fraction_below(&empirical, 0.1),
        empirical: to_rows(&empirical),
        partial: to_rows(&partial),
        zero_variance_concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rubric::RubricSpec;

    #[test]
    fn farthest_level_rule() {
        assert_eq!(farthest_level(0, 3), 3);
        assert_eq!(farthest_level(3, 3), 0);
        assert_eq!(farthest_level(1, 3), 3);
        assert_eq!(farthest_level(2, 3), 0);
        // equidistant: lower level wins
        assert_eq!(farthest_level(1, 2), 0);
    }

    #[test]
    fn confidence_order_breaks_ties_low() {
        assert_eq!(confidence_order(&[0.5, 0.9, 0.5, 0.7]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn label_correlation_identical_and_constant() {
        let spec = RubricSpec::with_default_names(3, 2, 2).unwrap();
        let inst = |id: &str, c: Vec<usize>| GradingInstance {
            id: id.into(),
            question: "q".into(),
            response: "r".into(),
            context: None,
            concept_labels: c,
            grade: 0,
        };
        let ds = Dataset::new(
            spec,
            vec![
                inst("a", vec![0, 0, 1]),
                inst("b", vec![2, 2, 1]),
                inst("c", vec![1, 1, 1]),
            ],
        )
        .unwrap();
        let (corr, flagged) = label_correlation(&ds);
        assert!((corr[(0, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(corr[(0, 2)], 0.0);
        assert_eq!(corr[(2, 2)], 1.0);
        assert_eq!(flagged, vec![2]);
    }
}
