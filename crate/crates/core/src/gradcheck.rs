//! Central finite-difference audit of every analytic gradient.
//!
//! The numerical side only evaluates loss values through the forward path;
//! it never touches the backward code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::{Embedded, TextEncoder, ToyEncoder};
use crate::encoder::{concept_loss, init_query_bank, ConceptClassifiers, ConceptHead};
use crate::error::Result;
use crate::latent::{posterior, stage2_losses, HeadKind, LatentHeadParams, StageTwoWeights};
use crate::ordinal::{build_pairs, ranking_loss};
use crate::tensor::Matrix;
use crate::train::stage1_batch_loss;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub seed: u64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` over each
/// parameter group exposed by `slices`. `skip` filters out entries where the
/// loss is not differentiable.
#[allow(clippy::needless_range_loop)]
fn audit<P: Clone>(
    params: &P,
    names: &[String],
    analytic: &[Vec<f64>],
    slices: impl Fn(&mut P) -> Vec<&mut [f64]>,
    loss: impl Fn(&P) -> Result<f64>,
    skip: impl Fn(usize, usize, &P) -> bool,
) -> Result<Vec<GroupCheck>> {
    let mut out = Vec::with_capacity(names.len());
    for (g, name) in names.iter().enumerate() {
        let mut probe = params.clone();
        let len = slices(&mut probe)[g].len();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in 0..len {
            if skip(g, i, params) {
                continue;
            }
            let base = slices(&mut probe)[g][i];
            slices(&mut probe)[g][i] = base + FD_STEP;
            let plus = loss(&probe)?;
            slices(&mut probe)[g][i] = base - FD_STEP;
            let minus = loss(&probe)?;
            slices(&mut probe)[g][i] = base;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[g][i], numeric));
            checked += 1;
        }
        out.push(GroupCheck {
            group: name.clone(),
            entries: checked,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn head_names(head: &ConceptHead) -> Vec<String> {
    let k = head.num_concepts();
    let mut names = vec!["queries".to_string()];
    names.extend((0..k).map(|c| format!("classifier.{c}.weight")));
    names.extend((0..k).map(|c| format!("classifier.{c}.bias")));
    if head.encoder.toy_table().is_some() {
        names.push("toy_table".into());
    }
    names
}

/// Small random Stage-I head with a toy encoder.
fn random_head(seed: u64, k: usize, levels: usize, d: usize, vocab: usize) -> Result<ConceptHead> {
    let mut head = ConceptHead {
        encoder: TextEncoder::Toy(ToyEncoder::new(vocab, d, seed)),
        bank: init_query_bank(k, d, 0.7, seed)?,
        classifiers: ConceptClassifiers::init(k, levels, d, seed + 1),
    };
    // Nonzero biases and a less symmetric query bank exercise more paths.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for b in head.classifiers.biases.iter_mut().flatten() {
        *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    for q in head.bank.queries.as_mut_slice() {
        *q += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(head)
}

fn random_batch(seed: u64, b: usize, k: usize, levels: usize) -> Vec<(Vec<String>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..b)
        .map(|_| {
            let t = rng.random_range(2..7);
            let tokens = (0..t)
                .map(|_| format!("w{}", rng.random_range(0..12)))
                .collect();
            let labels = (0..k).map(|_| rng.random_range(0..levels)).collect();
            (tokens, labels)
        })
        .collect()
}

fn embed_batch(
    head: &ConceptHead,
    raw: &[(Vec<String>, Vec<usize>)],
) -> Result<Vec<(Embedded, Vec<usize>)>> {
    raw.iter()
        .map(|(tokens, labels)| Ok((head.encoder.embed("", tokens)?, labels.clone())))
        .collect()
}

/// Value-only Stage-I objective for the numerical side.
fn stage1_value(
    head: &ConceptHead,
    raw: &[(Vec<String>, Vec<usize>)],
    lc: f64,
    lr: f64,
) -> Result<f64> {
    let batch = embed_batch(head, raw)?;
    let b = batch.len();
    let mut expected = Vec::with_capacity(b);
    let mut loss = 0.0;
    for (emb, labels) in &batch {
        let fwd = head.forward(emb)?;
        loss += lc * concept_loss(&fwd, labels)?.0 / b as f64;
        expected.push(fwd.expected);
    }
    if lr > 0.0 {
        let labels: Vec<Vec<usize>> = raw.iter().map(|(_, l)| l.clone()).collect();
        let scores = Matrix::from_rows(&expected);
        loss += lr * ranking_loss(&scores, &build_pairs(&labels)).0;
    }
    Ok(loss)
}

fn check_stage1(seed: u64, name: &str, b: usize, lc: f64, lr: f64) -> Result<GradCheckReport> {
    let (k, levels, d, vocab) = (3, 4, 6, 16);
    let head = random_head(seed, k, levels, d, vocab)?;
    let raw = random_batch(seed, b, k, levels);
    let batch = embed_batch(&head, &raw)?;
    let (_, grads) = stage1_batch_loss(&head, &batch, lc, lr)?;
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    let groups = audit(
        &head,
        &head_names(&head),
        &analytic,
        |h: &mut ConceptHead| h.param_slices_mut(),
        |h| stage1_value(h, &raw, lc, lr),
        |_, _, _| false,
    )?;
    Ok(GradCheckReport {
        loss: name.into(),
        seed,
        groups,
    })
}

/// `L_con` w.r.t. queries, classifiers and toy table on one random instance.
pub fn check_concept_loss(seed: u64) -> Result<GradCheckReport> {
    check_stage1(seed, "concept", 1, 1.0, 0.0)
}

/// `L_rank` alone, chained through expected scores into every Stage-I tensor.
pub fn check_ranking_loss(seed: u64) -> Result<GradCheckReport> {
    check_stage1(seed, "rank", 5, 0.0, 1.0)
}

/// The Stage-I objective `λ_c L_con + λ_r L_rank` at the default weights.
pub fn check_stage1_objective(seed: u64) -> Result<GradCheckReport> {
    check_stage1(seed, "stage1", 4, 1.0, 0.4)
}

/// `∂L_rank/∂ĉ` directly on a random score matrix.
pub fn check_ranking_scores(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, k) = (6, 3);
    let labels: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..k).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let scores = Matrix::from_fn(b, k, |_, _| rng.random_range(0.0..3.0));
    let pairs = build_pairs(&labels);
    let (_, grad) = ranking_loss(&scores, &pairs);
    let groups = audit(
        &scores,
        &["scores".to_string()],
        &[grad.as_slice().to_vec()],
        |s: &mut Matrix| vec![s.as_mut_slice()],
        |s| Ok(ranking_loss(s, &pairs).0),
        |_, _, _| false,
    )?;
    Ok(GradCheckReport {
        loss: "rank_scores".into(),
        seed,
        groups,
    })
}

/// Random valid latent head with dense lower-triangular `L`.
pub fn random_latent(seed: u64, k: usize, grades: usize) -> LatentHeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LatentHeadParams::init(k, grades, 1e-4, HeadKind::Latent);
    for i in 0..k {
        for j in 0..=i {
            let v: f64 = rng.sample(StandardNormal);
            p.cholesky[(i, j)] = if i == j { 0.5 + v.abs() } else { 0.5 * v };
        }
        p.log_variances[i] = rng.random_range(-1.5..1.0);
    }
    for w in p.task_weights.as_mut_slice() {
        *w = rng.sample(StandardNormal);
    }
    for b in p.task_bias.iter_mut() {
        *b = 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// Stage-II total loss w.r.t. `L`, `η`, `W`, `b` on a random `K = 4` instance.
pub fn check_stage2(seed: u64) -> Result<GradCheckReport> {
    let (k, grades, m) = (4, 5, 3);
    let params = random_latent(seed, k, grades);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let observed: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..=m)).collect();
    let grade = rng.random_range(0..grades);
    let weights = StageTwoWeights {
        task: 1.0,
        denoise: 0.7,
        sparsity: 0.05,
    };
    let result = posterior(&observed, &params)?;
    let (_, grads) = stage2_losses(&result, grade, &labels, m, &params, weights)?;
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    let names = ["cholesky", "log_variances", "task_weights", "task_bias"].map(String::from);
    let groups = audit(
        &params,
        &names,
        &analytic,
        |p: &mut LatentHeadParams| p.param_slices_mut(),
        |p| {
            let r = posterior(&observed, p)?;
            Ok(stage2_losses(&r, grade, &labels, m, p, weights)?.0.total)
        },
        // |L_ij| has a kink at 0; upper-triangle entries are structurally zero.
        |g, i, p| g == 0 && p.cholesky.as_slice()[i] == 0.0,
    )?;
    Ok(GradCheckReport {
        loss: "stage2".into(),
        seed,
        groups,
    })
}

/// Every audit for one seed.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_concept_loss(seed)?,
        check_ranking_loss(seed)?,
        check_stage1_objective(seed)?,
        check_ranking_scores(seed)?,
        check_stage2(seed)?,
    ])
}
