//! Two-stage optimization.
//!
//! Stage I fits the text encoder (toy table), query bank and concept
//! classifiers under `λ_c L_con + λ_r L_rank`, selecting the epoch with the
//! best dev concept macro-F1. Stage II freezes all of that, caches the
//! normalized concept scores, and fits `(L, η, W, b)` under
//! `λ_t L_task + λ_d L_den + λ_s L_spa`, selecting on dev task macro-F1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedded;
use crate::encoder::{
    concept_backward, concept_loss, expected_score_backward, ConceptForward, ConceptGrads,
    ConceptHead,
};
use crate::error::{Error, Result};
use crate::latent::{
    instance_backward, posterior, sparsity_backward, sparsity_penalty, HeadKind, LatentGrads,
    LatentHeadParams, StageTwoWeights, DEFAULT_EPSILON,
};
use crate::metrics::{macro_f1, PredictionSet};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig, LinearSchedule};
use crate::ordinal::{build_pairs, ranking_loss};
use crate::rubric::Dataset;
use crate::tensor::{argmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub temperature: f64,
    pub lambda_concept: f64,
    pub lambda_rank: f64,
    pub lambda_task: f64,
    pub lambda_denoise: f64,
    pub lambda_sparsity: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub patience: usize,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub head: HeadKind,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_lr: 1e-4,
            stage2_lr: 5e-3,
            temperature: 1.0,
            lambda_concept: 1.0,
            lambda_rank: 0.4,
            lambda_task: 1.0,
            lambda_denoise: 0.1,
            lambda_sparsity: 0.005,
            batch_size: 8,
            stage1_epochs: 50,
            stage2_epochs: 50,
            patience: 3,
            warmup_ratio: 0.1,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            head: HeadKind::Latent,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the Stage-II learning rate retuned for the synthetic
    /// corpus; everything else is unchanged.
    pub fn synthetic() -> Self {
        Self {
            stage2_lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.stage2_lr),
            ("temperature", self.temperature),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        let non_negative = [
            ("lambda_concept", self.lambda_concept),
            ("lambda_rank", self.lambda_rank),
            ("lambda_task", self.lambda_task),
            ("lambda_denoise", self.lambda_denoise),
            ("lambda_sparsity", self.lambda_sparsity),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidArgument(format!(
                "warmup_ratio must be in [0, 1], got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    pub fn stage_two_weights(&self) -> StageTwoWeights {
        StageTwoWeights {
            task: self.lambda_task,
            denoise: self.lambda_denoise,
            sparsity: self.lambda_sparsity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DevMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_f1: Option<f64>,
    /// Mean dev cross-entropy of the stage's head; breaks ties in selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

/// Higher selection metric wins; equal metrics fall back to lower dev loss,
/// so a saturated metric does not pin the snapshot to its first epoch.
fn improves(candidate: (f64, f64), best: (f64, f64)) -> bool {
    candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: DevMetrics,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

fn epoch_seed(seed: u64, stage: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = seed
        .wrapping_add(stage.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn shuffled_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_same_spec(model: &Model, data: &Dataset, name: &str) -> Result<()> {
    if data.spec != model.spec {
        return Err(Error::InvalidArgument(format!(
            "{name} split uses a different rubric spec"
        )));
    }
    Ok(())
}

/// Stage-I objective on one batch: returns the loss and accumulated
/// gradients. `instances` pairs each embedded input with its labels.
pub fn stage1_batch_loss(
    head: &ConceptHead,
    batch: &[(Embedded, Vec<usize>)],
    lambda_concept: f64,
    lambda_rank: f64,
) -> Result<(f64, ConceptGrads)> {
    let b = batch.len();
    let k = head.num_concepts();
    let mut forwards: Vec<ConceptForward> = Vec::with_capacity(b);
    for (emb, _) in batch {
        forwards.push(head.forward(emb)?);
    }
    let mut loss = 0.0;
    let mut grad_logits = Vec::with_capacity(b);
    for (fwd, (_, labels)) in forwards.iter().zip(batch) {
        let (l, mut g) = concept_loss(fwd, labels)?;
        loss += lambda_concept * l / b as f64;
        g.as_mut_slice()
            .iter_mut()
            .for_each(|x| *x *= lambda_concept / b as f64);
        grad_logits.push(g);
    }
    if lambda_rank > 0.0 {
        let labels: Vec<Vec<usize>> = batch.iter().map(|(_, l)| l.clone()).collect();
        let pairs = build_pairs(&labels);
        let scores = Matrix::from_fn(b, k, |i, c| forwards[i].expected[c]);
        let (l, d_scores) = ranking_loss(&scores, &pairs);
        loss += lambda_rank * l;
        for (i, fwd) in forwards.iter().enumerate() {
            let d_expected: Vec<f64> = d_scores.row(i).iter().map(|g| lambda_rank * g).collect();
            expected_score_backward(fwd, &d_expected, &mut grad_logits[i]);
        }
    }
    let mut grads = ConceptGrads::zeros_like(head);
    for ((fwd, (emb, _)), g) in forwards.iter().zip(batch).zip(&grad_logits) {
        concept_backward(emb, fwd, &head.bank, &head.classifiers, g, &mut grads);
    }
    Ok((loss, grads))
}

fn concept_dev_metrics(model: &Model, dev: &Dataset) -> Result<DevMetrics> {
    let mut set = PredictionSet::default();
    let mut loss = 0.0;
    for inst in &dev.instances {
        let (_, fwd) = model.concepts(inst)?;
        loss += concept_loss(&fwd, &inst.concept_labels)?.0;
        set.concept_pred.push(fwd.levels);
        set.concept_gold.push(inst.concept_labels.clone());
    }
    let (acc, f1) = set.concept_metrics(model.spec.num_levels());
    Ok(DevMetrics {
        concept_accuracy: Some(acc),
        concept_f1: Some(f1),
        loss: Some(loss / dev.len() as f64),
        ..DevMetrics::default()
    })
}

/// Runs Stage I in place on `model.concept`, keeping the best dev epoch.
pub fn train_stage1(model: &mut Model, train: &Dataset, dev: &Dataset) -> Result<Vec<EpochLog>> {
    check_same_spec(model, train, "train")?;
    check_same_spec(model, dev, "dev")?;
    if model.latent.is_some() {
        return Err(Error::InvalidArgument(
            "Stage I must run before a latent head exists".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let cfg = model.config.clone();
    let tokens: Vec<Vec<String>> = train
        .instances
        .iter()
        .map(|inst| model.tokens(inst))
        .collect::<Result<_>>()?;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(
        cfg.stage1_lr,
        cfg.stage1_epochs * batches_per_epoch,
        cfg.warmup_ratio,
    );
    let mut adam = Adam::new(cfg.adam);
    let mut step = 0usize;
    let mut best: Option<((f64, f64), ConceptHead)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 0..cfg.stage1_epochs {
        let batches = shuffled_batches(
            train.len(),
            cfg.batch_size,
            epoch_seed(cfg.seed, 1, epoch as u64),
        );
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (batch_idx, idx) in batches.iter().enumerate() {
            let batch: Vec<(Embedded, Vec<usize>)> = idx
                .iter()
                .map(|&i| {
                    let inst = &train.instances[i];
                    Ok((
                        model.concept.encoder.embed(&inst.id, &tokens[i])?,
                        inst.concept_labels.clone(),
                    ))
                })
                .collect::<Result<_>>()?;
            let (loss, grads) =
                stage1_batch_loss(&model.concept, &batch, cfg.lambda_concept, cfg.lambda_rank)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "stage1",
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss * idx.len() as f64;
            lr = schedule.lr(step);
            adam.step(lr, model.concept.param_slices_mut(), grads.slices());
            step += 1;
        }
        let dev_metrics = if dev.is_empty() {
            DevMetrics::default()
        } else {
            concept_dev_metrics(model, dev)?
        };
        let score = match (dev_metrics.concept_f1, dev_metrics.loss) {
            (Some(f1), Some(loss)) => (f1, loss),
            _ => (0.0, epoch_loss),
        };
        log.push(EpochLog {
            stage: 1,
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev: dev_metrics,
            lr,
        });
        log::debug!(
            "stage1 epoch {epoch}: loss {:.4} dev {:?}",
            epoch_loss / train.len() as f64,
            dev_metrics
        );
        if best.as_ref().is_none_or(|(s, _)| improves(score, *s)) {
            best = Some((score, model.concept.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, head)) = best {
        model.concept = head;
    }
    Ok(log)
}

/// Frozen Stage-I readout for a split: `(s̃, grade, c̃)` per instance, plus
/// the argmax concept levels.
pub struct FrozenConcepts {
    pub observed: Vec<Vec<f64>>,
    pub grades: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

pub fn freeze_concepts(model: &Model, data: &Dataset) -> Result<FrozenConcepts> {
    let mut out = FrozenConcepts {
        observed: Vec::with_capacity(data.len()),
        grades: Vec::with_capacity(data.len()),
        targets: Vec::with_capacity(data.len()),
    };
    for inst in &data.instances {
        let (_, fwd) = model.concepts(inst)?;
        out.observed.push(model.normalize(&fwd.expected));
        out.grades.push(inst.grade);
        out.targets.push(inst.normalized_labels(&model.spec));
    }
    Ok(out)
}

/// Stage-II objective on one batch (mean over instances plus one sparsity
/// term) and its gradient.
pub fn stage2_batch_loss(
    params: &LatentHeadParams,
    data: &FrozenConcepts,
    idx: &[usize],
    weights: StageTwoWeights,
) -> Result<(f64, LatentGrads)> {
    let mut grads = LatentGrads::zeros_like(params);
    let scale = 1.0 / idx.len() as f64;
    let mut loss = 0.0;
    for &i in idx {
        let result = posterior(&data.observed[i], params)?;
        let (task, den) = instance_backward(
            &result,
            data.grades[i],
            &data.targets[i],
            params,
            weights,
            scale,
            &mut grads,
        )?;
        loss += scale * (weights.task * task + weights.denoise * den);
    }
    if params.kind == HeadKind::Latent && weights.sparsity > 0.0 {
        loss += weights.sparsity * sparsity_penalty(params);
        sparsity_backward(params, weights.sparsity, &mut grads);
    }
    Ok((loss, grads))
}

/// Dev `(T-Acc, T-F1, mean task cross-entropy)` of a latent head.
fn task_dev_metrics(
    params: &LatentHeadParams,
    data: &FrozenConcepts,
    num_grades: usize,
) -> Result<(f64, f64, f64)> {
    let mut pred = Vec::with_capacity(data.grades.len());
    let mut loss = 0.0;
    for (s, &g) in data.observed.iter().zip(&data.grades) {
        let probs = posterior(s, params)?.probs;
        loss -= probs[g].max(crate::encoder::LOG_FLOOR).ln();
        pred.push(argmax(&probs));
    }
    Ok((
        crate::metrics::accuracy(&pred, &data.grades),
        macro_f1(&pred, &data.grades, num_grades),
        loss / data.grades.len().max(1) as f64,
    ))
}

/// Stage II. `observer` sees the latent parameters after every optimizer step.
pub fn train_stage2_with_observer(
    model: &mut Model,
    train: &Dataset,
    dev: &Dataset,
    observer: &mut dyn FnMut(&LatentHeadParams),
) -> Result<Vec<EpochLog>> {
    check_same_spec(model, train, "train")?;
    check_same_spec(model, dev, "dev")?;
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let cfg = model.config.clone();
    let weights = cfg.stage_two_weights();
    let frozen_train = freeze_concepts(model, train)?;
    let frozen_dev = freeze_concepts(model, dev)?;
    let num_grades = model.spec.num_grades();
    let mut params =
        LatentHeadParams::init(model.spec.num_concepts, num_grades, cfg.epsilon, cfg.head);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(
        cfg.stage2_lr,
        cfg.stage2_epochs * batches_per_epoch,
        cfg.warmup_ratio,
    );
    let mut adam = Adam::new(cfg.adam);
    let mut step = 0usize;
    let mut best: Option<((f64, f64), LatentHeadParams)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 0..cfg.stage2_epochs {
        let batches = shuffled_batches(
            train.len(),
            cfg.batch_size,
            epoch_seed(cfg.seed, 2, epoch as u64),
        );
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (batch_idx, idx) in batches.iter().enumerate() {
            let (loss, grads) = stage2_batch_loss(&params, &frozen_train, idx, weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "stage2",
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss * idx.len() as f64;
            lr = schedule.lr(step);
            adam.step(lr, params.param_slices_mut(), grads.slices());
            step += 1;
            observer(&params);
        }
        let dev_metrics = if dev.is_empty() {
            DevMetrics::default()
        } else {
            let (acc, f1, loss) = task_dev_metrics(&params, &frozen_dev, num_grades)?;
            DevMetrics {
                task_accuracy: Some(acc),
                task_f1: Some(f1),
                loss: Some(loss),
                ..DevMetrics::default()
            }
        };
        let score = match (dev_metrics.task_f1, dev_metrics.loss) {
            (Some(f1), Some(loss)) => (f1, loss),
            _ => (0.0, epoch_loss),
        };
        log.push(EpochLog {
            stage: 2,
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev: dev_metrics,
            lr,
        });
        if best.as_ref().is_none_or(|(s, _)| improves(score, *s)) {
            best = Some((score, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.latent = best.map(|(_, p)| p).or(Some(params));
    Ok(log)
}

pub fn train_stage2(model: &mut Model, train: &Dataset, dev: &Dataset) -> Result<Vec<EpochLog>> {
    train_stage2_with_observer(model, train, dev, &mut |_| {})
}

/// Both stages in order; the log of each is appended to `model.log`.
pub fn train_model(model: &mut Model, train: &Dataset, dev: &Dataset) -> Result<()> {
    let log1 = train_stage1(model, train, dev)?;
    model.log.extend(log1);
    let log2 = train_stage2(model, train, dev)?;
    model.log.extend(log2);
    Ok(())
}
