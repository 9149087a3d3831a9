//! Rubric-aware concept encoder.
//!
//! Each concept `k` owns a query `q_k`. It attends over token states with
//! `α_{k,t} = softmax_t(q_kᵀ H_t / τ)`, pools `h_k = Σ_t α_{k,t} H_t`, and a
//! per-concept affine classifier maps `h_k` to a distribution over levels
//! `0..=M`. The expected level `ĉ_k = Σ_m m·p̂_{k,m}` feeds the ordinal
//! ranking loss and, normalized by `M`, the latent correction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::{Embedded, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::{argmax, axpy, dot, softmax, Matrix};

/// Guard for `log p` at the label.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptQueryBank {
    /// `K×d`, row `k` is `q_k`.
    pub queries: Matrix,
    pub temperature: f64,
}

/// Orthonormal query rows from the QR factorization of a seeded `d×K`
/// Gaussian matrix. Columns are sign-fixed so their first nonzero entry is
/// positive.
pub fn init_query_bank(
    k: usize,
    d: usize,
    temperature: f64,
    seed: u64,
) -> Result<ConceptQueryBank> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "query bank needs 1 <= K <= d, got K={k}, d={d}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = nalgebra::DMatrix::<f64>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    let q = gaussian.qr().q();
    let mut queries = Matrix::zeros(k, d);
    for col in 0..k {
        let sign = q
            .column(col)
            .iter()
            .find(|v| **v != 0.0)
            .map_or(1.0, |v| v.signum());
        for row in 0..d {
            queries[(col, row)] = sign * q[(row, col)];
        }
    }
    Ok(ConceptQueryBank {
        queries,
        temperature,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptClassifiers {
    /// Per concept, `(M+1)×d`.
    pub weights: Vec<Matrix>,
    /// Per concept, length `M+1`.
    pub biases: Vec<Vec<f64>>,
}

impl ConceptClassifiers {
    /// Weights drawn `N(0, 1/d)`, biases zero.
    pub fn init(k: usize, levels: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / d as f64).sqrt();
        let weights = (0..k)
            .map(|_| {
                Matrix::from_fn(levels, d, |_, _| {
                    scale * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        Self {
            weights,
            biases: vec![vec![0.0; levels]; k],
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.weights.len()
    }

    pub fn num_levels(&self) -> usize {
        self.biases.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptForward {
    /// `K×T`
    pub attention: Matrix,
    /// `K×d`
    pub pooled: Matrix,
    /// `K×(M+1)`
    pub probs: Matrix,
    pub expected: Vec<f64>,
    pub levels: Vec<usize>,
}

impl ConceptForward {
    /// `max_m p̂_{k,m}` per concept.
    pub fn confidence(&self) -> Vec<f64> {
        (0..self.probs.rows())
            .map(|k| {
                self.probs
                    .row(k)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

/// Attention pooling, concept classification and expected scores for one
/// embedded instance.
pub fn forward_concepts(
    h: &Matrix,
    bank: &ConceptQueryBank,
    clf: &ConceptClassifiers,
) -> Result<ConceptForward> {
    let (t_len, d) = h.shape();
    let k = bank.queries.rows();
    if bank.queries.cols() != d || clf.weights.iter().any(|w| w.cols() != d) {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {d} does not match concept head width {}",
            bank.queries.cols()
        )));
    }
    if clf.num_concepts() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} classifiers for {k} queries",
            clf.num_concepts()
        )));
    }
    if t_len == 0 {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    let levels = clf.num_levels();
    let mut attention = Matrix::zeros(k, t_len);
    let mut pooled = Matrix::zeros(k, d);
    let mut probs = Matrix::zeros(k, levels);
    let mut expected = Vec::with_capacity(k);
    let mut argmax_levels = Vec::with_capacity(k);
    let mut scores = vec![0.0; t_len];
    for c in 0..k {
        let q = bank.queries.row(c);
        for (t, s) in scores.iter_mut().enumerate() {
            *s = dot(q, h.row(t)) / bank.temperature;
        }
        let alpha = softmax(&scores);
        let pooled_row = pooled.row_mut(c);
        for (t, &a) in alpha.iter().enumerate() {
            axpy(a, h.row(t), pooled_row);
        }
        attention.row_mut(c).copy_from_slice(&alpha);

        let mut logits = clf.weights[c].matvec(pooled.row(c));
        for (z, b) in logits.iter_mut().zip(&clf.biases[c]) {
            *z += b;
        }
        let p = softmax(&logits);
        expected.push(p.iter().enumerate().map(|(m, pm)| m as f64 * pm).sum());
        argmax_levels.push(argmax(&p));
        probs.row_mut(c).copy_from_slice(&p);
    }
    if !(attention.is_finite() && pooled.is_finite() && probs.is_finite()) {
        return Err(Error::NonFinite(
            "concept forward pass (check temperature and parameter scale)".into(),
        ));
    }
    Ok(ConceptForward {
        attention,
        pooled,
        probs,
        expected,
        levels: argmax_levels,
    })
}

/// `Σ_k −log max(p̂_{k,c_k}, 1e-12)` and its gradient w.r.t. the classifier
/// logits (`K×(M+1)`).
pub fn concept_loss(fwd: &ConceptForward, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (k, levels) = fwd.probs.shape();
    if labels.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {k} concepts",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(k, levels);
    for (c, &label) in labels.iter().enumerate() {
        if label >= levels {
            return Err(Error::InvalidArgument(format!(
                "concept {c} label {label} outside [0, {}]",
                levels - 1
            )));
        }
        let p = fwd.probs[(c, label)];
        loss -= p.max(LOG_FLOOR).ln();
        if p > LOG_FLOOR {
            let g = grad.row_mut(c);
            g.copy_from_slice(fwd.probs.row(c));
            g[label] -= 1.0;
        }
    }
    Ok((loss, grad))
}

/// Adds the logit gradient implied by `∂L/∂ĉ_k` to `grad_logits`, using
/// `∂ĉ_k/∂z_{k,m} = p̂_{k,m}(m − ĉ_k)`.
pub fn expected_score_backward(fwd: &ConceptForward, d_expected: &[f64], grad_logits: &mut Matrix) {
    for (c, &g) in d_expected.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let mean = fwd.expected[c];
        for (m, (out, &p)) in grad_logits
            .row_mut(c)
            .iter_mut()
            .zip(fwd.probs.row(c))
            .enumerate()
        {
            *out += g * p * (m as f64 - mean);
        }
    }
}

/// Gradients of the Stage-I parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGrads {
    pub queries: Matrix,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Same shape as the toy table; `None` in file mode.
    pub table: Option<Matrix>,
}

impl ConceptGrads {
    pub fn zeros_like(head: &ConceptHead) -> Self {
        Self {
            queries: Matrix::zeros(head.bank.queries.rows(), head.bank.queries.cols()),
            weights: head
                .classifiers
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: head
                .classifiers
                .biases
                .iter()
                .map(|b| vec![0.0; b.len()])
                .collect(),
            table: head
                .encoder
                .toy_table()
                .map(|t| Matrix::zeros(t.rows(), t.cols())),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.slices_mut() {
            x.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flat views in the same order as [`ConceptHead::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.queries.as_slice()];
        out.extend(self.weights.iter().map(Matrix::as_slice));
        out.extend(self.biases.iter().map(Vec::as_slice));
        if let Some(t) = &self.table {
            out.push(t.as_slice());
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.queries.as_mut_slice()];
        out.extend(self.weights.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.biases.iter_mut().map(Vec::as_mut_slice));
        if let Some(t) = &mut self.table {
            out.push(t.as_mut_slice());
        }
        out
    }
}

/// Back-propagates a logit gradient through the classifiers and attention
/// into `grads` (accumulating). Table rows receive the token-state gradient
/// at every position where their bucket occurs.
pub fn concept_backward(
    emb: &Embedded,
    fwd: &ConceptForward,
    bank: &ConceptQueryBank,
    clf: &ConceptClassifiers,
    grad_logits: &Matrix,
    grads: &mut ConceptGrads,
) {
    let h = &emb.rows;
    let (t_len, d) = h.shape();
    let k = bank.queries.rows();
    let mut d_h = Matrix::zeros(t_len, d);
    let mut d_alpha = vec![0.0; t_len];
    for c in 0..k {
        let dz = grad_logits.row(c);
        if dz.iter().all(|&g| g == 0.0) {
            continue;
        }
        let pooled = fwd.pooled.row(c);
        for (m, &g) in dz.iter().enumerate() {
            axpy(g, pooled, grads.weights[c].row_mut(m));
            grads.biases[c][m] += g;
        }
        let d_pooled = clf.weights[c].tr_matvec(dz);

        let alpha = fwd.attention.row(c);
        for (t, da) in d_alpha.iter_mut().enumerate() {
            *da = dot(&d_pooled, h.row(t));
            axpy(alpha[t], &d_pooled, d_h.row_mut(t));
        }
        let weighted: f64 = alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        let q = bank.queries.row(c);
        let inv_tau = 1.0 / bank.temperature;
        for t in 0..t_len {
            let d_score = alpha[t] * (d_alpha[t] - weighted) * inv_tau;
            if d_score == 0.0 {
                continue;
            }
            axpy(d_score, h.row(t), grads.queries.row_mut(c));
            axpy(d_score, q, d_h.row_mut(t));
        }
    }
    if let (Some(table), Some(buckets)) = (grads.table.as_mut(), emb.buckets.as_ref()) {
        for (t, &b) in buckets.iter().enumerate() {
            axpy(1.0, d_h.row(t), table.row_mut(b));
        }
    }
}

/// Stage-I model: text encoder, query bank and concept classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHead {
    pub encoder: TextEncoder,
    pub bank: ConceptQueryBank,
    pub classifiers: ConceptClassifiers,
}

impl ConceptHead {
    pub fn num_concepts(&self) -> usize {
        self.bank.queries.rows()
    }

    pub fn forward(&self, emb: &Embedded) -> Result<ConceptForward> {
        forward_concepts(&emb.rows, &self.bank, &self.classifiers)
    }

    /// Trainable tensors as flat slices: queries, classifier weights,
    /// classifier biases, then the toy table when present.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.bank.queries.as_mut_slice()];
        out.extend(
            self.classifiers
                .weights
                .iter_mut()
                .map(Matrix::as_mut_slice),
        );
        out.extend(self.classifiers.biases.iter_mut().map(Vec::as_mut_slice));
        if let TextEncoder::Toy(toy) = &mut self.encoder {
            out.push(toy.table.as_mut_slice());
        }
        out
    }
}
