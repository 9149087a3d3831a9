//! Latent concept error correction.
//!
//! Normalized concept scores `s̃ ∈ [0,1]^K` are treated as noisy
//! observations `s̃ | z ~ N(z, D)` of a latent vector with Gaussian prior
//! `z ~ N(0, Ω⁻¹)`. The grade head reads the posterior mean
//! `μ = (Ω + D⁻¹)⁻¹ D⁻¹ s̃ = A s̃`.
//!
//! Parameterization: `Ω = L Lᵀ + εI` with `L` lower-triangular and
//! `D = diag(exp η)`, so both stay positive definite under unconstrained
//! gradient steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Posterior-mean correction before the grade head.
    #[default]
    Latent,
    /// Ablation: grade head reads `s̃` directly.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentHeadParams {
    /// Lower-triangular `K×K`; entries above the diagonal stay zero.
    pub cholesky: Matrix,
    /// `η_k`, with `σ_k² = exp(η_k)`.
    pub log_variances: Vec<f64>,
    /// `(S+1)×K`
    pub task_weights: Matrix,
    pub task_bias: Vec<f64>,
    pub epsilon: f64,
    pub kind: HeadKind,
}

impl LatentHeadParams {
    /// `L = I`, `η = 0`, `W = 0`, `b = 0`.
    pub fn init(k: usize, num_grades: usize, epsilon: f64, kind: HeadKind) -> Self {
        Self {
            cholesky: Matrix::identity(k),
            log_variances: vec![0.0; k],
            task_weights: Matrix::zeros(num_grades, k),
            task_bias: vec![0.0; num_grades],
            epsilon,
            kind,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.log_variances.len()
    }

    /// `Ω = L Lᵀ + εI`
    pub fn precision(&self) -> Matrix {
        let k = self.num_concepts();
        let l = &self.cholesky;
        Matrix::from_fn(k, k, |i, j| {
            let s: f64 = (0..=i.min(j)).map(|m| l[(i, m)] * l[(j, m)]).sum();
            if i == j {
                s + self.epsilon
            } else {
                s
            }
        })
    }

    pub fn noise_variances(&self) -> Vec<f64> {
        self.log_variances.iter().map(|e| e.exp()).collect()
    }

    /// Flat tensors in the order `L, η, W, b`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.cholesky.as_mut_slice(),
            self.log_variances.as_mut_slice(),
            self.task_weights.as_mut_slice(),
            self.task_bias.as_mut_slice(),
        ]
    }
}

/// Cholesky factor of a small SPD matrix, `A = G Gᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        let mut g = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for m in 0..j {
                diag -= g[(j, m)] * g[(j, m)];
            }
            if !(diag > 0.0 && diag.is_finite()) {
                return Err(Error::Singular {
                    condition: condition_from_diag(a, &g, j, diag),
                });
            }
            let pivot = diag.sqrt();
            g[(j, j)] = pivot;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for m in 0..j {
                    s -= g[(i, m)] * g[(j, m)];
                }
                g[(i, j)] = s / pivot;
            }
        }
        let chol = Self { factor: g };
        let condition = chol.condition_estimate();
        if !condition.is_finite() || condition > 1e14 {
            return Err(Error::Singular { condition });
        }
        Ok(chol)
    }

    /// `(max G_ii / min G_ii)²`, a cheap lower bound on the 2-norm condition.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.factor.rows();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = self.factor[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let g = &self.factor;
        let n = g.rows();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for m in 0..i {
                s -= g[(i, m)] * y[m];
            }
            y[i] = s / g[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for m in i + 1..n {
                s -= g[(m, i)] * y[m];
            }
            y[i] = s / g[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.factor.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Symmetrize away round-off.
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = avg;
                inv[(j, i)] = avg;
            }
        }
        inv
    }
}

fn condition_from_diag(a: &Matrix, g: &Matrix, failed: usize, residual: f64) -> f64 {
    let max_diag = (0..a.rows()).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let min_pivot = (0..failed)
        .map(|i| g[(i, i)] * g[(i, i)])
        .fold(residual.abs(), f64::min);
    if min_pivot > 0.0 {
        max_diag / min_pivot
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorResult {
    /// `s̃`
    pub observed: Vec<f64>,
    /// `Σ_post`
    pub covariance: Matrix,
    /// `μ_post`
    pub mean: Vec<f64>,
    /// `A = Σ_post D⁻¹`
    pub denoise: Matrix,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PosteriorResult {
    pub fn predicted_grade(&self) -> usize {
        crate::tensor::argmax(&self.probs)
    }
}

fn check_observed(observed: &[f64], k: usize) -> Result<()> {
    if observed.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} observed scores for {k} concepts",
            observed.len()
        )));
    }
    if observed.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observed concept scores".into()));
    }
    Ok(())
}

fn grade_logits(params: &LatentHeadParams, mean: &[f64]) -> Vec<f64> {
    let mut logits = params.task_weights.matvec(mean);
    for (z, b) in logits.iter_mut().zip(&params.task_bias) {
        *z += b;
    }
    logits
}

/// Closed-form posterior of the latent concepts and the grade head readout.
/// For [`HeadKind::Direct`] the correction is skipped (`A = I`, `Σ_post = 0`).
pub fn posterior(observed: &[f64], params: &LatentHeadParams) -> Result<PosteriorResult> {
    let k = params.num_concepts();
    check_observed(observed, k)?;
    if params.kind == HeadKind::Direct {
        let mean = observed.to_vec();
        let logits = grade_logits(params, &mean);
        return Ok(PosteriorResult {
            observed: observed.to_vec(),
            covariance: Matrix::zeros(k, k),
            mean,
            denoise: Matrix::identity(k),
            probs: softmax(&logits),
            logits,
        });
    }
    let inv_noise: Vec<f64> = params.log_variances.iter().map(|e| (-e).exp()).collect();
    let mut system = params.precision();
    for (i, w) in inv_noise.iter().enumerate() {
        system[(i, i)] += w;
    }
    let chol = Cholesky::new(&system)?;
    let covariance = chol.inverse();
    let denoise = Matrix::from_fn(k, k, |i, j| covariance[(i, j)] * inv_noise[j]);
    let rhs: Vec<f64> = observed
        .iter()
        .zip(&inv_noise)
        .map(|(s, w)| s * w)
        .collect();
    let mean = chol.solve(&rhs);
    let logits = grade_logits(params, &mean);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("grade logits".into()));
    }
    Ok(PosteriorResult {
        observed: observed.to_vec(),
        covariance,
        mean,
        denoise,
        probs: softmax(&logits),
        logits,
    })
}

/// Conditional-mean form `Ω⁻¹ (Ω⁻¹ + D)⁻¹ s̃`, computed with general LU
/// inverses. Kept separate from [`posterior`] so each can check the other.
pub fn mmse_oracle(precision: &Matrix, noise: &[f64], observed: &[f64]) -> Result<Vec<f64>> {
    let map = mmse_oracle_matrix(precision, noise)?;
    Ok(map.matvec(observed))
}

/// The linear map of [`mmse_oracle`].
pub fn mmse_oracle_matrix(precision: &Matrix, noise: &[f64]) -> Result<Matrix> {
    let k = precision.rows();
    if noise.len() != k {
        return Err(Error::DimensionMismatch("noise length vs precision".into()));
    }
    let prior_cov = precision
        .to_nalgebra()
        .try_inverse()
        .ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
    let mut obs_cov = prior_cov.clone();
    for (i, n) in noise.iter().enumerate() {
        obs_cov[(i, i)] += n;
    }
    let obs_inv = obs_cov.try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    Ok(Matrix::from_nalgebra(&(prior_cov * obs_inv)))
}

/// Monte Carlo estimate of the MMSE-optimal linear map: draws
/// `z ~ N(0, Ω⁻¹)`, `s̃ = z + N(0, D)` and fits the least-squares map
/// `s̃ → z` over `n` samples.
pub fn mmse_monte_carlo(precision: &Matrix, noise: &[f64], n: usize, seed: u64) -> Result<Matrix> {
    let k = precision.rows();
    let prior_cov = precision
        .to_nalgebra()
        .try_inverse()
        .ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
    let root = prior_cov
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("prior covariance".into()))?
        .l();
    let noise_sd: Vec<f64> = noise.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cross = nalgebra::DMatrix::<f64>::zeros(k, k);
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    let mut e = nalgebra::DVector::<f64>::zeros(k);
    for _ in 0..n {
        for v in e.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let z = &root * &e;
        let s = nalgebra::DVector::from_fn(k, |i, _| {
            z[i] + noise_sd[i] * rng.sample::<f64, _>(StandardNormal)
        });
        cross += &z * s.transpose();
        gram += &s * s.transpose();
    }
    let gram_inv = gram.try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    Ok(Matrix::from_nalgebra(&(cross * gram_inv)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTwoWeights {
    pub task: f64,
    pub denoise: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTwoLoss {
    pub task: f64,
    pub denoise: f64,
    pub sparsity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub cholesky: Matrix,
    pub log_variances: Vec<f64>,
    pub task_weights: Matrix,
    pub task_bias: Vec<f64>,
}

impl LatentGrads {
    pub fn zeros_like(p: &LatentHeadParams) -> Self {
        Self {
            cholesky: Matrix::zeros(p.cholesky.rows(), p.cholesky.cols()),
            log_variances: vec![0.0; p.log_variances.len()],
            task_weights: Matrix::zeros(p.task_weights.rows(), p.task_weights.cols()),
            task_bias: vec![0.0; p.task_bias.len()],
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.cholesky.as_slice(),
            &self.log_variances,
            self.task_weights.as_slice(),
            &self.task_bias,
        ]
    }

    pub fn scale(&mut self, factor: f64) {
        for s in [
            self.cholesky.as_mut_slice(),
            self.log_variances.as_mut_slice(),
            self.task_weights.as_mut_slice(),
            self.task_bias.as_mut_slice(),
        ] {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// `Σ_{i>j} |L_ij|`
pub fn sparsity_penalty(params: &LatentHeadParams) -> f64 {
    let l = &params.cholesky;
    (0..l.rows())
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| l[(i, j)].abs())
        .sum()
}

/// Adds `weight · ∂L_spa/∂L` (subgradient 0 at 0) into `grads`.
pub fn sparsity_backward(params: &LatentHeadParams, weight: f64, grads: &mut LatentGrads) {
    let l = &params.cholesky;
    for i in 0..l.rows() {
        for j in 0..i {
            let v = l[(i, j)];
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            grads.cholesky[(i, j)] += weight * sign;
        }
    }
}

/// Task cross-entropy and denoising alignment for one instance, accumulating
/// `scale ·` their weighted gradient into `grads`. Returns `(L_task, L_den)`.
///
/// The solve is differentiated with `d(P⁻¹) = −P⁻¹ dP P⁻¹`, reusing
/// `Σ_post = P⁻¹` from the forward pass.
#[allow(clippy::needless_range_loop)]
pub fn instance_backward(
    result: &PosteriorResult,
    grade: usize,
    target: &[f64],
    params: &LatentHeadParams,
    weights: StageTwoWeights,
    scale: f64,
    grads: &mut LatentGrads,
) -> Result<(f64, f64)> {
    let k = params.num_concepts();
    let num_grades = params.task_bias.len();
    if grade >= num_grades {
        return Err(Error::InvalidArgument(format!(
            "grade {grade} outside [0, {}]",
            num_grades - 1
        )));
    }
    if target.len() != k {
        return Err(Error::DimensionMismatch("target length".into()));
    }
    let task = -result.probs[grade].max(crate::encoder::LOG_FLOOR).ln();
    let denoise = result
        .mean
        .iter()
        .zip(target)
        .map(|(m, c)| (m - c).powi(2))
        .sum::<f64>()
        / k as f64;

    let mut d_logits = result.probs.clone();
    d_logits[grade] -= 1.0;
    d_logits.iter_mut().for_each(|g| *g *= weights.task * scale);
    for (g, row_grad) in d_logits.iter().enumerate() {
        grads.task_bias[g] += row_grad;
        for (w, m) in grads.task_weights.row_mut(g).iter_mut().zip(&result.mean) {
            *w += row_grad * m;
        }
    }
    if params.kind == HeadKind::Direct {
        return Ok((task, denoise));
    }

    let mut d_mean = params.task_weights.tr_matvec(&d_logits);
    for ((dm, m), c) in d_mean.iter_mut().zip(&result.mean).zip(target) {
        *dm += weights.denoise * scale * 2.0 * (m - c) / k as f64;
    }
    // v = P⁻¹ ∂L/∂μ; ∂L/∂P = −v μᵀ; ∂L/∂r = v where r = D⁻¹ s̃.
    let v = result.covariance.matvec(&d_mean);
    for i in 0..k {
        let inv_noise = (-params.log_variances[i]).exp();
        grads.log_variances[i] += v[i] * inv_noise * (result.mean[i] - result.observed[i]);
    }
    // ∂L/∂Ω = G = −v μᵀ; ∂L/∂L = (G + Gᵀ) L restricted to the lower triangle.
    let l = &params.cholesky;
    for i in 0..k {
        for j in 0..=i {
            let mut s = 0.0;
            for m in 0..k {
                let sym = -(v[i] * result.mean[m] + v[m] * result.mean[i]);
                s += sym * l[(m, j)];
            }
            grads.cholesky[(i, j)] += s;
        }
    }
    Ok((task, denoise))
}

/// Full per-instance Stage-II objective
/// `λ_t L_task + λ_d L_den + λ_s L_spa` and its gradient w.r.t. `(L, η, W, b)`.
pub fn stage2_losses(
    result: &PosteriorResult,
    grade: usize,
    concept_labels: &[usize],
    max_level: usize,
    params: &LatentHeadParams,
    weights: StageTwoWeights,
) -> Result<(StageTwoLoss, LatentGrads)> {
    let target: Vec<f64> = concept_labels
        .iter()
        .map(|&c| c as f64 / max_level as f64)
        .collect();
    let mut grads = LatentGrads::zeros_like(params);
    let (task, denoise) =
        instance_backward(result, grade, &target, params, weights, 1.0, &mut grads)?;
    let sparsity = sparsity_penalty(params);
    sparsity_backward(params, weights.sparsity, &mut grads);
    let total = weights.task * task + weights.denoise * denoise + weights.sparsity * sparsity;
    Ok((
        StageTwoLoss {
            task,
            denoise,
            sparsity,
            total,
        },
        grads,
    ))
}

/// `r_ij = −Ω_ij / √(Ω_ii Ω_jj)` with unit diagonal.
pub fn partial_correlations(params: &LatentHeadParams) -> Matrix {
    partial_correlations_of(&params.precision())
}

pub fn partial_correlations_of(precision: &Matrix) -> Matrix {
    let k = precision.rows();
    Matrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            -precision[(i, j)] / (precision[(i, i)] * precision[(j, j)]).sqrt()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(l: Matrix, eta: Vec<f64>, epsilon: f64) -> LatentHeadParams {
        let k = eta.len();
        LatentHeadParams {
            cholesky: l,
            log_variances: eta,
            task_weights: Matrix::zeros(2, k),
            task_bias: vec![0.0; 2],
            epsilon,
            kind: HeadKind::Latent,
        }
    }

    #[test]
    fn scalar_posterior() {
        let p = params_with(Matrix::identity(1), vec![0.0], 0.0);
        let r = posterior(&[0.8], &p).unwrap();
        assert!((r.covariance[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((r.denoise[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((r.mean[0] - 0.4).abs() < 1e-15);
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_init_shrinks_by_about_half() {
        let p = LatentHeadParams::init(8, 5, 1e-12, HeadKind::Latent);
        let r = posterior(&[0.954; 8], &p).unwrap();
        for &m in &r.mean {
            assert!((m - 0.477).abs() < 1e-9);
        }
    }

    #[test]
    fn diagonal_prior_recovers_reliability() {
        let sz2: f64 = 2.0;
        let s2: f64 = 0.5;
        let l = Matrix::from_rows(&[vec![(1.0 / sz2).sqrt()]]);
        let p = params_with(l, vec![s2.ln()], 0.0);
        let r = posterior(&[1.0], &p).unwrap();
        assert!((r.denoise[(0, 0)] - sz2 / (sz2 + s2)).abs() < 1e-12);
    }

    #[test]
    fn direct_head_passes_scores_through() {
        let mut p = LatentHeadParams::init(3, 2, DEFAULT_EPSILON, HeadKind::Direct);
        p.task_weights[(1, 2)] = 2.0;
        let r = posterior(&[0.1, 0.2, 0.3], &p).unwrap();
        assert_eq!(r.mean, vec![0.1, 0.2, 0.3]);
        assert!((r.logits[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn singular_system_reports_condition() {
        let p = params_with(Matrix::zeros(2, 2), vec![800.0, 0.0], 0.0);
        match posterior(&[0.5, 0.5], &p) {
            Err(Error::Singular { condition }) => assert!(condition > 1e14),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_limit_has_no_shrinkage() {
        let s = [0.2, 0.9, 0.4];
        let out = mmse_oracle(&Matrix::identity(3), &[1e-12; 3], &s).unwrap();
        for (a, b) in out.iter().zip(&s) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn partial_correlation_identity() {
        let omega = Matrix::from_rows(&[vec![1.0, -0.5], vec![-0.5, 1.0]]);
        let r = partial_correlations_of(&omega);
        assert!((r[(0, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(r[(0, 0)], 1.0);
        let diag = params_with(Matrix::identity(3), vec![0.0; 3], 1e-4);
        assert_eq!(partial_correlations(&diag), Matrix::identity(3));
    }

    #[test]
    fn zero_losses_in_trivial_cases() {
        let p = params_with(Matrix::identity(2), vec![0.0; 2], 1e-4);
        assert_eq!(sparsity_penalty(&p), 0.0);
        let r = posterior(&[0.5, 0.5], &p).unwrap();
        let target = r.mean.clone();
        let mut g = LatentGrads::zeros_like(&p);
        let w = StageTwoWeights {
            task: 1.0,
            denoise: 1.0,
            sparsity: 0.0,
        };
        let (_, den) = instance_backward(&r, 0, &target, &p, w, 1.0, &mut g).unwrap();
        assert_eq!(den, 0.0);
    }
}
