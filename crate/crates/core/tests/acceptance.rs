//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rec_cbm_core::analysis::{
    build_trace, denoising_report, intervene_and_score, label_correlation, InterventionKind,
    InterventionPolicy,
};
use rec_cbm_core::checkpoint::{from_bytes, to_bytes};
use rec_cbm_core::encoder::init_query_bank;
use rec_cbm_core::gradcheck;
use rec_cbm_core::latent::{posterior, HeadKind, LatentHeadParams};
use rec_cbm_core::ordinal::{build_pairs, ranking_loss};
use rec_cbm_core::rubric::{
    assign_splits, equicorrelation, generate_synthetic, split_counts, SYNTHETIC_NOISE_SD,
    SYNTHETIC_RHO,
};
use rec_cbm_core::train::{train_stage1, train_stage2, train_stage2_with_observer};
use rec_cbm_core::{
    train_model, Dataset, EmbeddingConfig, Matrix, Model, RubricSpec, Split, TrainConfig,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn spd_with_noise(k: usize, rng: &mut ChaCha8Rng) -> LatentHeadParams {
    let mut p = LatentHeadParams::init(k, 3, 1e-4, HeadKind::Latent);
    for i in 0..k {
        for j in 0..=i {
            let v: f64 = rng.sample(StandardNormal);
            p.cholesky[(i, j)] = if i == j { 0.3 + v.abs() } else { 0.6 * v };
        }
        p.log_variances[i] = rng.random_range(-2.0..1.5);
    }
    p
}

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Ω⁻¹ (Ω⁻¹ + D)⁻¹ with general inverses.
fn oracle_map(precision: &Matrix, noise: &[f64]) -> DMatrix<f64> {
    let prior = na(precision).try_inverse().expect("invertible precision");
    let obs = &prior + DMatrix::from_diagonal(&DVector::from_column_slice(noise));
    &prior
        * obs
            .try_inverse()
            .expect("invertible observation covariance")
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let k = 1 + i % 8;
        let p = spd_with_noise(k, &mut rng);
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let mu = posterior(&s, &p).unwrap().mean;
        let expect =
            oracle_map(&p.precision(), &p.noise_variances()) * DVector::from_column_slice(&s);
        for (a, b) in mu.iter().zip(expect.iter()) {
            worst = worst.max((a - b).abs());
        }
    }

    // Regression of z on s̃ over simulated draws recovers A.
    let p = spd_with_noise(3, &mut rng);
    let a = posterior(&[0.0; 3], &p).unwrap().denoise;
    let cov = na(&p.precision()).try_inverse().unwrap();
    let root = cov.cholesky().unwrap().l();
    let sd: Vec<f64> = p.noise_variances().iter().map(|v| v.sqrt()).collect();
    let mut zs = DMatrix::<f64>::zeros(3, 3);
    let mut ss = DMatrix::<f64>::zeros(3, 3);
    let mut mc = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1_000_000 {
        let e = DVector::from_fn(3, |_, _| mc.sample::<f64, _>(StandardNormal));
        let z = &root * e;
        let s = DVector::from_fn(3, |i, _| z[i] + sd[i] * mc.sample::<f64, _>(StandardNormal));
        zs += &z * s.transpose();
        ss += &s * s.transpose();
    }
    let fit = zs * ss.try_inverse().unwrap();
    let mut mc_err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            mc_err = mc_err.max((fit[(i, j)] - a[(i, j)]).abs());
        }
    }
    outcome(
        worst <= 1e-8 && mc_err <= 0.01,
        format!("max |mu - oracle| = {worst:.2e} (<= 1e-8), Monte Carlo max |A_hat - A| = {mc_err:.4} (<= 0.01)"),
    )
}

fn criterion_2() -> Outcome {
    let prior_vars: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 10.0];
    let noise_vars: [f64; 5] = [0.01, 0.2, 1.0, 3.0, 25.0];
    let mut worst: f64 = 0.0;
    for &vz in &prior_vars {
        for &vn in &noise_vars {
            let mut p = LatentHeadParams::init(2, 2, 0.0, HeadKind::Latent);
            for i in 0..2 {
                p.cholesky[(i, i)] = (1.0 / vz).sqrt();
                p.log_variances[i] = vn.ln();
            }
            let a = posterior(&[0.3, 0.7], &p).unwrap().denoise;
            let expect = vz / (vz + vn);
            worst = worst
                .max((a[(0, 0)] - expect).abs())
                .max((a[(1, 1)] - expect).abs());
            worst = worst.max(a[(0, 1)].abs()).max(a[(1, 0)].abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |A_kk - reliability| = {worst:.2e} (<= 1e-10)"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in 0..20 {
        for report in gradcheck::run_all(seed).unwrap() {
            for g in &report.groups {
                if g.max_rel_error > worst.0 {
                    worst = (
                        g.max_rel_error,
                        format!("{} / {} seed {seed}", report.loss, g.group),
                    );
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "max relative error {:.2e} at {} (< 1e-4), {elapsed:.1?}",
            worst.0, worst.1
        ),
    )
}

fn synthetic(n: usize, correlation: &Matrix, seed: u64) -> (Dataset, Dataset, Dataset) {
    let spec = RubricSpec::with_default_names(correlation.rows(), 3, 4).unwrap();
    let data = generate_synthetic(&spec, n, correlation, SYNTHETIC_NOISE_SD, seed).unwrap();
    let data = assign_splits(data, [0.7, 0.2, 0.1], seed).unwrap();
    (
        data.subset(Split::Train),
        data.subset(Split::Dev),
        data.subset(Split::Test),
    )
}

fn criterion_4() -> Outcome {
    let bank = init_query_bank(8, 64, 1.0, 3).unwrap();
    let q = &bank.queries;
    let mut orth: f64 = 0.0;
    for i in 0..q.rows() {
        for j in 0..q.rows() {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            orth = orth.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }

    // 162 train instances at batch 8 give 21 steps per epoch; 10 epochs >= 200 steps.
    let (train, dev, test) = synthetic(229, &equicorrelation(4, SYNTHETIC_RHO), 21);
    let config = TrainConfig {
        stage1_epochs: 5,
        stage2_epochs: 10,
        patience: 100,
        stage2_lr: 5e-2,
        ..TrainConfig::synthetic()
    };
    let mut model = Model::init(train.spec.clone(), EmbeddingConfig::default(), config).unwrap();
    train_stage1(&mut model, &train, &dev).unwrap();
    let epsilon = model.config.epsilon;
    let mut steps = 0usize;
    let mut min_eig = f64::INFINITY;
    train_stage2_with_observer(&mut model, &train, &dev, &mut |p| {
        steps += 1;
        let eig = na(&p.precision()).symmetric_eigenvalues();
        min_eig = min_eig.min(eig.min());
    })
    .unwrap();

    let mut attention: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for inst in &test.instances {
        let trace = build_trace(inst, &model, 3).unwrap();
        for c in &trace.concepts {
            attention = attention.max((c.attention.iter().sum::<f64>() - 1.0).abs());
        }
        residual = residual.max(trace.decomposition_residual());
    }
    outcome(
        orth <= 1e-8
            && steps >= 200
            && min_eig >= epsilon * (1.0 - 1e-6)
            && attention <= 1e-9
            && residual <= 1e-6,
        format!(
            "|QQ^T - I| = {orth:.1e}, min eig(Omega) over {steps} steps = {min_eig:.3e} (eps {epsilon:.0e}), \
             |sum alpha - 1| = {attention:.1e}, trace residual = {residual:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let eq = ranking_loss(
        &Matrix::from_rows(&[vec![0.7], vec![0.7]]),
        &build_pairs(&[vec![2], vec![1]]),
    )
    .0;
    let margin = ranking_loss(
        &Matrix::from_rows(&[vec![3.0], vec![0.0]]),
        &build_pairs(&[vec![2], vec![0]]),
    )
    .0;
    let (empty, grad) = ranking_loss(
        &Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0]]),
        &build_pairs(&[vec![1, 2], vec![1, 2]]),
    );
    let e1 = (eq - 2f64.ln()).abs();
    let e2 = (margin - (-3f64).exp().ln_1p()).abs();
    let zero_grad = grad.as_slice().iter().all(|&g| g == 0.0);
    outcome(
        e1 <= 1e-12 && e2 <= 1e-12 && empty == 0.0 && zero_grad,
        format!("|equal - ln2| = {e1:.1e}, |margin3 - ln(1+e^-3)| = {e2:.1e}, empty = {empty}, zero grad = {zero_grad}"),
    )
}

struct SeedRun {
    full: Model,
    test: Dataset,
    full_acc: f64,
    full_f1: f64,
    ablation_f1: f64,
    majority: f64,
    dev_concept_acc: f64,
}

fn train_synthetic(train: &Dataset, dev: &Dataset, config: TrainConfig) -> Model {
    let mut model = Model::init(train.spec.clone(), EmbeddingConfig::default(), config).unwrap();
    train_model(&mut model, train, dev).unwrap();
    model
}

fn run_seed(seed: u64) -> SeedRun {
    let (train, dev, test) = synthetic(2000, &equicorrelation(4, SYNTHETIC_RHO), seed);
    let full = train_synthetic(
        &train,
        &dev,
        TrainConfig {
            seed,
            ..TrainConfig::synthetic()
        },
    );
    let ablation = train_synthetic(
        &train,
        &dev,
        TrainConfig {
            seed,
            lambda_rank: 0.0,
            head: HeadKind::Direct,
            ..TrainConfig::synthetic()
        },
    );
    let metrics = full.evaluate(&test).unwrap();
    let mut counts = vec![0usize; train.spec.num_grades()];
    for inst in &train.instances {
        counts[inst.grade] += 1;
    }
    let majority_grade = (0..counts.len())
        .max_by_key(|&g| (counts[g], std::cmp::Reverse(g)))
        .unwrap();
    let majority = test
        .instances
        .iter()
        .filter(|i| i.grade == majority_grade)
        .count() as f64
        / test.len() as f64;
    SeedRun {
        full_acc: metrics.task_accuracy,
        full_f1: metrics.task_f1,
        ablation_f1: ablation.evaluate(&test).unwrap().task_f1,
        dev_concept_acc: full.evaluate(&dev).unwrap().concept_accuracy,
        majority,
        full,
        test,
    }
}

fn criterion_6(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let acc = mean(&runs.iter().map(|r| r.full_acc).collect::<Vec<_>>());
    let majority = mean(&runs.iter().map(|r| r.majority).collect::<Vec<_>>());
    let cacc = mean(&runs.iter().map(|r| r.dev_concept_acc).collect::<Vec<_>>());
    let f1 = mean(&runs.iter().map(|r| r.full_f1).collect::<Vec<_>>());
    let ablation = mean(&runs.iter().map(|r| r.ablation_f1).collect::<Vec<_>>());
    outcome(
        acc >= majority + 0.10
            && cacc >= 0.55
            && f1 >= ablation
            && elapsed < Duration::from_secs(600),
        format!(
            "(a) T-Acc {acc:.3} vs majority {majority:.3} + 0.10; (b) dev C-Acc {cacc:.3} >= 0.55; \
             (c) T-F1 {f1:.4} vs ablation {ablation:.4}; {elapsed:.1?}"
        ),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let k_total = runs[0].full.spec.num_concepts;
    let curve = |kind: InterventionKind| -> Vec<f64> {
        let mut acc = vec![0.0; k_total + 1];
        for r in runs {
            let c = intervene_and_score(&r.test, &r.full, InterventionPolicy::new(kind, k_total))
                .unwrap();
            for (a, p) in acc.iter_mut().zip(&c.curve) {
                *a += p.task_accuracy / runs.len() as f64;
            }
        }
        acc
    };
    let none = curve(InterventionKind::None)[0];
    let oracle = curve(InterventionKind::Oracle);
    let wrong = curve(InterventionKind::Wrong);
    let random = curve(InterventionKind::Random);
    let monotone = wrong.windows(2).all(|w| w[1] <= w[0] + 0.01);
    let drop = wrong[k_total] <= none - 0.10;
    let oracle_ok = oracle.iter().all(|&o| o >= none - 0.01);
    let random_ok = random
        .iter()
        .zip(&wrong)
        .all(|(&r, &w)| r >= w - 0.02 && r <= none);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        monotone && drop && oracle_ok && random_ok,
        format!(
            "None {none:.3} | Oracle {} | Wrong {} | Random {} (monotone {monotone}, drop {drop}, oracle {oracle_ok}, random {random_ok})",
            fmt(&oracle),
            fmt(&wrong),
            fmt(&random)
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut correlation = Matrix::identity(4);
    correlation[(0, 1)] = 0.9;
    correlation[(1, 0)] = 0.9;
    let mut details = Vec::new();
    let mut pass = true;
    for seed in [0u64, 1, 2] {
        let (train, dev, _) = synthetic(2000, &correlation, seed);
        let mut base = Model::init(
            train.spec.clone(),
            EmbeddingConfig::default(),
            TrainConfig {
                seed,
                ..TrainConfig::synthetic()
            },
        )
        .unwrap();
        train_stage1(&mut base, &train, &dev).unwrap();
        let mut partial = [0.0; 2];
        for (slot, lambda) in [0.0, 0.1].into_iter().enumerate() {
            let mut model = base.clone();
            model.config.lambda_sparsity = lambda;
            train_stage2(&mut model, &train, &dev).unwrap();
            partial[slot] = denoising_report(&model, &train).unwrap().mean_abs_partial;
        }
        let (empirical, _) = label_correlation(&train);
        let r12 = empirical[(0, 1)];
        pass &= partial[1] < partial[0] && r12 > 0.5;
        details.push(format!(
            "seed {seed}: |r_partial| {:.4} (0.0) vs {:.4} (0.1), r12 {r12:.3}",
            partial[0], partial[1]
        ));
    }
    outcome(pass, details.join("; "))
}

fn criterion_9() -> Outcome {
    let (train, dev, _) = synthetic(200, &equicorrelation(4, SYNTHETIC_RHO), 9);
    let config = TrainConfig {
        stage1_epochs: 3,
        stage2_epochs: 3,
        seed: 9,
        ..TrainConfig::synthetic()
    };
    let a = train_synthetic(&train, &dev, config.clone());
    let b = train_synthetic(&train, &dev, config);
    let bytes = to_bytes(&a);
    let restored = from_bytes(&bytes).unwrap();
    let round_trip = restored == a && to_bytes(&restored) == bytes;
    let deterministic = to_bytes(&b) == bytes;
    let spec = RubricSpec::with_default_names(4, 3, 4).unwrap();
    let data = generate_synthetic(
        &spec,
        2000,
        &equicorrelation(4, SYNTHETIC_RHO),
        SYNTHETIC_NOISE_SD,
        1,
    )
    .unwrap();
    let sizes = assign_splits(data, [0.7, 0.2, 0.1], 1)
        .unwrap()
        .split_sizes();
    let counts_ok = sizes == (1400, 400, 200) && split_counts(10, [0.7, 0.2, 0.1]) == [7, 2, 1];
    outcome(
        round_trip && deterministic && counts_ok,
        format!("round trip {round_trip}, same-seed identical {deterministic}, splits {sizes:?}"),
    )
}

fn main() {
    // `cargo test -- <filter>` passes arguments; this target always runs everything.
    let total = Instant::now();
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
    ];
    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    results.push((6, criterion_6(&runs, start.elapsed())));
    results.push((7, criterion_7(&runs)));
    results.push((8, criterion_8()));
    results.push((9, criterion_9()));

    let mut failed = 0;
    for (id, o) in &results {
        println!(
            "criterion {id}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.1?}",
        results.len() - failed,
        results.len(),
        total.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
