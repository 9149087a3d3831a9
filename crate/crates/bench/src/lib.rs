//! Fixtures shared by the benchmarks.

use rec_cbm_core::encoder::{init_query_bank, ConceptClassifiers, ConceptQueryBank};
use rec_cbm_core::latent::{HeadKind, LatentHeadParams};
use rec_cbm_core::rubric::{equicorrelation, SYNTHETIC_NOISE_SD, SYNTHETIC_RHO};
use rec_cbm_core::{generate_synthetic, Dataset, Matrix, RubricSpec};

/// Deterministic token states with entries in [-1, 1].
pub fn token_states(t: usize, d: usize) -> Matrix {
    Matrix::from_fn(t, d, |i, j| ((i * 31 + j * 17) % 101) as f64 / 50.0 - 1.0)
}

pub fn concept_head(k: usize, levels: usize, d: usize) -> (ConceptQueryBank, ConceptClassifiers) {
    let bank = init_query_bank(k, d, 1.0, 0).expect("k <= d");
    (bank, ConceptClassifiers::init(k, levels, d, 1))
}

/// Latent head with a dense Cholesky factor and uneven noise variances.
pub fn latent_head(k: usize, grades: usize) -> LatentHeadParams {
    let mut p = LatentHeadParams::init(k, grades, 1e-4, HeadKind::Latent);
    for i in 0..k {
        for j in 0..i {
            p.cholesky[(i, j)] = 0.1 * (i + j) as f64 / k as f64;
        }
        p.log_variances[i] = -1.0 + i as f64 / k as f64;
    }
    p
}

pub fn observed(k: usize) -> Vec<f64> {
    (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect()
}

pub fn synthetic_corpus(n: usize) -> Dataset {
    let spec = RubricSpec::with_default_names(4, 3, 4).expect("valid spec");
    generate_synthetic(
        &spec,
        n,
        &equicorrelation(4, SYNTHETIC_RHO),
        SYNTHETIC_NOISE_SD,
        0,
    )
    .expect("valid generator inputs")
}
