//! Concept-bottleneck grading heads: rubric-aware concept attention, ordinal
//! pairwise calibration and closed-form latent Gaussian error correction,
//! with two-stage training, intervention analysis and decision traces.

pub mod analysis;
pub mod checkpoint;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ordinal;
pub mod rubric;
pub mod tensor;
pub mod train;

pub use crate::analysis::{
    build_trace, denoising_report, intervene_and_score, intervene_instance, trace_with_labels,
    DecisionTrace, DenoisingReport, InterventionCurve, InterventionKind, InterventionPolicy,
    WrongRule,
};
pub use crate::checkpoint::{load_checkpoint, save_checkpoint};
pub use crate::embedding::{tokenize, EmbeddingConfig, EmbeddingMode, TextEncoder};
pub use crate::error::{Error, Result};
pub use crate::latent::{posterior, HeadKind, LatentHeadParams, PosteriorResult};
pub use crate::metrics::Metrics;
pub use crate::model::{Model, Prediction};
pub use crate::rubric::{
    assign_splits, generate_synthetic, load_dataset, Dataset, GradingInstance, RubricSpec, Split,
};
pub use crate::tensor::Matrix;
pub use crate::train::{train_model, train_stage1, train_stage2, EpochLog, TrainConfig};
