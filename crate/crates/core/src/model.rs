//! A complete grading model: concept head (Stage I) plus latent grade head
//! (Stage II), and the prediction paths shared by evaluation and analysis.

use crate::embedding::{tokenize, Embedded, EmbeddingConfig, TextEncoder};
use crate::encoder::{init_query_bank, ConceptClassifiers, ConceptForward, ConceptHead};
use crate::error::{Error, Result};
use crate::latent::{posterior, LatentHeadParams, PosteriorResult};
use crate::metrics::{Metrics, PredictionSet};
use crate::rubric::{Dataset, GradingInstance, RubricSpec};
use crate::train::{EpochLog, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: RubricSpec,
    pub embedding: EmbeddingConfig,
    pub config: TrainConfig,
    pub concept: ConceptHead,
    /// Absent until Stage II has run.
    pub latent: Option<LatentHeadParams>,
    pub log: Vec<EpochLog>,
}

/// Everything the forward pass produces for one instance.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub embedded: Embedded,
    pub concepts: ConceptForward,
    /// `ĉ / M`
    pub observed: Vec<f64>,
    pub posterior: PosteriorResult,
}

impl Model {
    /// Freshly initialized Stage-I model (no latent head yet).
    pub fn init(spec: RubricSpec, embedding: EmbeddingConfig, config: TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let encoder = TextEncoder::from_config(&embedding)?;
        let d = embedding.d;
        let bank = init_query_bank(spec.num_concepts, d, config.temperature, config.seed)?;
        let classifiers = ConceptClassifiers::init(
            spec.num_concepts,
            spec.num_levels(),
            d,
            config.seed.wrapping_add(1),
        );
        Ok(Self {
            spec,
            embedding,
            config,
            concept: ConceptHead {
                encoder,
                bank,
                classifiers,
            },
            latent: None,
            log: Vec::new(),
        })
    }

    pub fn tokens(&self, inst: &GradingInstance) -> Result<Vec<String>> {
        tokenize(
            &inst.question,
            &inst.response,
            inst.context.as_deref(),
            self.embedding.max_len,
        )
    }

    pub fn embed(&self, inst: &GradingInstance) -> Result<Embedded> {
        let tokens = self.tokens(inst)?;
        self.concept.encoder.embed(&inst.id, &tokens)
    }

    pub fn concepts(&self, inst: &GradingInstance) -> Result<(Embedded, ConceptForward)> {
        let emb = self.embed(inst)?;
        let fwd = self.concept.forward(&emb)?;
        Ok((emb, fwd))
    }

    pub fn normalize(&self, expected: &[f64]) -> Vec<f64> {
        let m = self.spec.max_concept_level as f64;
        expected.iter().map(|c| c / m).collect()
    }

    pub fn latent(&self) -> Result<&LatentHeadParams> {
        self.latent
            .as_ref()
            .ok_or_else(|| Error::Incomplete("Stage II has not been trained".into()))
    }

    /// Grade readout for arbitrary `s̃` through the frozen latent head.
    pub fn grade_from_observed(&self, observed: &[f64]) -> Result<PosteriorResult> {
        posterior(observed, self.latent()?)
    }

    pub fn predict(&self, inst: &GradingInstance) -> Result<Prediction> {
        let (embedded, concepts) = self.concepts(inst)?;
        let observed = self.normalize(&concepts.expected);
        let posterior = self.grade_from_observed(&observed)?;
        Ok(Prediction {
            embedded,
            concepts,
            observed,
            posterior,
        })
    }

    pub fn predictions(&self, data: &Dataset) -> Result<PredictionSet> {
        let mut set = PredictionSet::default();
        for inst in &data.instances {
            let p = self.predict(inst)?;
            set.grade_pred.push(p.posterior.predicted_grade());
            set.grade_gold.push(inst.grade);
            set.concept_pred.push(p.concepts.levels);
            set.concept_gold.push(inst.concept_labels.clone());
        }
        Ok(set)
    }

    /// T-Acc, T-F1, C-Acc and C-F1 over `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::EmptySplit);
        }
        let set = self.predictions(data)?;
        Ok(set.metrics(self.spec.num_grades(), self.spec.num_levels()))
    }
}
