//! Run configuration: a JSON file with optional `train` and `embedding`
//! sections, layered under command-line overrides.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use rec_cbm_core::{EmbeddingConfig, HeadKind, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.embedding.validate()?;
        Ok(())
    }
}

/// Flags that override individual config fields.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// Base training seed; multi-seed runs use seed, seed+1, ...
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub stage2_lr: Option<f64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda_rank: Option<f64>,
    #[arg(long)]
    pub lambda_denoise: Option<f64>,
    #[arg(long)]
    pub lambda_sparsity: Option<f64>,
    /// Grade head: `latent` (posterior correction) or `direct` (linear on s̃).
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
    /// Embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    match s {
        "latent" => Ok(HeadKind::Latent),
        "direct" => Ok(HeadKind::Direct),
        other => Err(format!(
            "unknown head `{other}` (expected latent or direct)"
        )),
    }
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.stage1_lr {
            t.stage1_lr = v;
        }
        if let Some(v) = self.stage2_lr {
            t.stage2_lr = v;
        }
        if let Some(v) = self.stage1_epochs {
            t.stage1_epochs = v;
        }
        if let Some(v) = self.stage2_epochs {
            t.stage2_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.temperature {
            t.temperature = v;
        }
        if let Some(v) = self.lambda_rank {
            t.lambda_rank = v;
        }
        if let Some(v) = self.lambda_denoise {
            t.lambda_denoise = v;
        }
        if let Some(v) = self.lambda_sparsity {
            t.lambda_sparsity = v;
        }
        if let Some(v) = self.head {
            t.head = v;
        }
        if let Some(v) = self.dim {
            cfg.embedding.d = v;
        }
    }
}

/// Flags > file > defaults.
pub fn resolve(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
