//! Binary checkpoint: magic `RECCBM1\0`, little-endian `u32` header length,
//! a JSON header, then little-endian `f64` tensors in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingConfig, EmbeddingMode, TextEncoder, ToyEncoder};
use crate::encoder::{ConceptClassifiers, ConceptHead, ConceptQueryBank};
use crate::error::{Error, Result};
use crate::latent::LatentHeadParams;
use crate::model::Model;
use crate::rubric::RubricSpec;
use crate::tensor::Matrix;
use crate::train::{EpochLog, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RECCBM1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: RubricSpec,
    config: TrainConfig,
    embedding: EmbeddingConfig,
    #[serde(default)]
    log: Vec<EpochLog>,
    payload_bytes: u64,
    tensors: Vec<TensorEntry>,
}

struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(TensorEntry {
            name: name.into(),
            shape,
            offset: self.bytes.len() as u64,
        });
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice());
    }

    fn vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, vec![v.len()], v);
    }
}

/// Serializes a model to bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut w = PayloadWriter {
        bytes: Vec::new(),
        entries: Vec::new(),
    };
    w.matrix("queries", &model.concept.bank.queries);
    for (k, (weight, bias)) in model
        .concept
        .classifiers
        .weights
        .iter()
        .zip(&model.concept.classifiers.biases)
        .enumerate()
    {
        w.matrix(format!("classifier.{k}.weight"), weight);
        w.vector(format!("classifier.{k}.bias"), bias);
    }
    if let TextEncoder::Toy(toy) = &model.concept.encoder {
        w.matrix("toy_table", &toy.table);
    }
    if let Some(latent) = &model.latent {
        w.matrix("latent.cholesky", &latent.cholesky);
        w.vector("latent.log_variances", &latent.log_variances);
        w.matrix("latent.task_weights", &latent.task_weights);
        w.vector("latent.task_bias", &latent.task_bias);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        config: model.config.clone(),
        embedding: model.embedding.clone(),
        log: model.log.clone(),
        payload_bytes: w.bytes.len() as u64,
        tensors: w.entries,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header_bytes.len() + w.bytes.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&w.bytes);
    out
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct TensorReader<'a> {
    payload: &'a [u8],
    entries: Vec<TensorEntry>,
}

impl TensorReader<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor `{name}`")))?;
        if entry.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > self.payload.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` declares {n} values but the payload ends early"
            )));
        }
        Ok(self.payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_vec(
            rows,
            cols,
            self.take(name, &[rows, cols])?,
        ))
    }

    fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic("checkpoint".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("checkpoint header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Header(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[payload_start..];
    if (payload.len() as u64) < header.payload_bytes {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    header.spec.validate()?;
    let spec = header.spec;
    let reader = TensorReader {
        payload: &payload[..header.payload_bytes as usize],
        entries: header.tensors,
    };
    let k = spec.num_concepts;
    let d = header.embedding.d;
    let levels = spec.num_levels();
    let queries = reader.matrix("queries", k, d)?;
    let mut weights = Vec::with_capacity(k);
    let mut biases = Vec::with_capacity(k);
    for c in 0..k {
        weights.push(reader.matrix(&format!("classifier.{c}.weight"), levels, d)?);
        biases.push(reader.take(&format!("classifier.{c}.bias"), &[levels])?);
    }
    let encoder = match header.embedding.mode {
        EmbeddingMode::Toy => TextEncoder::Toy(ToyEncoder {
            table: reader.matrix("toy_table", header.embedding.vocab_size, d)?,
        }),
        EmbeddingMode::File => TextEncoder::from_config(&header.embedding)?,
    };
    let latent = if reader.has("latent.cholesky") {
        let grades = spec.num_grades();
        Some(LatentHeadParams {
            cholesky: reader.matrix("latent.cholesky", k, k)?,
            log_variances: reader.take("latent.log_variances", &[k])?,
            task_weights: reader.matrix("latent.task_weights", grades, k)?,
            task_bias: reader.take("latent.task_bias", &[grades])?,
            epsilon: header.config.epsilon,
            kind: header.config.head,
        })
    } else {
        None
    };
    Ok(Model {
        spec,
        embedding: header.embedding,
        concept: ConceptHead {
            encoder,
            bank: ConceptQueryBank {
                queries,
                temperature: header.config.temperature,
            },
            classifiers: ConceptClassifiers { weights, biases },
        },
        config: header.config,
        latent,
        log: header.log,
    })
}
