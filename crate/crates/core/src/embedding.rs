//! Token embeddings `H ∈ R^{T×d}`: either a deterministic hashed toy encoder
//! with a trainable table, or frozen rows read from a precomputed file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const SEP_TOKEN: &str = "[sep]";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"RECEMB1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Toy,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    pub d: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub file: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            mode: EmbeddingMode::Toy,
            d: 64,
            max_len: 512,
            vocab_size: 2048,
            seed: 0,
            file: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("embedding d must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".into()));
        }
        match self.mode {
            EmbeddingMode::Toy if self.vocab_size == 0 => {
                Err(Error::InvalidArgument("vocab_size must be >= 1".into()))
            }
            EmbeddingMode::File if self.file.is_none() => Err(Error::InvalidArgument(
                "file mode needs an embedding file path".into(),
            )),
            _ => Ok(()),
        }
    }
}

fn split_words(text: &str, out: &mut Vec<String>) {
    let lower = text.to_lowercase();
    out.extend(
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_owned),
    );
}

/// Lowercases, splits on non-alphanumeric runs and joins question, response
/// and optional context with `[sep]`, keeping the first `max_len` tokens.
pub fn tokenize(
    question: &str,
    response: &str,
    context: Option<&str>,
    max_len: usize,
) -> Result<Vec<String>> {
    let mut q = Vec::new();
    split_words(question, &mut q);
    let mut r = Vec::new();
    split_words(response, &mut r);
    let mut a = Vec::new();
    if let Some(ctx) = context {
        split_words(ctx, &mut a);
    }
    if r.is_empty() {
        return Err(Error::InvalidArgument(
            "response is empty after normalization".into(),
        ));
    }
    let mut tokens = q;
    tokens.push(SEP_TOKEN.to_string());
    tokens.extend(r);
    if context.is_some() {
        tokens.push(SEP_TOKEN.to_string());
        tokens.extend(a);
    }
    tokens.truncate(max_len.max(1));
    Ok(tokens)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Sinusoidal position vector: `sin(t/10000^(2i/d))` at even slots, `cos` at odd.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Hashed embedding table; rows are i.i.d. `N(0, 1/d)` at construction and
/// are trained in Stage I.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub table: Matrix,
}

impl ToyEncoder {
    pub fn new(vocab_size: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / d as f64).sqrt();
        let table = Matrix::from_fn(vocab_size, d, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self { table }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.table.rows() as u64) as usize
    }

    pub fn embed(&self, tokens: &[String]) -> Embedded {
        let d = self.table.cols();
        let buckets: Vec<usize> = tokens.iter().map(|t| self.bucket(t)).collect();
        let mut rows = Matrix::zeros(tokens.len(), d);
        for (t, &b) in buckets.iter().enumerate() {
            let pos = positional_encoding(t, d);
            for ((out, &e), p) in rows.row_mut(t).iter_mut().zip(self.table.row(b)).zip(pos) {
                *out = e + p;
            }
        }
        Embedded {
            tokens: tokens.to_vec(),
            rows,
            buckets: Some(buckets),
        }
    }
}

/// Result of embedding one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub tokens: Vec<String>,
    pub rows: Matrix,
    /// Table rows used per position (toy mode only); drives gradient scatter.
    pub buckets: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingFileEntry {
    id: String,
    num_tokens: usize,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingFileHeader {
    d: usize,
    entries: Vec<EmbeddingFileEntry>,
}

/// Precomputed per-instance embeddings loaded from a `RECEMB1` container.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    d: usize,
    rows: HashMap<String, Matrix>,
}

impl EmbeddingStore {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Matrix> {
        self.rows
            .get(id)
            .ok_or_else(|| Error::UnknownInstance(id.to_owned()))
    }

    pub fn open(path: impl AsRef<Path>, expected_d: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        if bytes.len() < 12 {
            return Err(Error::Truncated(name));
        }
        if &bytes[..8] != EMBEDDING_MAGIC {
            return Err(Error::BadMagic(name));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start {
            return Err(Error::Truncated(format!("{name}: header")));
        }
        let header: EmbeddingFileHeader = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| Error::Header(format!("{name}: {e}")))?;
        if header.d != expected_d {
            return Err(Error::DimensionMismatch(format!(
                "embedding file has d={}, config expects d={expected_d}",
                header.d
            )));
        }
        let payload = &bytes[payload_start..];
        let mut rows = HashMap::with_capacity(header.entries.len());
        for entry in header.entries {
            let n = entry.num_tokens * header.d;
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(Error::Truncated(format!("{name}: entry `{}`", entry.id)));
            }
            let values = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "embedding rows of `{}`",
                    entry.id
                )));
            }
            rows.insert(
                entry.id,
                Matrix::from_vec(entry.num_tokens, header.d, values),
            );
        }
        Ok(Self { d: header.d, rows })
    }

    /// Writes `(id, T×d rows)` pairs into a `RECEMB1` container.
    pub fn write(path: impl AsRef<Path>, d: usize, entries: &[(String, Matrix)]) -> Result<()> {
        let path = path.as_ref();
        let mut payload = Vec::new();
        let mut header = EmbeddingFileHeader {
            d,
            entries: Vec::with_capacity(entries.len()),
        };
        for (id, m) in entries {
            if m.cols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "entry `{id}` has {} columns, expected {d}",
                    m.cols()
                )));
            }
            header.entries.push(EmbeddingFileEntry {
                id: id.clone(),
                num_tokens: m.rows(),
                offset: payload.len() as u64,
            });
            for v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut write = |b: &[u8]| file.write_all(b).map_err(|e| Error::io(path, e));
        write(EMBEDDING_MAGIC)?;
        write(&(header_bytes.len() as u32).to_le_bytes())?;
        write(&header_bytes)?;
        write(&payload)
    }
}

/// The text encoder used by the concept head.
#[derive(Debug, Clone, PartialEq)]
pub enum TextEncoder {
    Toy(ToyEncoder),
    File(EmbeddingStore),
}

impl TextEncoder {
    pub fn from_config(cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.mode {
            EmbeddingMode::Toy => Ok(TextEncoder::Toy(ToyEncoder::new(
                cfg.vocab_size,
                cfg.d,
                cfg.seed,
            ))),
            EmbeddingMode::File => {
                let path = cfg.file.as_ref().expect("validated");
                Ok(TextEncoder::File(EmbeddingStore::open(path, cfg.d)?))
            }
        }
    }

    pub fn toy_table(&self) -> Option<&Matrix> {
        match self {
            TextEncoder::Toy(t) => Some(&t.table),
            TextEncoder::File(_) => None,
        }
    }

    /// Embeds one instance. File mode ignores the token text and returns the
    /// stored rows for `id`; the tokens are kept for display when the counts agree.
    pub fn embed(&self, id: &str, tokens: &[String]) -> Result<Embedded> {
        match self {
            TextEncoder::Toy(toy) => Ok(toy.embed(tokens)),
            TextEncoder::File(store) => {
                let rows = store.get(id)?.clone();
                let tokens = if tokens.len() == rows.rows() {
                    tokens.to_vec()
                } else {
                    (0..rows.rows()).map(|t| format!("[t{t}]")).collect()
                };
                Ok(Embedded {
                    tokens,
                    rows,
                    buckets: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_orders_segments() {
        let t = tokenize("What is X?", "X is a list.", None, 512).unwrap();
        assert_eq!(
            t,
            toks(&["what", "is", "x", "[sep]", "x", "is", "a", "list"])
        );
        let t = tokenize("q", "A--B", Some("Ctx here"), 512).unwrap();
        assert_eq!(t, toks(&["q", "[sep]", "a", "b", "[sep]", "ctx", "here"]));
    }

    #[test]
    fn tokenize_truncates_and_rejects_empty() {
        let t = tokenize(
            "one two three four five",
            "six seven eight nine ten",
            None,
            3,
        )
        .unwrap();
        assert_eq!(t, toks(&["one", "two", "three"]));
        assert!(tokenize("q", " ,.;", None, 10).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn repeated_tokens_differ_by_position_only() {
        let enc = ToyEncoder::new(128, 16, 7);
        let tokens = toks(&["x", "a", "b", "c", "d", "x"]);
        let e = enc.embed(&tokens);
        let p0 = positional_encoding(0, 16);
        let p5 = positional_encoding(5, 16);
        for j in 0..16 {
            let diff = e.rows[(0, j)] - e.rows[(5, j)];
            assert!((diff - (p0[j] - p5[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_encoder_is_deterministic() {
        assert_eq!(ToyEncoder::new(64, 8, 3), ToyEncoder::new(64, 8, 3));
        assert_ne!(ToyEncoder::new(64, 8, 3), ToyEncoder::new(64, 8, 4));
    }

    #[test]
    fn toy_row_norms_match_expectation() {
        let d = 32;
        let enc = ToyEncoder::new(4096, d, 1);
        let tokens: Vec<String> = (0..1000).map(|i| format!("tok{i}")).collect();
        let mut excess = 0.0;
        for tok in &tokens {
            let row = enc.table.row(enc.bucket(tok));
            excess += row.iter().map(|x| x * x).sum::<f64>();
        }
        // Table part contributes ~1 on average; position part is exact.
        let mean = excess / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean table norm^2 {mean}");
    }

    #[test]
    fn file_round_trip_and_dimension_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let m = Matrix::from_fn(3, 16, |i, j| (i * 16 + j) as f64 * 0.5);
        EmbeddingStore::write(&path, 16, &[("a".into(), m.clone())]).unwrap();
        let store = EmbeddingStore::open(&path, 16).unwrap();
        assert_eq!(store.get("a").unwrap(), &m);
        assert!(matches!(store.get("zz"), Err(Error::UnknownInstance(_))));
        assert!(matches!(
            EmbeddingStore::open(&path, 32),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
