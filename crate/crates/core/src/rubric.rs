//! Grading data model: rubric shapes, labeled instances, dataset I/O,
//! deterministic splits and the synthetic corpus generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Shape of a grading task: `K` concepts scored `0..=M`, grades `0..=S`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricSpec {
    pub num_concepts: usize,
    pub max_concept_level: usize,
    pub max_grade: usize,
    pub concept_names: Vec<String>,
}

impl RubricSpec {
    pub fn new(
        num_concepts: usize,
        max_concept_level: usize,
        max_grade: usize,
        concept_names: Vec<String>,
    ) -> Result<Self> {
        let spec = Self {
            num_concepts,
            max_concept_level,
            max_grade,
            concept_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with generated names `concept_0 .. concept_{K-1}`.
    pub fn with_default_names(k: usize, m: usize, s: usize) -> Result<Self> {
        Self::new(k, m, s, (0..k).map(|i| format!("concept_{i}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 {
            return Err(Error::InvalidSpec("num_concepts must be >= 1".into()));
        }
        if self.max_concept_level == 0 {
            return Err(Error::InvalidSpec("max_concept_level must be >= 1".into()));
        }
        if self.max_grade == 0 {
            return Err(Error::InvalidSpec("max_grade must be >= 1".into()));
        }
        if self.concept_names.len() != self.num_concepts {
            return Err(Error::InvalidSpec(format!(
                "expected {} concept names, got {}",
                self.num_concepts,
                self.concept_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.concept_names {
            if name.is_empty() {
                return Err(Error::InvalidSpec("empty concept name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate concept name `{name}`"
                )));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.max_concept_level + 1
    }

    pub fn num_grades(&self) -> usize {
        self.max_grade + 1
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: RubricSpec = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One labeled response. Serialized as one line of the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingInstance {
    pub id: String,
    pub question: String,
    pub response: String,
    pub context: Option<String>,
    #[serde(rename = "concepts")]
    pub concept_labels: Vec<usize>,
    pub grade: usize,
}

impl GradingInstance {
    /// Concept labels divided by `M`.
    pub fn normalized_labels(&self, spec: &RubricSpec) -> Vec<f64> {
        let m = spec.max_concept_level as f64;
        self.concept_labels.iter().map(|&c| c as f64 / m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: RubricSpec,
    pub instances: Vec<GradingInstance>,
    /// Empty until [`assign_splits`] runs.
    pub splits: BTreeMap<String, Split>,
}

/// Wire form of a record; integers are read signed so negative labels are
/// reported as range errors rather than parse errors.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    response: String,
    context: Option<String>,
    concepts: Vec<i64>,
    grade: i64,
}

impl Dataset {
    pub fn new(spec: RubricSpec, instances: Vec<GradingInstance>) -> Result<Self> {
        spec.validate()?;
        let mut seen = HashSet::new();
        for (i, inst) in instances.iter().enumerate() {
            validate_instance(&spec, inst).map_err(|message| Error::Record {
                line: i + 1,
                message,
            })?;
            if !seen.insert(inst.id.clone()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Self {
            spec,
            instances,
            splits: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GradingInstance> {
        self.instances.iter().find(|inst| inst.id == id)
    }

    /// Instances assigned to `split`, in dataset order.
    pub fn subset(&self, split: Split) -> Dataset {
        let instances = self
            .instances
            .iter()
            .filter(|inst| self.splits.get(&inst.id) == Some(&split))
            .cloned()
            .collect();
        Dataset {
            spec: self.spec.clone(),
            instances,
            splits: BTreeMap::new(),
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let mut sizes = (0, 0, 0);
        for split in self.splits.values() {
            match split {
                Split::Train => sizes.0 += 1,
                Split::Dev => sizes.1 += 1,
                Split::Test => sizes.2 += 1,
            }
        }
        sizes
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instance serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn validate_instance(spec: &RubricSpec, inst: &GradingInstance) -> std::result::Result<(), String> {
    if inst.id.is_empty() {
        return Err("empty id".into());
    }
    if inst.concept_labels.len() != spec.num_concepts {
        return Err(format!(
            "expected {} concept labels, got {}",
            spec.num_concepts,
            inst.concept_labels.len()
        ));
    }
    for (k, &c) in inst.concept_labels.iter().enumerate() {
        if c > spec.max_concept_level {
            return Err(format!(
                "concept {k} label {c} outside [0, {}]",
                spec.max_concept_level
            ));
        }
    }
    if inst.grade > spec.max_grade {
        return Err(format!(
            "grade {} outside [0, {}]",
            inst.grade, spec.max_grade
        ));
    }
    Ok(())
}

/// Reads a line-delimited dataset and validates every record against the spec
/// file. Blank lines are skipped; record order is preserved.
pub fn load_dataset(path: impl AsRef<Path>, spec_path: impl AsRef<Path>) -> Result<Dataset> {
    let spec = RubricSpec::load(spec_path)?;
    load_dataset_with_spec(path, spec)
}

pub fn load_dataset_with_spec(path: impl AsRef<Path>, spec: RubricSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        let inst = from_raw(&spec, raw).map_err(|message| Error::Record {
            line: line_no,
            message,
        })?;
        if !seen.insert(inst.id.clone()) {
            return Err(Error::DuplicateId(inst.id));
        }
        instances.push(inst);
    }
    if instances.is_empty() {
        log::warn!("dataset {} contains no instances", path.display());
    }
    Ok(Dataset {
        spec,
        instances,
        splits: BTreeMap::new(),
    })
}

fn from_raw(spec: &RubricSpec, raw: RawRecord) -> std::result::Result<GradingInstance, String> {
    if raw.concepts.len() != spec.num_concepts {
        return Err(format!(
            "expected {} concept labels, got {}",
            spec.num_concepts,
            raw.concepts.len()
        ));
    }
    let mut labels = Vec::with_capacity(raw.concepts.len());
    for (k, &c) in raw.concepts.iter().enumerate() {
        if c < 0 || c as u64 > spec.max_concept_level as u64 {
            return Err(format!(
                "concept {k} label {c} outside [0, {}]",
                spec.max_concept_level
            ));
        }
        labels.push(c as usize);
    }
    if raw.grade < 0 || raw.grade as u64 > spec.max_grade as u64 {
        return Err(format!(
            "grade {} outside [0, {}]",
            raw.grade, spec.max_grade
        ));
    }
    let inst = GradingInstance {
        id: raw.id,
        question: raw.question,
        response: raw.response,
        context: raw.context,
        concept_labels: labels,
        grade: raw.grade as usize,
    };
    validate_instance(spec, &inst)?;
    Ok(inst)
}

/// Split sizes for `n` items: floor each share, then hand the remainder out
/// one at a time to train, then dev, then test (skipping zero ratios).
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(ratios) {
        *c = (n as f64 * r + 1e-9).floor() as usize;
    }
    let mut remainder = n.saturating_sub(counts.iter().sum());
    while remainder > 0 {
        let before = remainder;
        for (c, r) in counts.iter_mut().zip(ratios) {
            if remainder > 0 && r > 0.0 {
                *c += 1;
                remainder -= 1;
            }
        }
        if before == remainder {
            counts[0] += remainder;
            break;
        }
    }
    counts
}

/// Seeded shuffle of ids, then cut by cumulative ratio (train, dev, test).
pub fn assign_splits(mut dataset: Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
    if ratios.iter().any(|&r| r < 0.0 || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let counts = split_counts(dataset.len(), ratios);
    let mut ids: Vec<String> = dataset.instances.iter().map(|i| i.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut splits = BTreeMap::new();
    let mut cursor = ids.into_iter();
    for (split, count) in [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .zip(counts)
    {
        for id in cursor.by_ref().take(count) {
            splits.insert(id, split);
        }
    }
    dataset.splits = splits;
    Ok(dataset)
}

const FILLER_WORDS: [&str; 50] = [
    "the", "answer", "uses", "some", "idea", "which", "then", "leads", "into", "result", "because",
    "data", "value", "step", "order", "after", "before", "where", "each", "part", "first",
    "second", "also", "could", "might", "often", "simply", "every", "point", "case", "model",
    "memory", "list", "item", "node", "field", "state", "input", "output", "change", "across",
    "within", "while", "until", "method", "object", "array", "pointer", "loop", "call",
];

/// Equicorrelation of the default synthetic latent.
pub const SYNTHETIC_RHO: f64 = 0.7;
/// Grade noise of the default synthetic corpus.
pub const SYNTHETIC_NOISE_SD: f64 = 0.3;

/// Token that marks evidence for concept `k` at level `level`.
pub fn level_token(k: usize, level: usize) -> String {
    format!("c{k}lvl{level}")
}

/// Samples a corpus whose labels come from a correlated Gaussian latent,
/// binned into equal-probability ordinal levels, and whose text carries
/// level-tagged evidence tokens for every concept.
pub fn generate_synthetic(
    spec: &RubricSpec,
    n: usize,
    latent_correlation: &Matrix,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_concepts;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise_sd must be >= 0, got {noise_sd}"
        )));
    }
    if latent_correlation.shape() != (k, k) {
        return Err(Error::DimensionMismatch(format!(
            "latent correlation is {:?}, expected {k}x{k}",
            latent_correlation.shape()
        )));
    }
    for i in 0..k {
        if (latent_correlation[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "latent correlation needs unit diagonal".into(),
            ));
        }
        for j in 0..i {
            if (latent_correlation[(i, j)] - latent_correlation[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidArgument(
                    "latent correlation must be symmetric".into(),
                ));
            }
        }
    }
    // A tiny jitter admits rank-deficient PSD inputs such as rho = 1.
    let mut jittered = latent_correlation.to_nalgebra();
    for i in 0..k {
        jittered[(i, i)] += 1e-10;
    }
    let chol = jittered
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("latent correlation".into()))?;
    let factor = chol.l();

    let m = spec.max_concept_level;
    let std_normal = Normal::standard();
    let cuts: Vec<f64> = (1..=m)
        .map(|i| std_normal.inverse_cdf(i as f64 / (m + 1) as f64))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(n);
    for idx in 0..n {
        let e: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..k)
            .map(|i| (0..=i).map(|j| factor[(i, j)] * e[j]).sum())
            .collect();
        let labels: Vec<usize> = z
            .iter()
            .map(|&zk| cuts.iter().filter(|&&c| zk >= c).count())
            .collect();
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_sd;
        let mean_level = labels.iter().map(|&c| c as f64 / m as f64).sum::<f64>() / k as f64;
        let raw_grade = (spec.max_grade as f64 * mean_level + noise).round();
        let grade = raw_grade.clamp(0.0, spec.max_grade as f64) as usize;

        let mut words: Vec<String> = Vec::new();
        for (concept, &level) in labels.iter().enumerate() {
            for _ in 0..=level {
                words.push(level_token(concept, level));
            }
            for _ in 0..4 {
                words.push(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string());
            }
        }
        instances.push(GradingInstance {
            id: format!("syn-{idx:05}"),
            question: "Explain how the procedure works.".into(),
            response: words.join(" "),
            context: None,
            concept_labels: labels,
            grade,
        });
    }
    Dataset::new(spec.clone(), instances)
}

/// Correlation matrix with `rho` everywhere off the diagonal.
pub fn equicorrelation(k: usize, rho: f64) -> Matrix {
    Matrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
}
