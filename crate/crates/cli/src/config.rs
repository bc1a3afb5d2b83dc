//! Experiment configuration: benchmark, optimizer, similarity and sweep
//! settings in one JSON document.

use std::path::{Path, PathBuf};

use mmdag::benchgen::BenchmarkConfig;
use mmdag::learner::{HyperParams, SimilarityMatrix};
use mmdag::sem::{ComponentRule, EmbeddingConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::methods::Method;

/// Version stamped into every file this tool writes.
pub const FORMAT_VERSION: u32 = 1;

/// Environment variable that replaces the configured seeds.
pub const SEED_ENV: &str = "MMDAG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub benchmark: BenchmarkSection,
    pub hyperparams: HyperParams,
    pub similarity: SimilarityConfig,
    pub embedding: EmbeddingSection,
    pub sweep: SweepSection,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            benchmark: BenchmarkSection::default(),
            hyperparams: HyperParams::default(),
            similarity: SimilarityConfig::default(),
            embedding: EmbeddingSection::default(),
            sweep: SweepSection::default(),
            methods: Method::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub nodes: usize,
    pub tasks: usize,
    pub samples: usize,
    pub basis_size: usize,
    pub er_edge_prob: f64,
    pub noise_std: f64,
    pub grid_len: usize,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            nodes: b.nodes,
            tasks: b.tasks,
            samples: b.samples,
            basis_size: b.basis_size,
            er_edge_prob: b.er_edge_prob,
            noise_std: b.noise_std,
            grid_len: b.grid_len,
            seeds: (0..10).collect(),
        }
    }
}

impl BenchmarkSection {
    /// Generator settings for one seed, optionally overriding `N` and `L`.
    pub fn generator(&self, seed: u64, samples: Option<usize>, tasks: Option<usize>) -> BenchmarkConfig {
        BenchmarkConfig {
            nodes: self.nodes,
            tasks: tasks.unwrap_or(self.tasks),
            samples: samples.unwrap_or(self.samples),
            basis_size: self.basis_size,
            er_edge_prob: self.er_edge_prob,
            noise_std: self.noise_std,
            grid_len: self.grid_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimilarityConfig {
    Uniform { value: f64 },
    Table { values: Vec<Vec<f64>> },
    InverseDistance { coordinates: Vec<Vec<f64>> },
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig::Uniform { value: 1.0 }
    }
}

impl SimilarityConfig {
    pub fn build(&self, tasks: usize) -> Result<SimilarityMatrix> {
        let s = match self {
            SimilarityConfig::Uniform { value } => SimilarityMatrix::uniform(tasks, *value)?,
            SimilarityConfig::Table { values } => {
                if values.len() != tasks || values.iter().any(|r| r.len() != tasks) {
                    return Err(CliError::validation(format!(
                        "similarity table must be {tasks}x{tasks}"
                    )));
                }
                SimilarityMatrix::new(DMatrix::from_fn(tasks, tasks, |i, j| values[i][j]))?
            }
            SimilarityConfig::InverseDistance { coordinates } => {
                if coordinates.len() != tasks {
                    return Err(CliError::validation(format!(
                        "similarity needs coordinates for {tasks} tasks, got {}",
                        coordinates.len()
                    )));
                }
                SimilarityMatrix::inverse_distance(coordinates)?
            }
        };
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// FPCA components per functional node; ignored when `auto_components`.
    pub components: usize,
    /// Pick the smallest count reaching `variance_threshold`.
    pub auto_components: bool,
    pub variance_threshold: f64,
    pub center: bool,
    /// Interval count of the MV-DAG preprocessing.
    pub mvdag_bins: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            components: 3,
            auto_components: false,
            variance_threshold: 0.95,
            center: false,
            mvdag_bins: 10,
        }
    }
}

impl EmbeddingSection {
    pub fn config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            components: if self.auto_components {
                ComponentRule::ExplainedVariance(self.variance_threshold)
            } else {
                ComponentRule::Fixed(self.components)
            },
            center: self.center,
            vector_pca: None,
        }
    }
}

/// Grid of `(N, L)` cells for `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub samples: Vec<usize>,
    pub tasks: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            samples: vec![10, 50, 200],
            tasks: vec![4],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&compact))
    }

    /// Replaces the seed list with `MMDAG_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed: u64 = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::validation(format!("{SEED_ENV} must be an unsigned integer, got '{v}'")))?;
                self.set_seed(seed);
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.benchmark.seeds = vec![seed];
        self.hyperparams.seed = seed;
    }

    pub fn first_seed(&self) -> u64 {
        self.benchmark.seeds.first().copied().unwrap_or(0)
    }

    /// Checks every section, listing all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.format_version != FORMAT_VERSION {
            bad.push(format!("format_version must be {FORMAT_VERSION}"));
        }
        if let Err(e) = self.hyperparams.validate() {
            bad.push(e.to_string());
        }
        if self.benchmark.seeds.is_empty() {
            bad.push("benchmark.seeds must not be empty".to_string());
        }
        if let Err(e) = self.benchmark.generator(0, None, None).validate() {
            bad.push(e.to_string());
        }
        if self.sweep.samples.contains(&0) || self.sweep.samples.is_empty() {
            bad.push("sweep.samples must be nonempty and positive".to_string());
        }
        if self.sweep.tasks.contains(&0) || self.sweep.tasks.is_empty() {
            bad.push("sweep.tasks must be nonempty and positive".to_string());
        }
        if self.methods.is_empty() {
            bad.push("methods must not be empty".to_string());
        }
        if self.embedding.components == 0 {
            bad.push("embedding.components must be positive".to_string());
        }
        if !(self.embedding.variance_threshold > 0.0 && self.embedding.variance_threshold <= 1.0) {
            bad.push("embedding.variance_threshold must lie in (0, 1]".to_string());
        }
        if self.embedding.mvdag_bins == 0 {
            bad.push("embedding.mvdag_bins must be positive".to_string());
        }
        match &self.similarity {
            SimilarityConfig::Table { values } => {
                if let Err(e) = self.similarity.build(values.len()) {
                    bad.push(e.to_string());
                }
            }
            other => {
                if let Err(e) = other.build(self.benchmark.tasks) {
                    bad.push(e.to_string());
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(bad.join("; ")))
        }
    }
}
