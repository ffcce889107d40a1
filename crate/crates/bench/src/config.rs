//! Benchmark configuration files (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use febench::cnn::{DEFAULT_FILTERS, DEFAULT_KERNEL_SIZES, DEFAULT_THRESHOLD};
use febench::encoder::Preset;
use febench::synthetic::SyntheticSpec;
use febench::text::{DataFormat, TaskKind, DEFAULT_MAX_LEN};
use febench::train::{default_epochs, Mode, DEFAULT_LEARNING_RATE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

pub const DEFAULT_REPEATS: usize = 3;
pub const DEFAULT_OUTPUT_DIR: &str = "bench-out";
/// Environment variable that overrides the configured output directory.
pub const OUTPUT_ENV: &str = "BENCH_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Master seed; run `i` of every cell trains with `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Cells trained concurrently.
    #[serde(default = "one")]
    pub parallel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Cell id that relative epoch times are divided by.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub head: HeadSection,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(rename = "cell")]
    pub cells: Vec<CellConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding `train.<ext>` and `test.<ext>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generate a keyword corpus instead of reading files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_format")]
    pub format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "one")]
    pub min_freq: usize,
    /// GloVe-style text file used by `GloVe` cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// Seed of the random encoder weights shared by all cells of a preset;
    /// the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_filters")]
    pub filters: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            kernel_sizes: default_kernels(),
            filters: default_filters(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_fe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_fit: Option<usize>,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            threshold: default_threshold(),
            epochs_fe: None,
            epochs_fit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub preset: Preset,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Encoder weights file replacing the random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl CellConfig {
    pub fn id(&self) -> String {
        cell_id(self.preset, self.mode)
    }
}

pub fn cell_id(preset: Preset, mode: Mode) -> String {
    format!("{}-{}", preset.name(), mode.name())
}

fn default_repeats() -> usize {
    DEFAULT_REPEATS
}
fn one() -> usize {
    1
}
fn default_format() -> DataFormat {
    DataFormat::Jsonl
}
fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}
fn default_vocab_size() -> usize {
    30_000
}
fn default_kernels() -> Vec<usize> {
    DEFAULT_KERNEL_SIZES.to_vec()
}
fn default_filters() -> usize {
    DEFAULT_FILTERS
}
fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// Everything a cell needs to train, with defaults and overrides applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedCell {
    pub id: String,
    pub preset: Preset,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub weights: Option<PathBuf>,
}

impl BenchmarkConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset.path.as_mut().map(fix);
        self.dataset.embeddings.as_mut().map(fix);
        self.output_dir.as_mut().map(fix);
        for cell in &mut self.cells {
            cell.weights.as_mut().map(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.cells.is_empty() {
            return bad("at least one [[cell]] is required".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.parallel == 0 {
            return bad("parallel must be at least 1".into());
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => return bad("dataset takes either path or synthetic, not both".into()),
            (None, None) => return bad("dataset needs a path or a synthetic spec".into()),
            _ => {}
        }
        if self.head.kernel_sizes.is_empty() || self.head.kernel_sizes.contains(&0) || self.head.filters == 0 {
            return bad("head needs non-empty positive kernel sizes and filters".into());
        }
        let mut seen = BTreeSet::new();
        for cell in &self.cells {
            if !seen.insert(cell.id()) {
                return bad(format!("cell {} is configured twice", cell.id()));
            }
            let r = self.resolve(cell)?;
            if r.batch_size == 0
                || r.epochs == 0
                || r.learning_rate.is_nan()
                || r.learning_rate <= 0.0
                || !(0.0..=1.0).contains(&r.threshold)
            {
                return bad(format!(
                    "cell {} has an invalid batch size, epochs, learning rate or threshold",
                    r.id
                ));
            }
        }
        if let Some(b) = &self.baseline {
            if !seen.contains(b) {
                return bad(format!("baseline {b} is not a configured cell"));
            }
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        match (&self.dataset.synthetic, &self.dataset.path) {
            (Some(spec), _) => spec.name.clone(),
            (None, Some(p)) => p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            (None, None) => String::new(),
        }
    }

    pub fn resolve(&self, cell: &CellConfig) -> Result<ResolvedCell> {
        let configured = match cell.mode {
            Mode::FE => self.defaults.epochs_fe,
            Mode::FiT => self.defaults.epochs_fit,
        };
        let table = default_epochs(&self.dataset_name()).map(|(fe, fit)| match cell.mode {
            Mode::FE => fe,
            Mode::FiT => fit,
        });
        let epochs = cell.epochs.or(configured).or(table).ok_or_else(|| {
            BenchError::Config(format!(
                "cell {}: no epoch count (set epochs, defaults.epochs_{})",
                cell.id(),
                cell.mode.name().to_lowercase()
            ))
        })?;
        Ok(ResolvedCell {
            id: cell.id(),
            preset: cell.preset,
            mode: cell.mode,
            epochs,
            batch_size: cell.batch_size.unwrap_or(cell.mode.default_batch_size()),
            learning_rate: cell.learning_rate.unwrap_or(self.defaults.learning_rate),
            threshold: cell.threshold.unwrap_or(self.defaults.threshold),
            weights: cell.weights.clone(),
        })
    }

    pub fn encoder_seed(&self) -> u64 {
        self.encoder.seed.unwrap_or(self.seed)
    }

    /// SHA-256 over the settings that determine results: the output
    /// directory and the parallelism limit are left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        canonical.parallel = 1;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
