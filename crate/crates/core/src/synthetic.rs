//! Keyword-driven synthetic corpora.
//!
//! Every document is filler drawn uniformly from `w0 … w{vocab-1}`, plus one
//! marker token per gold label (`kw0`, `kw1`, …) at a random position. Markers
//! never appear as filler, so a label is present exactly when its marker is.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Dataset, LabeledExample, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelModel {
    Single,
    /// Independent labels; `density` is the target mean label count.
    Multi {
        density: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub classes: usize,
    pub train_docs: usize,
    pub test_docs: usize,
    /// Number of distinct filler words.
    pub vocab: usize,
    /// Filler tokens per document.
    #[serde(default = "default_length")]
    pub doc_length: usize,
    pub labels: LabelModel,
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_length() -> usize {
    6
}

impl SyntheticSpec {
    pub fn single(classes: usize, train_docs: usize, test_docs: usize, seed: u64) -> Self {
        Self {
            name: default_name(),
            classes,
            train_docs,
            test_docs,
            vocab: 500,
            doc_length: default_length(),
            labels: LabelModel::Single,
            seed,
        }
    }

    pub fn multi(classes: usize, density: f64, train_docs: usize, test_docs: usize, seed: u64) -> Self {
        Self {
            labels: LabelModel::Multi { density },
            ..Self::single(classes, train_docs, test_docs, seed)
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.labels {
            LabelModel::Single => TaskKind::SingleLabel,
            LabelModel::Multi { .. } => TaskKind::MultiLabel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let docs = self.train_docs + self.test_docs;
        if self.classes < 2 {
            return Err(Error::InvalidConfig("synthetic data needs at least 2 classes".into()));
        }
        if docs < self.classes || self.train_docs == 0 || self.test_docs == 0 {
            return Err(Error::InvalidConfig(format!(
                "{} train / {} test documents cannot cover {} classes",
                self.train_docs, self.test_docs, self.classes
            )));
        }
        if self.vocab == 0 {
            return Err(Error::InvalidConfig("filler vocabulary is empty".into()));
        }
        if let LabelModel::Multi { density } = self.labels {
            if !(density >= 1.0 && density < self.classes as f64) {
                return Err(Error::InvalidConfig(format!(
                    "label density {density} not reachable with {} labels",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

pub fn marker(class: usize) -> String {
    format!("kw{class}")
}

pub fn label_name(class: usize) -> String {
    format!("label{class}")
}

/// Mean size of a non-empty subset of `c` labels drawn independently with
/// probability `p`.
fn conditional_density(p: f64, c: usize) -> f64 {
    let nonempty = 1.0 - (1.0 - p).powi(c as i32);
    c as f64 * p / nonempty
}

/// Inclusion probability whose non-empty label sets average `density` labels.
pub fn inclusion_probability(density: f64, classes: usize) -> f64 {
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if conditional_density(mid, classes) < density {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn document(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, labels: &[usize]) -> String {
    let mut tokens: Vec<String> = (0..spec.doc_length)
        .map(|_| format!("w{}", rng.random_range(0..spec.vocab)))
        .collect();
    for &c in labels {
        let at = rng.random_range(0..=tokens.len());
        tokens.insert(at, marker(c));
    }
    tokens.join(" ")
}

/// Deterministic corpus for `spec`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let docs = spec.train_docs + spec.test_docs;
    let label_sets: Vec<Vec<usize>> = match spec.labels {
        LabelModel::Single => {
            // Balanced and shuffled, so every class shows up.
            let mut classes: Vec<usize> = (0..docs).map(|i| i % spec.classes).collect();
            classes.shuffle(&mut rng);
            classes.into_iter().map(|c| vec![c]).collect()
        }
        LabelModel::Multi { density } => {
            let p = inclusion_probability(density, spec.classes);
            (0..docs)
                .map(|_| loop {
                    let set: Vec<usize> = (0..spec.classes).filter(|_| rng.random_bool(p)).collect();
                    if !set.is_empty() {
                        break set;
                    }
                })
                .collect()
        }
    };
    let mut examples: Vec<LabeledExample> = label_sets
        .iter()
        .map(|set| LabeledExample::new(document(&mut rng, spec, set), set.iter().map(|&c| label_name(c))))
        .collect();
    let test = examples.split_off(spec.train_docs);
    Dataset::new(spec.name.clone(), examples, test)?.with_task_kind(spec.task_kind())
}
