//! Tokenization, vocabularies, fixed-length encoding, dataset ingestion and
//! GloVe-style embedding files.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const DEFAULT_MAX_LEN: usize = 200;

/// Lowercases and splits on whitespace; every punctuation or symbol character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `tokens` in order; repeats are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, token: String) -> bool {
        if self.index.contains_key(&token) {
            return false;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        true
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps the most frequent tokens seen at least `min_freq` times, ties broken
/// lexicographically, up to `max_size` entries including the reserved ones.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if max_size <= RESERVED.len() {
        return Err(Error::InvalidArgument(format!(
            "max_size {max_size} leaves no room beyond the {} reserved tokens",
            RESERVED.len()
        )));
    }
    if min_freq == 0 {
        return Err(Error::InvalidArgument("min_freq must be >= 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for tok in tokenize(doc.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// Non-PAD positions, including CLS and SEP.
    pub valid_length: usize,
}

/// `CLS tokens.. SEP PAD..`, exactly `max_len` ids. Long inputs are truncated
/// so that CLS and SEP always survive.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Encoded> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!("max_len must be >= 3, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP);
    let valid_length = ids.len();
    ids.resize(max_len, PAD);
    Ok(Encoded { ids, valid_length })
}

/// Content tokens of an encoded sequence (specials and padding dropped).
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD | CLS | SEP))
        .map(|&id| vocab.token(id).unwrap_or(RESERVED[UNK]).to_string())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::SingleLabel => "single_label",
            TaskKind::MultiLabel => "multi_label",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub labels: BTreeSet<String>,
}

impl LabeledExample {
    pub fn new<I, S>(text: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            text: text.into(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub task_kind: TaskKind,
    /// Sorted; position defines the output index of each label.
    pub label_space: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Dataset {
    /// Derives the label space and infers the task kind (multi-label iff any
    /// example carries more than one label).
    pub fn new(name: impl Into<String>, train: Vec<LabeledExample>, test: Vec<LabeledExample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if train.iter().chain(&test).any(|e| e.labels.is_empty()) {
            return Err(Error::InvalidArgument("example without labels".into()));
        }
        let space: BTreeSet<&String> = train.iter().chain(&test).flat_map(|e| &e.labels).collect();
        let multi = train.iter().chain(&test).any(|e| e.labels.len() > 1);
        Ok(Self {
            name: name.into(),
            task_kind: if multi {
                TaskKind::MultiLabel
            } else {
                TaskKind::SingleLabel
            },
            label_space: space.into_iter().cloned().collect(),
            train,
            test,
        })
    }

    /// Overrides the inferred task kind. Single-label is refused when some
    /// example has several labels.
    pub fn with_task_kind(mut self, kind: TaskKind) -> Result<Self> {
        if kind == TaskKind::SingleLabel && self.examples().any(|e| e.labels.len() > 1) {
            return Err(Error::InvalidArgument(format!(
                "dataset {} has multi-label examples",
                self.name
            )));
        }
        self.task_kind = kind;
        Ok(self)
    }

    /// Vocabulary of the training split.
    pub fn vocabulary(&self, max_size: usize, min_freq: usize) -> Result<Vocabulary> {
        let texts: Vec<&str> = self.train.iter().map(|e| e.text.as_str()).collect();
        build_vocab(&texts, max_size, min_freq)
    }

    pub fn examples(&self) -> impl Iterator<Item = &LabeledExample> {
        self.train.iter().chain(&self.test)
    }

    pub fn classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_space.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Sorted label indices of an example.
    pub fn label_indices(&self, example: &LabeledExample) -> Vec<usize> {
        example.labels.iter().filter_map(|l| self.label_index(l)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Jsonl => "jsonl",
            DataFormat::Csv => "csv",
        }
    }
}

#[derive(Deserialize, Serialize)]
struct JsonRecord {
    text: String,
    labels: Vec<String>,
}

#[derive(Deserialize, Serialize)]
struct CsvRecord {
    text: String,
    labels: String,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn make_example(path: &Path, line: usize, text: String, labels: Vec<String>) -> Result<LabeledExample> {
    let labels: BTreeSet<String> = labels
        .into_iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if labels.is_empty() {
        return Err(parse_err(path, line, "record has no labels"));
    }
    Ok(LabeledExample { text, labels })
}

/// Reads one split file. Blank JSONL lines are skipped.
pub fn read_examples(path: &Path, format: DataFormat) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    match format {
        DataFormat::Jsonl => {
            let reader = BufReader::new(fs::File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
                out.push(make_example(path, i + 1, rec.text, rec.labels)?);
            }
        }
        DataFormat::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(path, 1, e.to_string()))?;
            for rec in reader.deserialize::<CsvRecord>() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    parse_err(path, line, e.to_string())
                })?;
                let line = out.len() + 2;
                let labels = rec.labels.split('|').map(str::to_string).collect();
                out.push(make_example(path, line, rec.text, labels)?);
            }
        }
    }
    Ok(out)
}

pub fn write_examples(path: &Path, format: DataFormat, examples: &[LabeledExample]) -> Result<()> {
    match format {
        DataFormat::Jsonl => {
            let mut buf = String::new();
            for e in examples {
                let rec = JsonRecord {
                    text: e.text.clone(),
                    labels: e.labels.iter().cloned().collect(),
                };
                buf.push_str(&serde_json::to_string(&rec)?);
                buf.push('\n');
            }
            fs::write(path, buf)?;
        }
        DataFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
            for e in examples {
                let labels: Vec<&str> = e.labels.iter().map(String::as_str).collect();
                w.serialize(CsvRecord {
                    text: e.text.clone(),
                    labels: labels.join("|"),
                })
                .map_err(|e| Error::Io(e.into()))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn split_path(dir: &Path, split: &str, format: DataFormat) -> PathBuf {
    dir.join(format!("{split}.{}", format.extension()))
}

/// Loads `train.<ext>` and `test.<ext>` from a dataset directory. The
/// dataset is named after the directory.
pub fn load_dataset(dir: impl AsRef<Path>, format: DataFormat) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = read_examples(&split_path(dir, "train", format), format)?;
    let test = read_examples(&split_path(dir, "test", format), format)?;
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(name, train, test)
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_examples(&split_path(dir, "train", format), format, &dataset.train)?;
    write_examples(&split_path(dir, "test", format), format, &dataset.test)?;
    Ok(())
}

/// Pre-trained static word vectors with reserved rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub dim: usize,
    /// Row-major `vocab.len() x dim`.
    pub matrix: Vec<f32>,
}

impl EmbeddingTable {
    pub fn row(&self, id: usize) -> Option<&[f32]> {
        (id < self.vocab.len()).then(|| &self.matrix[id * self.dim..(id + 1) * self.dim])
    }

    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        self.vocab.get(token).and_then(|id| self.row(id))
    }
}

/// Reads a GloVe text file (`token v1 .. vd` per line). UNK, CLS and SEP rows
/// are drawn from normal(0, 0.02) with `seed`; the PAD row is zero. A token
/// listed twice keeps its first vector.
pub fn load_embeddings(path: impl AsRef<Path>, seed: u64) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut tokens = Vec::new();
    let mut vectors: Vec<f32> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default().to_string();
        let values: Vec<f32> = parts
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f32>()
                    .map_err(|e| parse_err(path, i + 1, format!("{p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(parse_err(path, i + 1, "line has no vector components"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("inconsistent dimension: expected {d}, found {}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if RESERVED.contains(&token.as_str()) || !seen.insert(token.clone()) {
            continue;
        }
        tokens.push(token);
        vectors.extend(values);
    }
    let dim = dim.ok_or(Error::Empty("embedding file"))?;
    let vocab = Vocabulary::from_tokens(tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut matrix = vec![0.0f32; RESERVED.len() * dim];
    for v in &mut matrix[dim..] {
        *v = normal.sample(&mut rng);
    }
    matrix.extend(vectors);
    Ok(EmbeddingTable { vocab, dim, matrix })
}
