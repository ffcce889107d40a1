//! Token-sequence encoders: a static embedding table or a BERT-shaped
//! transformer, either of which can be frozen.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::text::{EmbeddingTable, PAD};
use crate::weights::{Bound, ParamMap};

pub const INIT_STD: f32 = 0.02;
/// Position table size of the transformer presets.
pub const DEFAULT_MAX_POSITIONS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Static,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub frozen: bool,
}

impl EncoderConfig {
    pub fn transformer(layers: usize, hidden: usize, heads: usize, vocab_size: usize) -> Self {
        Self {
            kind: EncoderKind::Transformer,
            hidden,
            layers,
            heads,
            ffn: 4 * hidden,
            vocab_size,
            max_positions: DEFAULT_MAX_POSITIONS,
            frozen: false,
        }
    }

    pub fn static_table(vocab_size: usize, hidden: usize) -> Self {
        Self {
            kind: EncoderKind::Static,
            hidden,
            layers: 0,
            heads: 1,
            ffn: 0,
            vocab_size,
            max_positions: usize::MAX,
            frozen: false,
        }
    }

    pub fn with_frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden == 0 || self.vocab_size == 0 {
            return bad("hidden size and vocabulary size must be positive".into());
        }
        if self.kind == EncoderKind::Transformer {
            if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
                return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
            }
            if self.layers > 0 && self.ffn == 0 {
                return bad("feed-forward size must be positive".into());
            }
            if self.max_positions == 0 {
                return bad("max_positions must be positive".into());
            }
        }
        Ok(())
    }

    /// Parameter names and shapes, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut out = vec![("encoder.embeddings.word".to_string(), vec![self.vocab_size, h])];
        if self.kind == EncoderKind::Static {
            return out;
        }
        out.push(("encoder.embeddings.position".into(), vec![self.max_positions, h]));
        out.push(("encoder.embeddings.ln.scale".into(), vec![h]));
        out.push(("encoder.embeddings.ln.offset".into(), vec![h]));
        for i in 0..self.layers {
            let p = |s: &str| format!("encoder.layer.{i}.{s}");
            for proj in ["query", "key", "value", "output"] {
                out.push((p(&format!("attention.{proj}.weight")), vec![h, h]));
                out.push((p(&format!("attention.{proj}.bias")), vec![h]));
            }
            out.push((p("attention.ln.scale"), vec![h]));
            out.push((p("attention.ln.offset"), vec![h]));
            out.push((p("ffn.inner.weight"), vec![h, self.ffn]));
            out.push((p("ffn.inner.bias"), vec![self.ffn]));
            out.push((p("ffn.outer.weight"), vec![self.ffn, h]));
            out.push((p("ffn.outer.bias"), vec![h]));
            out.push((p("ffn.ln.scale"), vec![h]));
            out.push((p("ffn.ln.offset"), vec![h]));
        }
        out
    }
}

/// Exact number of scalar parameters.
pub fn param_count(config: &EncoderConfig) -> usize {
    config
        .param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// The encoder grid. Names follow the usual BERT checkpoint shorthand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "GloVe")]
    Glove,
    #[serde(rename = "BERT-Tiny")]
    BertTiny,
    #[serde(rename = "BERT-L-2")]
    BertL2,
    #[serde(rename = "BERT-L-12")]
    BertL12,
    #[serde(rename = "BERT")]
    Bert,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Glove,
        Preset::BertTiny,
        Preset::BertL2,
        Preset::BertL12,
        Preset::Bert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Glove => "GloVe",
            Preset::BertTiny => "BERT-Tiny",
            Preset::BertL2 => "BERT-L-2",
            Preset::BertL12 => "BERT-L-12",
            Preset::Bert => "BERT",
        }
    }

    /// Static presets take their width from the embedding file; 300 otherwise.
    pub fn config(self, vocab_size: usize) -> EncoderConfig {
        match self {
            Preset::Glove => EncoderConfig::static_table(vocab_size, 300),
            Preset::BertTiny => EncoderConfig::transformer(2, 128, 2, vocab_size),
            Preset::BertL2 => EncoderConfig::transformer(2, 768, 12, vocab_size),
            Preset::BertL12 => EncoderConfig::transformer(12, 128, 2, vocab_size),
            Preset::Bert => EncoderConfig::transformer(12, 768, 12, vocab_size),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let p = match norm.as_str() {
            "glove" | "static" => Preset::Glove,
            "bert-tiny" | "tiny" => Preset::BertTiny,
            "bert-l-2" | "l-2" | "bert-l2" => Preset::BertL2,
            "bert-l-12" | "l-12" | "bert-l12" | "l-12/h-128" => Preset::BertL12,
            "bert" | "bert-base" | "base" => Preset::Bert,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown encoder preset {s:?} (expected one of GloVe, BERT-Tiny, BERT-L-2, BERT-L-12, BERT)"
                )))
            }
        };
        Ok(p)
    }
}

/// Seeded random weights: matrices from normal(0, 0.02), layer-norm scales
/// one, biases and offsets zero. The PAD embedding row is zero.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<ParamMap<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut params = ParamMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".scale") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let mut t = Tensor::new(shape, data)?;
        if name == "encoder.embeddings.word" {
            let h = config.hidden;
            t.data_mut()[PAD * h..(PAD + 1) * h].fill(0.0);
        }
        params.insert(name, t.with_requires_grad(!config.frozen));
    }
    Ok(params)
}

/// Static-encoder weights from a pre-trained embedding table.
pub fn static_weights(table: &EmbeddingTable) -> Result<(EncoderConfig, ParamMap<f32>)> {
    let config = EncoderConfig::static_table(table.vocab.len(), table.dim);
    let mut params = ParamMap::new();
    params.insert(
        "encoder.embeddings.word",
        Tensor::new(vec![table.vocab.len(), table.dim], table.matrix.clone())?.with_requires_grad(true),
    );
    Ok((config, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real = f32> {
    pub config: EncoderConfig,
    pub weights: ParamMap<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, mut weights: ParamMap<T>) -> Result<Self> {
        config.validate()?;
        weights.validate_against(&config.param_shapes())?;
        weights.set_requires_grad(!config.frozen);
        Ok(Self { config, weights })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.config.frozen = frozen;
        self.weights.set_requires_grad(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.config.frozen
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        self.weights.bind(tape, "encoder")
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Hidden states `[ids.len() x H]`. Keys at positions `>= valid_length`
    /// receive no attention weight.
    pub fn forward(&self, tape: &mut Tape<'_, T>, bound: &Bound, ids: &[usize], valid_length: usize) -> Result<Var> {
        encoder_forward(&self.config, tape, bound, ids, valid_length)
    }
}

pub fn encoder_forward<T: Real>(
    config: &EncoderConfig,
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    ids: &[usize],
    valid_length: usize,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Empty("token ids"));
    }
    if valid_length == 0 || valid_length > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "valid_length {valid_length} outside 1..={}",
            ids.len()
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::IdOutOfRange {
            id,
            size: config.vocab_size,
        });
    }
    let words = tape.embedding_lookup(bound.var("encoder.embeddings.word")?, ids.to_vec())?;
    if config.kind == EncoderKind::Static {
        return Ok(words);
    }
    if ids.len() > config.max_positions {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} exceeds {} positions",
            ids.len(),
            config.max_positions
        )));
    }
    let positions = tape.embedding_lookup(bound.var("encoder.embeddings.position")?, (0..ids.len()).collect())?;
    let x = tape.add(words, positions)?;
    let mut x = tape.layer_norm(
        x,
        bound.var("encoder.embeddings.ln.scale")?,
        bound.var("encoder.embeddings.ln.offset")?,
    )?;
    for i in 0..config.layers {
        let v = |s: &str| bound.var(&format!("encoder.layer.{i}.{s}"));
        let q = tape.linear(x, v("attention.query.weight")?, Some(v("attention.query.bias")?))?;
        let k = tape.linear(x, v("attention.key.weight")?, Some(v("attention.key.bias")?))?;
        let val = tape.linear(x, v("attention.value.weight")?, Some(v("attention.value.bias")?))?;
        let ctx = tape.attention(q, k, val, config.heads, valid_length)?;
        let proj = tape.linear(ctx, v("attention.output.weight")?, Some(v("attention.output.bias")?))?;
        let res = tape.add(x, proj)?;
        x = tape.layer_norm(res, v("attention.ln.scale")?, v("attention.ln.offset")?)?;
        let inner = tape.linear(x, v("ffn.inner.weight")?, Some(v("ffn.inner.bias")?))?;
        let act = tape.gelu(inner)?;
        let outer = tape.linear(act, v("ffn.outer.weight")?, Some(v("ffn.outer.bias")?))?;
        let res = tape.add(x, outer)?;
        x = tape.layer_norm(res, v("ffn.ln.scale")?, v("ffn.ln.offset")?)?;
    }
    Ok(x)
}
