//! CNN classification head: parallel valid convolutions over the hidden
//! sequence, ReLU, masked max-over-time pooling, concatenation and a linear
//! projection to class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::text::TaskKind;
use crate::weights::{Bound, ParamMap};

pub const DEFAULT_KERNEL_SIZES: [usize; 4] = [3, 4, 5, 6];
pub const DEFAULT_FILTERS: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnHeadConfig {
    pub kernel_sizes: Vec<usize>,
    pub filters: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl CnnHeadConfig {
    /// Kernels 3, 4, 5, 6 with 100 filters each.
    pub fn new(hidden: usize, classes: usize) -> Self {
        Self {
            kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(),
            filters: DEFAULT_FILTERS,
            hidden,
            classes,
        }
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, task: TaskKind, max_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kernel_sizes.is_empty() {
            return bad("at least one kernel size is required".into());
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k > max_len) {
            return bad(format!("kernel size {k} outside 1..={max_len}"));
        }
        if self.filters == 0 || self.hidden == 0 {
            return bad("filters and hidden size must be positive".into());
        }
        let min_classes = match task {
            TaskKind::SingleLabel => 2,
            TaskKind::MultiLabel => 1,
        };
        if self.classes < min_classes {
            return bad(format!(
                "{task} needs at least {min_classes} classes, got {}",
                self.classes
            ));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, &k) in self.kernel_sizes.iter().enumerate() {
            out.push((format!("head.conv.{i}.weight"), vec![k, self.hidden, self.filters]));
            out.push((format!("head.conv.{i}.bias"), vec![self.filters]));
        }
        out.push(("head.proj.weight".into(), vec![feature_dim(self), self.classes]));
        out.push(("head.proj.bias".into(), vec![self.classes]));
        out
    }
}

/// Length of the pooled feature vector: kernels x filters.
pub fn feature_dim(config: &CnnHeadConfig) -> usize {
    config.kernel_sizes.len() * config.filters
}

pub fn param_count(config: &CnnHeadConfig) -> usize {
    config
        .param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
pub fn init_head(config: &CnnHeadConfig, seed: u64) -> Result<ParamMap<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    let proj_fan_in = feature_dim(config);
    for (name, shape) in config.param_shapes() {
        let fan_in = if name.starts_with("head.proj") {
            proj_fan_in
        } else {
            let i: usize = name.split('.').nth(2).and_then(|s| s.parse().ok()).expect("conv index");
            config.kernel_sizes[i] * config.hidden
        };
        let bound = 1.0 / (fan_in as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        params.insert(name, Tensor::new(shape, data)?.with_requires_grad(true));
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnHead<T: Real = f32> {
    pub config: CnnHeadConfig,
    pub weights: ParamMap<T>,
}

impl<T: Real> CnnHead<T> {
    pub fn new(config: CnnHeadConfig, weights: ParamMap<T>) -> Result<Self> {
        weights.validate_against(&config.param_shapes())?;
        Ok(Self { config, weights })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        self.weights.bind(tape, "head")
    }

    pub fn cast<U: Real>(&self) -> CnnHead<U> {
        CnnHead {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, bound: &Bound, hidden: Var, valid_length: usize) -> Result<Var> {
        cnn_forward(&self.config, tape, bound, hidden, valid_length)
    }
}

/// Logits `[C]` for one hidden sequence `[T x H]`. Convolution windows that
/// reach past `valid_length` are excluded from pooling.
pub fn cnn_forward<T: Real>(
    config: &CnnHeadConfig,
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    hidden: Var,
    valid_length: usize,
) -> Result<Var> {
    let shape = tape.value(hidden).shape().to_vec();
    if shape.len() != 2 || shape[1] != config.hidden {
        return Err(Error::shape(
            "cnn_forward",
            format!("hidden states {shape:?}, expected [T, {}]", config.hidden),
        ));
    }
    let max_k = config.max_kernel();
    if valid_length < max_k {
        return Err(Error::InvalidArgument(format!(
            "valid length {valid_length} shorter than kernel size {max_k}"
        )));
    }
    if valid_length > shape[0] {
        return Err(Error::InvalidArgument(format!(
            "valid length {valid_length} exceeds sequence length {}",
            shape[0]
        )));
    }
    let mut pooled = Vec::with_capacity(config.kernel_sizes.len());
    for (i, &k) in config.kernel_sizes.iter().enumerate() {
        let conv = tape.conv1d_valid(
            hidden,
            bound.var(&format!("head.conv.{i}.weight"))?,
            Some(bound.var(&format!("head.conv.{i}.bias"))?),
        )?;
        let act = tape.relu(conv)?;
        pooled.push(tape.max_over_time(act, Some(valid_length - k + 1))?);
    }
    let features = tape.concat(&pooled)?;
    tape.linear(
        features,
        bound.var("head.proj.weight")?,
        Some(bound.var("head.proj.bias")?),
    )
}

/// Single-label: the argmax (lowest index on ties). Multi-label: every index
/// with `sigmoid(logit) >= threshold`, possibly none.
pub fn predict<T: Real>(logits: &[T], task: TaskKind, threshold: f64) -> Vec<usize> {
    match task {
        TaskKind::SingleLabel => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if logits.is_empty() {
                Vec::new()
            } else {
                vec![best]
            }
        }
        TaskKind::MultiLabel => logits
            .iter()
            .enumerate()
            .filter(|(_, &v)| {
                let v = v.as_f64();
                let p = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    v.exp() / (1.0 + v.exp())
                };
                p >= threshold
            })
            .map(|(i, _)| i)
            .collect(),
    }
}
