//! Seeded gradient-check programs shared by the gradient tests and the
//! acceptance suite.

#![allow(dead_code)]

use febench::cnn::{cnn_forward, init_head, CnnHeadConfig};
use febench::encoder::{encoder_forward, EncoderConfig};
use febench::gradcheck::grad_check;
use febench::weights::{Bound, ParamMap};
use febench::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: u64 = 10;

type Program = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub point: Vec<Tensor<f64>>,
    pub program: Program,
}

impl Case {
    fn new(
        name: &'static str,
        point: Vec<Tensor<f64>>,
        program: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            point,
            program: Box::new(program),
        }
    }

    /// Largest relative error between reverse-mode and central differences.
    pub fn check(&self) -> f64 {
        grad_check(|t, v| (self.program)(t, v), &self.point, EPS).unwrap_or_else(|e| panic!("{}: {e}", self.name))
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

/// `sum(y * R)` for a fixed random `R`, so every output coordinate carries
/// a distinct weight.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(shape, data)?);
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

/// One check program per tensor primitive (some primitives appear in several
/// configurations), with inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let s = seed;
    cases.push(Case::new(
        "matmul",
        vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[4, 2], 1.0)],
        move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "add",
        vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "add_broadcast",
        vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[4], 1.0)],
        move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "conv1d_valid",
        vec![
            normal(&mut rng, &[7, 3], 1.0),
            normal(&mut rng, &[3, 3, 4], 1.0),
            normal(&mut rng, &[4], 1.0),
        ],
        move |t, v| {
            let y = t.conv1d_valid(v[0], v[1], Some(v[2]))?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "conv1d_valid_unbiased",
        vec![normal(&mut rng, &[5, 2], 1.0), normal(&mut rng, &[2, 2, 3], 1.0)],
        move |t, v| {
            let y = t.conv1d_valid(v[0], v[1], None)?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "max_over_time",
        vec![normal(&mut rng, &[6, 3], 1.0)],
        move |t, v| {
            let y = t.max_over_time(v[0], None)?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "max_over_time_limited",
        vec![normal(&mut rng, &[6, 3], 1.0)],
        move |t, v| {
            let y = t.max_over_time(v[0], Some(4))?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new("relu", vec![normal(&mut rng, &[4, 5], 1.0)], move |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, s)
    }));
    cases.push(Case::new("gelu", vec![normal(&mut rng, &[4, 5], 1.5)], move |t, v| {
        let y = t.gelu(v[0])?;
        project(t, y, s)
    }));
    cases.push(Case::new("tanh", vec![normal(&mut rng, &[4, 5], 1.0)], move |t, v| {
        let y = t.tanh(v[0])?;
        project(t, y, s)
    }));
    cases.push(Case::new(
        "layer_norm",
        vec![
            normal(&mut rng, &[3, 5], 1.0),
            normal(&mut rng, &[5], 1.0),
            normal(&mut rng, &[5], 1.0),
        ],
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, s)
        },
    ));
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    cases.push(Case::new(
        "embedding_lookup",
        vec![normal(&mut rng, &[6, 3], 1.0)],
        move |t, v| {
            let y = t.embedding_lookup(v[0], ids.clone())?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "attention",
        vec![
            normal(&mut rng, &[5, 4], 1.0),
            normal(&mut rng, &[5, 4], 1.0),
            normal(&mut rng, &[5, 4], 1.0),
        ],
        move |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, 3)?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "concat",
        vec![normal(&mut rng, &[2, 3], 1.0), normal(&mut rng, &[2, 2], 1.0)],
        move |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "linear",
        vec![
            normal(&mut rng, &[2, 4], 1.0),
            normal(&mut rng, &[4, 3], 1.0),
            normal(&mut rng, &[3], 1.0),
        ],
        move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "linear_vector",
        vec![normal(&mut rng, &[4], 1.0), normal(&mut rng, &[4, 3], 1.0)],
        move |t, v| {
            let y = t.linear(v[0], v[1], None)?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new(
        "mul",
        vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        },
    ));
    cases.push(Case::new("sum", vec![normal(&mut rng, &[3, 4], 1.0)], move |t, v| {
        let y = t.sum(v[0])?;
        project(t, y, s)
    }));
    cases.push(Case::new("mean", vec![normal(&mut rng, &[3, 4], 1.0)], move |t, v| {
        let y = t.mean(v[0])?;
        project(t, y, s)
    }));
    cases.push(Case::new("scale", vec![normal(&mut rng, &[3, 4], 1.0)], move |t, v| {
        let y = t.scale(v[0], -2.5)?;
        project(t, y, s)
    }));
    cases.push(Case::new(
        "stack",
        vec![normal(&mut rng, &[2, 3], 1.0), normal(&mut rng, &[2, 3], 1.0)],
        move |t, v| {
            let y = t.stack(&[v[0], v[1]])?;
            project(t, y, s)
        },
    ));
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    cases.push(Case::new(
        "softmax_cross_entropy",
        vec![normal(&mut rng, &[3, 4], 2.0)],
        move |t, v| t.softmax_cross_entropy(v[0], targets.clone()),
    ));
    let indicators: Vec<f64> = (0..6).map(|_| f64::from(rng.random_bool(0.5))).collect();
    cases.push(Case::new(
        "bce_with_logits",
        vec![normal(&mut rng, &[2, 3], 2.0)],
        move |t, v| t.bce_with_logits(v[0], indicators.clone()),
    ));
    cases
}

fn small_encoder(frozen: bool) -> EncoderConfig {
    let mut config = EncoderConfig::transformer(1, 8, 2, 12).with_frozen(frozen);
    config.max_positions = 16;
    config.ffn = 16;
    config
}

fn small_head() -> CnnHeadConfig {
    CnnHeadConfig {
        kernel_sizes: vec![2, 3],
        filters: 3,
        hidden: 8,
        classes: 3,
    }
}

/// Encoder weights at a scale where every gradient coordinate is well above
/// finite-difference noise.
fn encoder_point(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> ParamMap<f64> {
    let mut params = ParamMap::new();
    for (name, shape) in config.param_shapes() {
        let std = if name.ends_with(".scale") || name.ends_with(".offset") {
            0.5
        } else {
            0.4
        };
        let mut t = normal(rng, &shape, std);
        if name.ends_with(".scale") {
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        params.insert(name, t.with_requires_grad(!config.frozen));
    }
    params
}

fn pipeline_case(name: &'static str, seed: u64, frozen: bool, multi_label: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_cfg = small_encoder(frozen);
    let head_cfg = small_head();
    let enc = encoder_point(&enc_cfg, &mut rng);
    let head: ParamMap<f64> = init_head(&head_cfg, seed).unwrap().cast();
    let docs: Vec<(Vec<usize>, usize)> = [5usize, 7]
        .iter()
        .map(|&valid| {
            let mut ids: Vec<usize> = (0..valid).map(|_| rng.random_range(1..12)).collect();
            ids.resize(7, 0);
            (ids, valid)
        })
        .collect();
    let classes: Vec<usize> = (0..docs.len()).map(|_| rng.random_range(0..3)).collect();
    let indicators: Vec<f64> = (0..docs.len() * 3).map(|_| f64::from(rng.random_bool(0.5))).collect();

    let head_names: Vec<String> = head.names().map(String::from).collect();
    let enc_names: Vec<String> = enc.names().map(String::from).collect();
    let point: Vec<Tensor<f64>> = head.iter().chain(enc.iter()).map(|(_, t)| t.clone()).collect();
    Case::new(name, point, move |t, v| {
        let (hv, ev) = v.split_at(head_names.len());
        let hb = Bound::new("head", head_names.iter().cloned().zip(hv.iter().copied()));
        let eb = Bound::new("encoder", enc_names.iter().cloned().zip(ev.iter().copied()));
        let mut rows = Vec::new();
        for (ids, valid) in &docs {
            let hidden = encoder_forward(&enc_cfg, t, &eb, ids, *valid)?;
            rows.push(cnn_forward(&head_cfg, t, &hb, hidden, *valid)?);
        }
        let logits = t.stack(&rows)?;
        if multi_label {
            t.bce_with_logits(logits, indicators.clone())
        } else {
            t.softmax_cross_entropy(logits, classes.clone())
        }
    })
}

/// Frozen transformer feeding a CNN head; only head parameters are checked.
pub fn frozen_pipeline_case(seed: u64) -> Case {
    pipeline_case("frozen_encoder_cnn", seed, true, false)
}

/// One-layer transformer and head trained jointly, multi-label loss.
pub fn fine_tuning_case(seed: u64) -> Case {
    pipeline_case("fine_tuned_transformer_cnn", seed, false, true)
}
