//! Losses, Adam, the FE/FiT training loop and seeded multi-run experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{evaluate, Classifier, EncodedDataset, EncodedExample};
use crate::profiling::{Breakdown, Category, MemoryLedger, RunClock, SharedLedger, TimingTrace};
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::text::TaskKind;
use crate::weights::ParamMap;

pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Owner tags used in the memory ledger; parameter names start with one of them.
pub const ENCODER_OWNER: &str = "encoder";
pub const HEAD_OWNER: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Feature extraction: encoder frozen, head trained.
    FE,
    /// Fine-tuning: encoder and head trained jointly.
    FiT,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::FE, Mode::FiT];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FE => "FE",
            Mode::FiT => "FiT",
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Mode::FE => 50,
            Mode::FiT => 40,
        }
    }

    pub fn freezes_encoder(self) -> bool {
        self == Mode::FE
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fe" => Ok(Mode::FE),
            "fit" => Ok(Mode::FiT),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected FE or FiT)"
            ))),
        }
    }
}

/// Epoch counts `(FE, FiT)` for the benchmark corpora.
pub fn default_epochs(dataset: &str) -> Option<(usize, usize)> {
    let table: [(&str, usize, usize); 9] = [
        ("AGNews", 20, 10),
        ("20NEWS", 300, 100),
        ("DBpedia", 10, 10),
        ("TREC-6", 150, 50),
        ("TREC-50", 150, 50),
        ("YELP", 15, 5),
        ("RCV1", 50, 20),
        ("BGC_EN", 40, 20),
        ("Ohsumed", 300, 80),
    ];
    table
        .iter()
        .find(|(name, _, _)| name.eq_ignore_ascii_case(dataset))
        .map(|&(_, fe, fit)| (fe, fit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub task_kind: TaskKind,
    /// Sigmoid cut-off for multi-label predictions.
    pub threshold: f64,
}

impl RunConfig {
    pub fn new(mode: Mode, task_kind: TaskKind, epochs: usize, seed: u64) -> Self {
        Self {
            mode,
            batch_size: mode.default_batch_size(),
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs,
            seed,
            task_kind,
            threshold: crate::cnn::DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Gold labels of a minibatch in the form its loss expects.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// One `{0, 1}` row of length C per example.
    Indicators(Vec<Vec<f64>>),
}

impl Targets {
    pub fn from_examples(batch: &[&EncodedExample], task: TaskKind, classes: usize) -> Result<Self> {
        match task {
            TaskKind::SingleLabel => batch
                .iter()
                .map(|ex| match ex.labels.as_slice() {
                    [c] => Ok(*c),
                    other => Err(Error::InvalidArgument(format!(
                        "single-label example carries {} labels",
                        other.len()
                    ))),
                })
                .collect::<Result<_>>()
                .map(Targets::Classes),
            TaskKind::MultiLabel => batch
                .iter()
                .map(|ex| {
                    let mut row = vec![0.0; classes];
                    for &c in &ex.labels {
                        *row.get_mut(c).ok_or(Error::TargetOutOfRange { target: c, classes })? = 1.0;
                    }
                    Ok(row)
                })
                .collect::<Result<_>>()
                .map(Targets::Indicators),
        }
    }
}

/// Mean cross-entropy of `[B x C]` logits: softmax for class targets,
/// per-class sigmoid for indicator rows.
pub fn compute_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(t) => tape.softmax_cross_entropy(logits, t.clone()),
        Targets::Indicators(rows) => {
            let shape = tape.value(logits).shape().to_vec();
            let classes = *shape.last().unwrap_or(&1);
            if let Some(bad) = rows.iter().find(|r| r.len() != classes) {
                return Err(Error::LengthMismatch {
                    what: "target vector",
                    left: bad.len(),
                    right: classes,
                });
            }
            tape.bce_with_logits(logits, rows.concat())
        }
    }
}

/// Adam moments for every parameter that has received a gradient.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    ledger: Option<SharedLedger>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            moments: BTreeMap::new(),
            ledger: None,
        }
    }

    /// Moment buffers are reported to `ledger` as optimizer state when created.
    pub fn with_ledger(ledger: SharedLedger) -> Self {
        let mut state = Self::new();
        state.ledger = Some(ledger);
        state
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn byte_len(&self) -> u64 {
        self.moments
            .values()
            .map(|(m, v)| ((m.len() + v.len()) * T::BYTES) as u64)
            .sum()
    }
}

/// Owner tag of a parameter name: its first dotted component.
pub fn owner_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are left alone and get no state.
pub fn adam_step<T: Real>(
    params: &mut ParamMap<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::WeightMismatch(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: gradient of {} values for parameter {:?}", g.len(), p.shape()),
            ));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        if !state.moments.contains_key(name) {
            let zeros = vec![T::zero(); g.len()];
            if let Some(l) = &state.ledger {
                l.borrow_mut().record_alloc_for(
                    Category::OptimizerState,
                    owner_of(name),
                    (2 * g.len() * T::BYTES) as u64,
                );
            }
            state.moments.insert(name.clone(), (zeros.clone(), zeros));
        }
        let (m, v) = state.moments.get_mut(name).expect("inserted above");
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.as_f64();
            let m_new = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let v_new = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::lit(m_new);
            *vi = T::lit(v_new);
            let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *w = T::lit(w.as_f64() - step);
        }
    }
    Ok(())
}

impl<T: Real> Drop for AdamState<T> {
    fn drop(&mut self) {
        if let Some(l) = &self.ledger {
            let mut l = l.borrow_mut();
            for (name, (m, v)) in &self.moments {
                let bytes = ((m.len() + v.len()) * T::BYTES) as u64;
                let _ = l.record_free_for(Category::OptimizerState, owner_of(name), bytes);
            }
        }
    }
}

/// Forward, backward and one Adam update on a minibatch. Returns the batch loss.
pub fn train_step(
    model: &mut Classifier<f32>,
    batch: &[&EncodedExample],
    config: &RunConfig,
    classes: usize,
    state: &mut AdamState<f32>,
    ledger: &SharedLedger,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let targets = Targets::from_examples(batch, config.task_kind, classes)?;
    let train_encoder = !config.mode.freezes_encoder();
    let (loss, grads) = {
        let mut tape = Tape::with_ledger(ledger.clone());
        let encoder = train_encoder.then(|| model.encoder.bind(&mut tape));
        let head = model.head.bind(&mut tape);
        let logits = model.batch_logits(&mut tape, encoder.as_ref(), &head, batch)?;
        let loss = compute_loss(&mut tape, logits, &targets)?;
        let value = tape.value(loss).item().expect("loss is a scalar").as_f64();
        let mut raw = tape.backward(loss)?;
        let mut grads = head.take_grads(&mut raw);
        if let Some(enc) = &encoder {
            grads.extend(enc.take_grads(&mut raw));
        }
        {
            let mut l = ledger.borrow_mut();
            for (name, g) in &grads {
                l.record_alloc_for(Category::Gradients, owner_of(name), (g.len() * 4) as u64);
            }
        }
        (value, grads)
    };
    if loss.is_finite() {
        let mut params = std::mem::take(&mut model.head.weights);
        if train_encoder {
            params.merge(std::mem::take(&mut model.encoder.weights))?;
        }
        let stepped = adam_step(&mut params, &grads, state, config.learning_rate);
        if train_encoder {
            model.encoder.weights = params.split_prefix(&format!("{ENCODER_OWNER}."));
        }
        model.head.weights = params;
        stepped?;
    }
    {
        let mut l = ledger.borrow_mut();
        for (name, g) in &grads {
            l.record_free_for(Category::Gradients, owner_of(name), (g.len() * 4) as u64)?;
        }
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metrics: Metrics,
    /// Time spent on the training batches of this epoch.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Metrics,
    pub peak_bytes: u64,
    pub peak_breakdown: Breakdown,
    pub parameter_bytes: u64,
    pub optimizer_bytes: u64,
    pub encoder_gradient_peak: u64,
    pub encoder_optimizer_peak: u64,
    pub timing: TimingTrace,
}

impl RunResult {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.timing.mean_epoch_seconds()
    }
}

/// Visiting order of `n` training examples in a given epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains `model` in place and evaluates on the test split after every epoch.
pub fn train(config: &RunConfig, data: &EncodedDataset, model: &mut Classifier<f32>) -> Result<RunResult> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if data.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    if config.task_kind != data.task_kind {
        return Err(Error::InvalidConfig(format!(
            "run configured for {} but dataset is {}",
            config.task_kind, data.task_kind
        )));
    }
    let mut clock = RunClock::start();
    model.encoder.set_frozen(config.mode.freezes_encoder());
    let ledger = MemoryLedger::shared();
    for (name, p) in model.encoder.weights.iter().chain(model.head.weights.iter()) {
        ledger
            .borrow_mut()
            .record_alloc_for(Category::Parameters, owner_of(name), p.byte_len());
    }
    let mut state = AdamState::with_ledger(ledger.clone());
    let classes = data.classes();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        clock.begin_epoch();
        let order = epoch_order(data.train.len(), config.seed, epoch);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, _) = train_step(model, &batch, config, classes, &mut state, &ledger)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * batch.len() as f64;
        }
        let seconds = clock.end_epoch();
        let metrics = evaluate(model, &data.test, config.task_kind, config.threshold)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / data.train.len() as f64,
            metrics,
            seconds,
        });
    }
    let l = ledger.borrow();
    let result = RunResult {
        seed: config.seed,
        mode: config.mode,
        final_metrics: epochs.last().map(|e| e.metrics).unwrap_or_default(),
        epochs,
        peak_bytes: l.peak(),
        peak_breakdown: l.peak_breakdown(),
        parameter_bytes: l.category(Category::Parameters),
        optimizer_bytes: l.category(Category::OptimizerState),
        encoder_gradient_peak: l.owned_peak(Category::Gradients, ENCODER_OWNER),
        encoder_optimizer_peak: l.owned_peak(Category::OptimizerState, ENCODER_OWNER),
        timing: clock.finish(),
    };
    Ok(result)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("mean_std"));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok(MeanStd {
            mean: values[0],
            std: 0.0,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

impl MetricSummary {
    pub fn headline(&self, task: TaskKind) -> MeanStd {
        match task {
            TaskKind::SingleLabel => self.accuracy,
            TaskKind::MultiLabel => self.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub seeds: Vec<u64>,
    pub metrics: MetricSummary,
    pub epoch_seconds: MeanStd,
    pub total_seconds: MeanStd,
    /// Largest peak over the runs.
    pub peak_bytes: u64,
    pub runs: Vec<RunResult>,
}

pub fn summarize_metrics(metrics: &[Metrics]) -> Result<MetricSummary> {
    let pick = |f: fn(&Metrics) -> f64| mean_std(&metrics.iter().map(f).collect::<Vec<_>>());
    Ok(MetricSummary {
        accuracy: pick(|m| m.accuracy)?,
        precision: pick(|m| m.precision)?,
        recall: pick(|m| m.recall)?,
        f1: pick(|m| m.f1)?,
    })
}

pub fn aggregate(runs: Vec<RunResult>) -> Result<AggregateResult> {
    if runs.is_empty() {
        return Err(Error::Empty("runs"));
    }
    let finals: Vec<Metrics> = runs.iter().map(|r| r.final_metrics).collect();
    let epoch: Vec<f64> = runs.iter().map(RunResult::mean_epoch_seconds).collect();
    let total: Vec<f64> = runs.iter().map(|r| r.timing.total_seconds).collect();
    Ok(AggregateResult {
        seeds: runs.iter().map(|r| r.seed).collect(),
        metrics: summarize_metrics(&finals)?,
        epoch_seconds: mean_std(&epoch)?,
        total_seconds: mean_std(&total)?,
        peak_bytes: runs.iter().map(|r| r.peak_bytes).max().unwrap_or(0),
        runs,
    })
}

/// Runs `repeats` seeded trainings (seeds `config.seed + i`) and aggregates them.
/// `build` makes a fresh model for a run seed. With `parallel` the repeats run
/// on the rayon pool; results do not depend on it.
pub fn run_experiment<F>(
    config: &RunConfig,
    data: &EncodedDataset,
    repeats: usize,
    parallel: bool,
    build: F,
) -> Result<AggregateResult>
where
    F: Fn(u64) -> Result<Classifier<f32>> + Sync,
{
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let one = |i: usize| -> Result<RunResult> {
        let run = RunConfig {
            seed: config.seed + i as u64,
            ..config.clone()
        };
        let mut model = build(run.seed)?;
        train(&run, data, &mut model)
    };
    let runs: Vec<Result<RunResult>> = if parallel {
        (0..repeats).into_par_iter().map(one).collect()
    } else {
        (0..repeats).map(one).collect()
    };
    aggregate(runs.into_iter().collect::<Result<Vec<_>>>()?)
}
