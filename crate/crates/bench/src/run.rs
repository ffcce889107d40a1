//! Executes a benchmark grid and writes its result files.

use std::path::{Path, PathBuf};

use febench::cnn::CnnHeadConfig;
use febench::encoder::{init_weights, static_weights, Encoder, EncoderConfig, Preset};
use febench::model::{encode_dataset, Classifier, EncodedDataset};
use febench::synthetic::make_synthetic;
use febench::text::{load_dataset, load_embeddings, Dataset};
use febench::train::{run_experiment, AggregateResult, RunConfig};
use febench::weights::{load_weights, ParamMap};
use rayon::prelude::*;

use crate::config::{BenchmarkConfig, ResolvedCell, DEFAULT_OUTPUT_DIR};
use crate::error::{BenchError, Result};
use crate::report::{
    default_baseline, emit_report, emit_tsv, to_jsonl, CellRecord, RunRecord, RunTiming, Status, TimingRecord,
    REPORT_FILE, RESULTS_FILE, TABLE_FILE, TIMINGS_FILE,
};

/// Command-line overrides of config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub parallel: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut BenchmarkConfig) -> Result<()> {
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(r) = self.repeats {
            config.repeats = r;
        }
        if let Some(p) = self.parallel {
            config.parallel = p;
        }
        if let Some(o) = &self.out {
            config.output_dir = Some(o.clone());
        }
        config.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub records: Vec<CellRecord>,
    pub timings: Vec<TimingRecord>,
    pub report: String,
}

impl Outcome {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.status == Status::Failed).count()
    }

    pub fn exit_code(&self) -> i32 {
        if self.failed() == 0 {
            0
        } else {
            1
        }
    }
}

pub fn load_benchmark_dataset(config: &BenchmarkConfig) -> Result<Dataset> {
    let data = match (&config.dataset.synthetic, &config.dataset.path) {
        (Some(spec), _) => make_synthetic(spec)?,
        (None, Some(path)) => load_dataset(path, config.dataset.format)?,
        (None, None) => return Err(BenchError::Config("dataset has no source".into())),
    };
    Ok(match config.dataset.task {
        Some(kind) => data.with_task_kind(kind)?,
        None => data,
    })
}

/// Encoded corpus and encoder for one cell.
struct Prepared {
    data: EncodedDataset,
    encoder: Encoder,
}

struct Inputs<'a> {
    config: &'a BenchmarkConfig,
    dataset: &'a Dataset,
    vocab_data: EncodedDataset,
    vocab_len: usize,
}

impl Inputs<'_> {
    fn prepare(&self, cell: &ResolvedCell) -> Result<Prepared> {
        let seed = self.config.encoder_seed();
        if cell.preset == Preset::Glove {
            if let Some(path) = &self.config.dataset.embeddings {
                let table = load_embeddings(path, seed)?;
                let data = encode_dataset(self.dataset, &table.vocab, self.config.dataset.max_len)?;
                let (enc_cfg, weights) = static_weights(&table)?;
                return Ok(Prepared {
                    data,
                    encoder: Encoder::new(enc_cfg, weights)?,
                });
            }
        }
        let vocab_size = self.vocab_size();
        let enc_cfg: EncoderConfig = cell.preset.config(vocab_size);
        let weights: ParamMap = match &cell.weights {
            Some(path) => {
                let w = load_weights(path)?;
                w.validate_against(&enc_cfg.param_shapes())?;
                w
            }
            None => init_weights(&enc_cfg, seed)?,
        };
        Ok(Prepared {
            data: self.vocab_data.clone(),
            encoder: Encoder::new(enc_cfg, weights)?,
        })
    }

    fn vocab_size(&self) -> usize {
        self.vocab_len
    }
}

struct CellRun {
    record: CellRecord,
    timing: Option<TimingRecord>,
}

fn run_cell(inputs: &Inputs<'_>, cell: &ResolvedCell, hash: &str) -> CellRun {
    let config = inputs.config;
    let seeds: Vec<u64> = (0..config.repeats as u64).map(|i| config.seed + i).collect();
    let mut record = CellRecord {
        cell: cell.id.clone(),
        preset: cell.preset,
        mode: cell.mode,
        status: Status::Ok,
        error: None,
        dataset: inputs.dataset.name.clone(),
        task_kind: inputs.dataset.task_kind,
        param_count: 0,
        epochs: cell.epochs,
        batch_size: cell.batch_size,
        learning_rate: cell.learning_rate,
        threshold: cell.threshold,
        seeds,
        metrics: None,
        peak_bytes: 0,
        runs: Vec::new(),
        config_hash: hash.to_string(),
    };
    let attempt = || -> Result<(usize, AggregateResult)> {
        let prepared = inputs.prepare(cell)?;
        let head = CnnHeadConfig {
            kernel_sizes: config.head.kernel_sizes.clone(),
            filters: config.head.filters,
            hidden: prepared.encoder.config.hidden,
            classes: prepared.data.classes(),
        };
        head.validate(prepared.data.task_kind, config.dataset.max_len)?;
        let run = RunConfig {
            mode: cell.mode,
            batch_size: cell.batch_size,
            learning_rate: cell.learning_rate,
            epochs: cell.epochs,
            seed: config.seed,
            task_kind: prepared.data.task_kind,
            threshold: cell.threshold,
        };
        let build = |seed: u64| Classifier::with_new_head(prepared.encoder.clone(), head.clone(), seed);
        let params = build(config.seed)?.param_count();
        let agg = run_experiment(&run, &prepared.data, config.repeats, false, build)?;
        Ok((params, agg))
    };
    match attempt() {
        Ok((params, agg)) => {
            record.param_count = params;
            record.metrics = Some(agg.metrics);
            record.peak_bytes = agg.peak_bytes;
            record.runs = agg
                .runs
                .iter()
                .map(|r| RunRecord {
                    seed: r.seed,
                    metrics: r.final_metrics,
                    peak_bytes: r.peak_bytes,
                })
                .collect();
            let runs: Vec<RunTiming> = agg
                .runs
                .iter()
                .map(|r| RunTiming {
                    seed: r.seed,
                    epoch_seconds: r.timing.epoch_seconds.clone(),
                    total_seconds: r.timing.total_seconds,
                })
                .collect();
            let timing = TimingRecord {
                cell: cell.id.clone(),
                epoch_seconds: agg.epoch_seconds,
                total_seconds: agg.total_seconds,
                runs,
            };
            CellRun {
                record,
                timing: Some(timing),
            }
        }
        Err(e) => {
            record.status = Status::Failed;
            record.error = Some(e.to_string());
            CellRun { record, timing: None }
        }
    }
}

/// Configured output directory, or `bench-out`. `--out` and `BENCH_OUT` land
/// in the config through [`Overrides`].
pub fn output_dir(config: &BenchmarkConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| BenchError::io(path, e))
}

/// Trains every cell and writes `results.jsonl`, `timings.jsonl`,
/// `report.txt` and `report.tsv` into the output directory. Failing cells are
/// recorded as FAILED without stopping the others.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<Outcome> {
    config.validate()?;
    let dataset = load_benchmark_dataset(config)?;
    let vocab = dataset.vocabulary(config.dataset.vocab_size, config.dataset.min_freq)?;
    let vocab_data = encode_dataset(&dataset, &vocab, config.dataset.max_len)?;
    let inputs = Inputs {
        config,
        dataset: &dataset,
        vocab_data,
        vocab_len: vocab.len(),
    };
    let cells = config
        .cells
        .iter()
        .map(|c| config.resolve(c))
        .collect::<Result<Vec<_>>>()?;
    let hash = config.hash();
    let total = cells.len();
    let one = |(i, cell): (usize, &ResolvedCell)| {
        eprintln!("[{}/{total}] {} ...", i + 1, cell.id);
        let done = run_cell(&inputs, cell, &hash);
        match &done.record.metrics {
            Some(m) => eprintln!(
                "[{}/{total}] {} done: headline {:.2}",
                i + 1,
                cell.id,
                100.0 * m.headline(done.record.task_kind).mean
            ),
            None => eprintln!(
                "[{}/{total}] {} FAILED: {}",
                i + 1,
                cell.id,
                done.record.error.as_deref().unwrap_or("")
            ),
        }
        done
    };
    let runs: Vec<CellRun> = if config.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel)
            .build()
            .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().enumerate().map(one).collect())
    } else {
        cells.iter().enumerate().map(one).collect()
    };
    let records: Vec<CellRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let timings: Vec<TimingRecord> = runs.into_iter().filter_map(|r| r.timing).collect();

    let baseline = config
        .baseline
        .clone()
        .filter(|b| timings.iter().any(|t| &t.cell == b))
        .or_else(|| default_baseline(&records));
    let report = emit_report(&records, &timings, baseline.as_deref())?;
    let tsv = emit_tsv(&records, &timings, baseline.as_deref())?;

    let out_dir = output_dir(config);
    std::fs::create_dir_all(&out_dir).map_err(|e| BenchError::io(&out_dir, e))?;
    write(&out_dir.join(RESULTS_FILE), &to_jsonl(&records))?;
    write(&out_dir.join(TIMINGS_FILE), &to_jsonl(&timings))?;
    write(&out_dir.join(REPORT_FILE), &report)?;
    write(&out_dir.join(TABLE_FILE), &tsv)?;
    Ok(Outcome {
        out_dir,
        records,
        timings,
        report,
    })
}
