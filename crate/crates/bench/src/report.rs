//! Result records and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use febench::encoder::Preset;
use febench::metrics::Metrics;
use febench::profiling::{relative_times, MIB};
use febench::text::TaskKind;
use febench::train::{MeanStd, MetricSummary, Mode};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    #[serde(rename = "FAILED")]
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: Metrics,
    pub peak_bytes: u64,
}

/// One line of `results.jsonl`. Holds only values that are reproducible
/// from the config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: String,
    pub preset: Preset,
    pub mode: Mode,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub dataset: String,
    pub task_kind: TaskKind,
    pub param_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSummary>,
    /// Largest tracked-memory peak over the runs.
    pub peak_bytes: u64,
    pub runs: Vec<RunRecord>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seed: u64,
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// One line of `timings.jsonl`: wall-clock measurements of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub cell: String,
    /// Mean over runs of each run's mean epoch time.
    pub epoch_seconds: MeanStd,
    pub total_seconds: MeanStd,
    pub runs: Vec<RunTiming>,
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const TABLE_FILE: &str = "report.tsv";

/// `"92.97 ± 0.06"` from fractions.
pub fn format_percent(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

/// Whole MiB from 100 up, two decimals below.
pub fn format_mib(bytes: u64) -> String {
    let mib = bytes as f64 / MIB;
    if mib >= 100.0 {
        format!("{mib:.0}")
    } else {
        format!("{mib:.2}")
    }
}

pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.2}")
}

pub fn format_hours(seconds: f64) -> String {
    format!("{:.2}", seconds / 3600.0)
}

/// The largest feature-extraction cell by parameter count, first on ties.
pub fn default_baseline(records: &[CellRecord]) -> Option<String> {
    let mut best: Option<&CellRecord> = None;
    for r in records.iter().filter(|r| r.mode == Mode::FE && r.status == Status::Ok) {
        if best.is_none_or(|b| r.param_count > b.param_count) {
            best = Some(r);
        }
    }
    best.map(|r| r.cell.clone())
}

/// Relative mean epoch time per cell; cells without timings are absent.
pub fn relative_epoch_times(timings: &[TimingRecord], baseline: &str) -> Result<BTreeMap<String, f64>> {
    let epoch: BTreeMap<String, f64> = timings.iter().map(|t| (t.cell.clone(), t.epoch_seconds.mean)).collect();
    Ok(relative_times(&epoch, baseline)?)
}

fn presets_in_order(records: &[CellRecord]) -> Vec<Preset> {
    let mut out: Vec<Preset> = Vec::new();
    for r in records {
        if !out.contains(&r.preset) {
            out.push(r.preset);
        }
    }
    out
}

fn find(records: &[CellRecord], preset: Preset, mode: Mode) -> Option<&CellRecord> {
    records.iter().find(|r| r.preset == preset && r.mode == mode)
}

fn table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = w - cell.chars().count();
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out);
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(
        out,
        "{}",
        "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
    );
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
    let _ = writeln!(out);
}

const MISSING: &str = "-";
const FAILED: &str = "FAILED";

fn metric_cells(record: Option<&CellRecord>, task: TaskKind) -> Vec<String> {
    let n = match task {
        TaskKind::SingleLabel => 1,
        TaskKind::MultiLabel => 3,
    };
    match record {
        None => vec![MISSING.into(); n],
        Some(r) => match &r.metrics {
            None => vec![FAILED.into(); n],
            Some(m) => match task {
                TaskKind::SingleLabel => vec![format_percent(m.accuracy)],
                TaskKind::MultiLabel => vec![
                    format_percent(m.precision),
                    format_percent(m.recall),
                    format_percent(m.f1),
                ],
            },
        },
    }
}

/// The human-readable report: quality table, memory, relative epoch time,
/// total time and a provenance block. `baseline` defaults to the largest FE
/// cell; it must name a cell with timings.
pub fn emit_report(records: &[CellRecord], timings: &[TimingRecord], baseline: Option<&str>) -> Result<String> {
    let first = records
        .first()
        .ok_or(BenchError::Core(febench::Error::Empty("result records")))?;
    let task = first.task_kind;
    let repeats = first.seeds.len();
    let presets = presets_in_order(records);
    let baseline = match baseline {
        Some(b) => Some(b.to_string()),
        None => default_baseline(records),
    };
    let relative = match (&baseline, timings.is_empty()) {
        (Some(b), false) => Some(relative_epoch_times(timings, b)?),
        (Some(b), true) => return Err(febench::Error::MissingBaseline(b.clone()).into()),
        (None, _) => None,
    };
    let timing_of = |cell: &str| timings.iter().find(|t| t.cell == cell);

    let mut out = String::new();
    let _ = writeln!(out, "Benchmark report: {} ({})", first.dataset, task);
    let _ = writeln!(out);

    let modes = Mode::ALL;
    match task {
        TaskKind::SingleLabel => {
            let header: Vec<String> = ["Method", "FE", "FiT"].iter().map(|s| s.to_string()).collect();
            let rows: Vec<Vec<String>> = presets
                .iter()
                .map(|&p| {
                    let mut row = vec![p.name().to_string()];
                    for m in modes {
                        row.extend(metric_cells(find(records, p, m), task));
                    }
                    row
                })
                .collect();
            table(
                &mut out,
                &format!("Test Accuracy (%) averaged over {repeats} runs"),
                &header,
                &rows,
            );
        }
        TaskKind::MultiLabel => {
            let mut header = vec!["Method".to_string()];
            for m in modes {
                for metric in ["P", "R", "F1"] {
                    header.push(format!("{m} {metric}"));
                }
            }
            let rows: Vec<Vec<String>> = presets
                .iter()
                .map(|&p| {
                    let mut row = vec![p.name().to_string()];
                    for m in modes {
                        row.extend(metric_cells(find(records, p, m), task));
                    }
                    row
                })
                .collect();
            table(
                &mut out,
                &format!("Test Precision/Recall/F1 (%) averaged over {repeats} runs"),
                &header,
                &rows,
            );
        }
    }

    let header: Vec<String> = ["Method", "FE", "FiT"].iter().map(|s| s.to_string()).collect();
    let block = |f: &dyn Fn(&CellRecord) -> String| -> Vec<Vec<String>> {
        presets
            .iter()
            .map(|&p| {
                let mut row = vec![p.name().to_string()];
                for m in modes {
                    row.push(match find(records, p, m) {
                        None => MISSING.into(),
                        Some(r) if r.status == Status::Failed => FAILED.into(),
                        Some(r) => f(r),
                    });
                }
                row
            })
            .collect()
    };
    table(
        &mut out,
        "Peak tracked memory during training in MiB",
        &header,
        &block(&|r| format_mib(r.peak_bytes)),
    );
    if let (Some(b), Some(rel)) = (&baseline, &relative) {
        table(
            &mut out,
            &format!("Average time per epoch as multiples of {b}"),
            &header,
            &block(&|r| rel.get(&r.cell).map_or(MISSING.into(), |&x| format_ratio(x))),
        );
    }
    if !timings.is_empty() {
        table(
            &mut out,
            "Average total training time in hours",
            &header,
            &block(&|r| timing_of(&r.cell).map_or(MISSING.into(), |t| format_hours(t.total_seconds.mean))),
        );
    }

    let _ = writeln!(out, "Provenance");
    let _ = writeln!(out);
    let _ = writeln!(out, "config hash: {}", first.config_hash);
    let _ = writeln!(out, "master seed: {}", first.seeds.first().copied().unwrap_or(0));
    for r in records {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{}: seeds {}, {} epochs, batch {}, lr {}, {} parameters{}",
            r.cell,
            seeds.join(","),
            r.epochs,
            r.batch_size,
            r.learning_rate,
            r.param_count,
            match &r.error {
                Some(e) => format!(", FAILED: {e}"),
                None => String::new(),
            }
        );
    }
    if let Some(b) = &baseline {
        let _ = writeln!(out, "relative-time baseline: {b}");
    }
    let _ = writeln!(out, "precision: 32-bit floats for training and evaluation");
    let _ = writeln!(
        out,
        "memory: tracked tensor bytes (parameters, gradients, optimizer state, activations), a proxy for GPU memory"
    );
    let _ = writeln!(out, "± is the population standard deviation over runs");
    let _ = writeln!(
        out,
        "epoch times cover training batches; total times include per-epoch test evaluation"
    );
    Ok(out)
}

/// One tab-separated row per configured cell.
pub fn emit_tsv(records: &[CellRecord], timings: &[TimingRecord], baseline: Option<&str>) -> Result<String> {
    let baseline = baseline.map(String::from).or_else(|| default_baseline(records));
    let relative = match &baseline {
        Some(b) if !timings.is_empty() => Some(relative_epoch_times(timings, b)?),
        _ => None,
    };
    let mut out = String::from(
        "cell\tpreset\tmode\tstatus\taccuracy\taccuracy_std\tprecision\tprecision_std\trecall\trecall_std\tf1\tf1_std\tpeak_mib\tepoch_seconds\trelative_epoch_time\ttotal_hours\n",
    );
    for r in records {
        let mut cols = vec![
            r.cell.clone(),
            r.preset.name().to_string(),
            r.mode.name().to_string(),
            match r.status {
                Status::Ok => "ok".into(),
                Status::Failed => FAILED.into(),
            },
        ];
        match &r.metrics {
            Some(m) => {
                for ms in [m.accuracy, m.precision, m.recall, m.f1] {
                    cols.push(format!("{:.2}", 100.0 * ms.mean));
                    cols.push(format!("{:.2}", 100.0 * ms.std));
                }
            }
            None => cols.extend(std::iter::repeat_n(String::new(), 8)),
        }
        cols.push(format_mib(r.peak_bytes));
        let t = timings.iter().find(|t| t.cell == r.cell);
        cols.push(t.map_or(String::new(), |t| format!("{:.4}", t.epoch_seconds.mean)));
        cols.push(
            relative
                .as_ref()
                .and_then(|rel| rel.get(&r.cell))
                .map_or(String::new(), |&x| format_ratio(x)),
        );
        cols.push(t.map_or(String::new(), |t| format_hours(t.total_seconds.mean)));
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BenchError::Results {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<CellRecord>> {
    read_lines(path)
}

pub fn read_timings(path: &Path) -> Result<Vec<TimingRecord>> {
    read_lines(path)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}
