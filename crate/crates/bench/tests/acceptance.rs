//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stdout
//! (visible without `--nocapture`) and fails its test on `FAIL`. Criteria run
//! one at a time so the timing criterion is not contended.

#[path = "../../core/tests/support/grad_cases.rs"]
mod grad_cases;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use bench::report::{format_hours, format_mib, format_percent, format_ratio, RESULTS_FILE};
use bench::{run_benchmark, BenchmarkConfig};
use febench::cnn::CnnHeadConfig;
use febench::encoder::Preset;
use febench::metrics::{accuracy, micro_prf};
use febench::model::{encode_dataset, Classifier, EncodedDataset};
use febench::profiling::{relative_times, MIB};
use febench::synthetic::{make_synthetic, SyntheticSpec};
use febench::train::{mean_std, train, MeanStd, Mode, RunConfig, RunResult};
use febench::weights::write_weights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Seed shared by the training criteria.
const SEED: u64 = 2024;

fn criterion(number: u32, title: &str, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let outcome = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let (verdict, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{verdict} criterion {number}: {title} ({detail})").unwrap();
    out.flush().unwrap();
    if let Err(d) = outcome {
        panic!("criterion {number} failed: {d}");
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn synthetic(spec: SyntheticSpec) -> EncodedDataset {
    let d = make_synthetic(&spec).unwrap();
    let vocab = d.vocabulary(30_000, 1).unwrap();
    encode_dataset(&d, &vocab, 200).unwrap()
}

fn vocab_size(d: &EncodedDataset) -> usize {
    d.train.iter().chain(&d.test).flat_map(|e| &e.ids).max().unwrap() + 1
}

fn tiny_classifier(d: &EncodedDataset) -> Classifier {
    let enc = Preset::BertTiny.config(vocab_size(d));
    let head = CnnHeadConfig::new(enc.hidden, d.classes());
    Classifier::random(enc, SEED, head, SEED + 1).unwrap()
}

fn frozen_run(d: &EncodedDataset, epochs: usize) -> (Classifier, RunResult) {
    let mut model = tiny_classifier(d);
    let config = RunConfig::new(Mode::FE, d.task_kind, epochs, SEED);
    let result = train(&config, d, &mut model).unwrap();
    (model, result)
}

#[test]
fn criterion_1_gradient_correctness() {
    use grad_cases::{fine_tuning_case, frozen_pipeline_case, primitive_cases, POINTS, TOLERANCE};
    criterion(1, "finite-difference gradient checks", || {
        let start = Instant::now();
        let mut worst = (0.0f64, String::new());
        let mut checked = 0;
        for seed in 0..POINTS {
            let mut cases = primitive_cases(seed);
            cases.push(frozen_pipeline_case(seed));
            cases.push(fine_tuning_case(seed));
            for case in cases {
                let err = case.check();
                checked += 1;
                if err > worst.0 {
                    worst = (err, format!("{} seed {seed}", case.name));
                }
            }
        }
        let secs = start.elapsed().as_secs_f64();
        ensure(
            worst.0 < TOLERANCE && secs < 120.0,
            format!(
                "{checked} checks, max relative error {:.2e} at {}, {secs:.1}s",
                worst.0, worst.1
            ),
        )
    });
}

#[test]
fn criterion_2_frozen_encoder_invariant() {
    criterion(
        2,
        "FE leaves encoder bytes and encoder gradient/optimizer ledger at zero",
        || {
            let d = synthetic(SyntheticSpec::single(2, 200, 100, SEED));
            let before = write_weights(&tiny_classifier(&d).encoder.weights).unwrap();
            let (model, result) = frozen_run(&d, 3);
            let after = write_weights(&model.encoder.weights).unwrap();
            ensure(
                before == after && result.encoder_gradient_peak == 0 && result.encoder_optimizer_peak == 0,
                format!(
                    "{} encoder bytes identical: {}, encoder gradient peak {} B, encoder optimizer peak {} B",
                    before.len(),
                    before == after,
                    result.encoder_gradient_peak,
                    result.encoder_optimizer_peak
                ),
            )
        },
    );
}

#[test]
fn criterion_3_efficiency_ordering() {
    criterion(3, "BERT-L-12 FiT costs more memory and time per epoch than FE", || {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
            seed = {SEED}
            repeats = 1
            parallel = 1
            [dataset.synthetic]
            classes = 2
            train_docs = 120
            test_docs = 40
            vocab = 500
            labels = {{ kind = "single" }}
            seed = {SEED}
            [defaults]
            epochs_fe = 2
            epochs_fit = 2
            [[cell]]
            preset = "BERT-L-12"
            mode = "FE"
            [[cell]]
            preset = "BERT-L-12"
            mode = "FiT"
            "#
        );
        let mut config = BenchmarkConfig::parse(&text).unwrap();
        config.output_dir = Some(dir.path().to_path_buf());
        let start = Instant::now();
        let outcome = run_benchmark(&config).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let peak = |cell: &str| outcome.records.iter().find(|r| r.cell == cell).unwrap().peak_bytes;
        let epoch = |cell: &str| {
            outcome
                .timings
                .iter()
                .find(|t| t.cell == cell)
                .unwrap()
                .epoch_seconds
                .mean
        };
        let (fe, fit) = (peak("BERT-L-12-FE"), peak("BERT-L-12-FiT"));
        let ratio = epoch("BERT-L-12-FiT") / epoch("BERT-L-12-FE");
        ensure(
            fit > fe && ratio > 1.3 && secs < 600.0,
            format!(
                "peak FE {:.2} MiB, FiT {:.2} MiB, epoch time ratio {ratio:.2}, {secs:.1}s",
                fe as f64 / MIB,
                fit as f64 / MIB
            ),
        )
    });
}

/// One-based epoch at which `values` first reaches `target`.
fn first_epoch_reaching(values: impl IntoIterator<Item = f64>, target: f64) -> Option<usize> {
    values.into_iter().position(|v| v >= target).map(|i| i + 1)
}

#[test]
fn criterion_4_learnability() {
    criterion(4, "frozen tiny encoder learns synthetic keyword tasks", || {
        let single = synthetic(SyntheticSpec::single(2, 200, 100, SEED));
        let (_, r1) = frozen_run(&single, 30);
        let acc = first_epoch_reaching(r1.epochs.iter().map(|e| e.metrics.accuracy), 0.90);

        let multi = synthetic(SyntheticSpec::multi(5, 2.0, 600, 200, SEED));
        let (_, r2) = frozen_run(&multi, 40);
        let f1 = first_epoch_reaching(r2.epochs.iter().map(|e| e.metrics.f1), 0.85);

        let show = |e: Option<usize>| e.map_or("never".to_string(), |e| format!("epoch {e}"));
        ensure(
            acc.is_some() && f1.is_some(),
            format!(
                "single-label accuracy >= 0.90 at {} (final {:.4}); multi-label micro-F1 >= 0.85 at {} (final {:.4})",
                show(acc),
                r1.final_metrics.accuracy,
                show(f1),
                r2.final_metrics.f1
            ),
        )
    });
}

/// Counts TP/FP/FN by visiting every (document, label) pair of the universe.
fn brute_force_prf(pred: &[BTreeSet<u32>], gold: &[BTreeSet<u32>], universe: u32) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in pred.iter().zip(gold) {
        for label in 0..universe {
            match (p.contains(&label), g.contains(&label)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

#[test]
fn criterion_5_metric_oracles() {
    criterion(5, "micro P/R/F1 against brute-force oracle and worked fixture", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let universe = rng.random_range(1..8u32);
            let docs = rng.random_range(1..20);
            let draw =
                |rng: &mut ChaCha8Rng| -> BTreeSet<u32> { (0..universe).filter(|_| rng.random_bool(0.4)).collect() };
            let pred: Vec<_> = (0..docs).map(|_| draw(&mut rng)).collect();
            let gold: Vec<_> = (0..docs).map(|_| draw(&mut rng)).collect();
            let got = micro_prf(&pred, &gold).map_err(|e| e.to_string())?;
            let want = brute_force_prf(&pred, &gold, universe);
            for (a, b) in [(got.precision, want.0), (got.recall, want.1), (got.f1, want.2)] {
                worst = worst.max((a - b).abs());
            }
        }

        let set = |items: &[&'static str]| items.iter().copied().collect::<BTreeSet<_>>();
        let fixture = micro_prf(&[set(&["a"]), set(&["b"])], &[set(&["a"]), set(&["a", "b"])]).unwrap();
        let fixture_ok = (fixture.precision - 1.0).abs() < 1e-12
            && (fixture.recall - 2.0 / 3.0).abs() < 1e-12
            && (fixture.f1 - 0.8).abs() < 1e-12
            && format!("{:.4}", fixture.recall) == "0.6667";

        let mut single_gap = 0.0f64;
        for _ in 0..100 {
            let n = rng.random_range(1..30);
            let pred: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let gold: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let wrap = |v: &[u32]| v.iter().map(|&x| BTreeSet::from([x])).collect::<Vec<_>>();
            let f1 = micro_prf(&wrap(&pred), &wrap(&gold)).unwrap().f1;
            single_gap = single_gap.max((f1 - accuracy(&pred, &gold).unwrap()).abs());
        }
        ensure(
            worst <= 1e-12 && fixture_ok && single_gap <= 1e-12,
            format!(
                "oracle max diff {worst:.1e}, fixture ({:.4}, {:.4}, {:.4}), single-label |F1 - acc| max {single_gap:.1e}",
                fixture.precision, fixture.recall, fixture.f1
            ),
        )
    });
}

#[test]
fn criterion_6_report_arithmetic() {
    criterion(6, "report cells reproduce published formats", || {
        let cell = format_percent(MeanStd {
            mean: 0.9297,
            std: 0.0006,
        });
        let mib = format_mib(693 * (1 << 20));
        let times = BTreeMap::from([
            ("baseline".to_string(), 10.0),
            ("cell".to_string(), 26.2),
            ("small".to_string(), 0.5),
        ]);
        let rel = relative_times(&times, "baseline").map_err(|e| e.to_string())?;
        let ratio = format_ratio(rel["cell"]);
        let small = format_ratio(rel["small"]);
        let hours = format_hours(5400.0);
        ensure(
            cell == "92.97 ± 0.06" && mib == "693" && ratio == "2.62" && small == "0.05" && hours == "1.50",
            format!("{cell:?}, {mib:?} MiB, relative {ratio:?} and {small:?}, {hours:?} h"),
        )
    });
}

#[test]
fn criterion_7_determinism() {
    criterion(
        7,
        "two `bench run` invocations give byte-identical result records",
        || {
            let dir = tempfile::tempdir().unwrap();
            let config = dir.path().join("grid.toml");
            std::fs::write(
                &config,
                format!(
                    r#"
                seed = {SEED}
                repeats = 2
                [dataset.synthetic]
                classes = 3
                train_docs = 60
                test_docs = 30
                vocab = 100
                labels = {{ kind = "single" }}
                seed = {SEED}
                [[cell]]
                preset = "BERT-Tiny"
                mode = "FE"
                epochs = 2
                [[cell]]
                preset = "BERT-Tiny"
                mode = "FiT"
                epochs = 1
                "#
                ),
            )
            .unwrap();
            let mut outputs = Vec::new();
            for name in ["first", "second"] {
                let out_dir = dir.path().join(name);
                let out = Command::new(env!("CARGO_BIN_EXE_bench"))
                    .arg("run")
                    .arg(&config)
                    .arg("--out")
                    .arg(&out_dir)
                    .output()
                    .unwrap();
                if !out.status.success() {
                    return Err(format!("bench run failed: {}", String::from_utf8_lossy(&out.stderr)));
                }
                outputs.push(std::fs::read(out_dir.join(RESULTS_FILE)).unwrap());
            }
            ensure(
                !outputs[0].is_empty() && outputs[0] == outputs[1],
                format!(
                    "{} bytes each, identical: {}",
                    outputs[0].len(),
                    outputs[0] == outputs[1]
                ),
            )
        },
    );
}

#[test]
fn criterion_8_aggregation() {
    criterion(8, "mean and population std over {1, 2, 3}", || {
        let m = mean_std(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
        ensure(
            (m.mean - 2.0).abs() < 1e-12 && (m.std - 0.8165).abs() <= 1e-4,
            format!("mean {}, std {:.6}", m.mean, m.std),
        )
    });
}
