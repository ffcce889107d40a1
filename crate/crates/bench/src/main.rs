use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bench::config::{BenchmarkConfig, OUTPUT_ENV};
use bench::report::{emit_report, emit_tsv, read_results, read_timings, TIMINGS_FILE};
use bench::{run_benchmark, BenchError, Overrides, Result};
use clap::{Parser, Subcommand};
use febench::metrics::label_density;
use febench::synthetic::{make_synthetic, SyntheticSpec};
use febench::text::{save_dataset, DataFormat};

#[derive(Parser)]
#[command(
    name = "bench",
    version,
    about = "Feature extraction vs fine-tuning benchmark driver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured cell and write results and reports.
    Run {
        config: PathBuf,
        /// Master seed (run i of a cell uses seed + i).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Cells trained concurrently; keep at 1 for clean timings.
        #[arg(long)]
        parallel: Option<usize>,
        /// Output directory.
        #[arg(long, env = OUTPUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic keyword corpus from a TOML spec.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
    },
    /// Render the report for an existing results file.
    Report {
        results: PathBuf,
        #[arg(long)]
        baseline: Option<String>,
        /// Timings file; defaults to timings.jsonl next to the results.
        #[arg(long)]
        timings: Option<PathBuf>,
        /// Print the tab-separated table instead.
        #[arg(long)]
        tsv: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

impl From<Format> for DataFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => DataFormat::Jsonl,
            Format::Csv => DataFormat::Csv,
        }
    }
}

fn run(config: &Path, overrides: Overrides) -> Result<i32> {
    let mut config = BenchmarkConfig::load(config)?;
    overrides.apply(&mut config)?;
    let outcome = run_benchmark(&config)?;
    print!("{}", outcome.report);
    eprintln!("results written to {}", outcome.out_dir.display());
    if outcome.failed() > 0 {
        eprintln!("{} of {} cells FAILED", outcome.failed(), outcome.records.len());
    }
    Ok(outcome.exit_code())
}

fn synth(spec: &Path, out: &Path, format: DataFormat) -> Result<i32> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", spec.display())))?;
    let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))?;
    let data = make_synthetic(&spec)?;
    save_dataset(&data, out, format)?;
    println!(
        "{}: {} train / {} test documents, {} labels, density {:.2}",
        out.display(),
        data.train.len(),
        data.test.len(),
        data.classes(),
        label_density(&data)?
    );
    Ok(0)
}

fn report(results: &Path, baseline: Option<&str>, timings: Option<PathBuf>, tsv: bool) -> Result<i32> {
    let records = read_results(results)?;
    let timings_path = timings.unwrap_or_else(|| results.with_file_name(TIMINGS_FILE));
    let timings = if timings_path.exists() {
        read_timings(&timings_path)?
    } else {
        Vec::new()
    };
    let text = if tsv {
        emit_tsv(&records, &timings, baseline)?
    } else {
        emit_report(&records, &timings, baseline)?
    };
    print!("{text}");
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            repeats,
            parallel,
            out,
        } => run(
            &config,
            Overrides {
                seed,
                repeats,
                parallel,
                out,
            },
        ),
        Command::Synth { spec, out, format } => synth(&spec, &out, format.into()),
        Command::Report {
            results,
            baseline,
            timings,
            tsv,
        } => report(&results, baseline.as_deref(), timings, tsv),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
