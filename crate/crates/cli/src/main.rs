//! `vflab`: generate and preprocess alarm data, run cross-validated
//! experiments, benchmark training time and render reports.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vflab_core::dataset::{
    bin_alarm_counts, drop_all_zero_features, generate_synthetic, load_csv, write_binned_csv, write_csv, CsvSchema,
    GeneratorSpec,
};
use vflab_core::harness::{
    benchmark_time, render_csv, render_grid_markdown, render_markdown, render_timing_csv, render_timing_markdown,
    reports_from_json, run_experiment, BenchConfig, ExperimentConfig, MetricsReport,
};
use vflab_core::Result;

#[derive(Parser)]
#[command(name = "vflab", version, about = "Vertical federated learning experiments on alarm logs")]
struct Cli {
    /// Overrides the seed of every config (and the generator seed of gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic alarm CSV and its feature-group JSON.
    GenData {
        spec: PathBuf,
        out: PathBuf,
        /// Feature-group output; defaults to `<out stem>.groups.json`.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Drops all-zero alarms and bins durations into four levels.
    Preprocess {
        input: PathBuf,
        out: PathBuf,
        #[arg(long, default_value = "label")]
        label_column: String,
    },
    /// Runs one experiment and writes its report JSON.
    Run {
        config: PathBuf,
        /// Report destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs one experiment and prints every grid point's scores.
    Grid {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Times training at the first grid point of each configured run.
    Bench {
        config: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
    /// Renders one report (or a JSON array of reports) as a table.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_report(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn default_groups_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.groups.json"))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, groups } => {
            let spec = GeneratorSpec::from_json(&std::fs::read_to_string(&spec)?)?;
            let data = generate_synthetic(&spec, cli.seed.unwrap_or(0))?;
            write_csv(BufWriter::new(File::create(&out)?), &data.dataset)?;
            let groups = groups.unwrap_or_else(|| default_groups_path(&out));
            std::fs::write(&groups, serde_json::to_string_pretty(&data.groups)?)?;
            eprintln!("wrote {} rows to {} and groups to {}", data.dataset.n_obs(), out.display(), groups.display());
        }
        Command::Preprocess { input, out, label_column } => {
            let raw = load_csv(&input, &CsvSchema { label_column })?;
            let binned = bin_alarm_counts(&drop_all_zero_features(&raw));
            write_binned_csv(BufWriter::new(File::create(&out)?), &binned)?;
            eprintln!("kept {} of {} features over {} rows", binned.n_features(), raw.n_features(), binned.n_obs());
        }
        Command::Run { config, out } => {
            let report = run_experiment(&load_config(&config, cli.seed)?)?;
            write_report(&report, out.as_deref())?;
            if out.is_some() {
                print!("{}", render_markdown(std::slice::from_ref(&report)));
            }
        }
        Command::Grid { config, out } => {
            let report = run_experiment(&load_config(&config, cli.seed)?)?;
            print!("{}", render_grid_markdown(&report));
            if let Some(p) = out {
                std::fs::write(p, report.to_json())?;
            }
        }
        Command::Bench { config, repeats, format } => {
            let mut bench = BenchConfig::from_path(&config)?;
            if let Some(s) = cli.seed {
                bench.runs.iter_mut().for_each(|r| r.seed = s);
            }
            let table = benchmark_time(&bench.runs, repeats.unwrap_or(bench.repeats))?;
            match format {
                Format::Md => print!("{}", render_timing_markdown(&table)),
                Format::Csv => print!("{}", render_timing_csv(&table)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&table)?),
            }
        }
        Command::Report { report, format } => {
            let reports = reports_from_json(&std::fs::read_to_string(&report)?)?;
            match format {
                Format::Md => print!("{}", render_markdown(&reports)),
                Format::Csv => print!("{}", render_csv(&reports)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&reports)?),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
