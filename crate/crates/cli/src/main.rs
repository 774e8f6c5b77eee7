use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nesy_core::evaluation::PaperTables;
use nesy_core::pipeline::{self, Overrides, PipelineConfig, OUT_ENV};
use nesy_core::training::Strategy;
use nesy_core::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "nesy", version, about = "Train CNNs with sparse filters and extract rule-sets from them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Directory-per-class image folder.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Synthetic preset, e.g. `c3`.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Clone)]
struct DirArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone under one strategy and write a checkpoint.
    Train(RunArgs),
    /// Binarize the training split and learn a rule-set.
    Extract(DirArgs),
    /// Evaluate CNN and rule-set on the test split.
    Eval(DirArgs),
    /// Classify one image (file path or dataset id) and print its justification.
    Explain {
        #[command(flatten)]
        dir: DirArgs,
        image: String,
        #[arg(long)]
        json: bool,
    },
    /// Name rule predicates by mask concepts and write overlays.
    Label(DirArgs),
    /// Aggregate run results and optionally check the published tables.
    Report {
        /// Run result files or directories.
        results: Vec<PathBuf>,
        #[arg(long)]
        check_claims: bool,
        /// Table transcriptions to check instead of the bundled ones.
        #[arg(long, requires = "table2")]
        table1: Option<PathBuf>,
        #[arg(long, requires = "table1")]
        table2: Option<PathBuf>,
        /// Write the report JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, extract and evaluate `--runs` seeds and aggregate.
    Experiment(RunArgs),
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn resolve_config(a: &RunArgs) -> nesy_core::Result<PipelineConfig> {
    let base = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let o = Overrides {
        strategy: a.strategy,
        data: a.data.clone(),
        synthetic: a.synthetic.clone(),
        out: a.out.clone(),
        seed: a.seed,
        runs: a.runs,
    };
    base.resolve(&o, env_out())
}

fn checkpoint_dir(d: &DirArgs) -> PathBuf {
    d.out
        .clone()
        .or_else(env_out)
        .unwrap_or_else(|| PathBuf::from(pipeline::DEFAULT_OUT))
}

fn print_json<T: Serialize>(v: &T) -> nesy_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn run(cli: Cli) -> nesy_core::Result<ExitCode> {
    match cli.command {
        Command::Train(a) => print_json(&pipeline::cmd_train(&resolve_config(&a)?)?)?,
        Command::Extract(d) => print_json(&pipeline::cmd_extract(&checkpoint_dir(&d))?)?,
        Command::Eval(d) => print_json(&pipeline::cmd_eval(&checkpoint_dir(&d))?)?,
        Command::Explain { dir, image, json } => {
            let e = pipeline::cmd_explain(&checkpoint_dir(&dir), &image)?;
            if json {
                print_json(&e)?;
            } else {
                print!("{}", e.render_text());
            }
        }
        Command::Label(d) => print_json(&pipeline::cmd_label(&checkpoint_dir(&d))?)?,
        Command::Report {
            results,
            check_claims,
            table1,
            table2,
            out,
        } => {
            let tables = match (check_claims, table1, table2) {
                (false, _, _) => None,
                (true, Some(t1), Some(t2)) => Some(PaperTables::read(&t1, &t2)?),
                (true, _, _) => Some(PaperTables::embedded()),
            };
            let report = pipeline::cmd_report(&results, tables.as_ref())?;
            if let Some(path) = out {
                pipeline::write_report(&report, &path)?;
            }
            print_json(&report)?;
            if report.claims.as_ref().is_some_and(|c| !c.all_pass()) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Experiment(a) => print_json(&pipeline::cmd_experiment(&resolve_config(&a)?)?)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let rec = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string()));
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
