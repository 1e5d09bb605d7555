//! `css`: train, evaluate and inspect channel self-supervision runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use css_core::harness::artifacts::{emit_diversity_artifacts, plot_run, write_matrix_csv};
use css_core::harness::{evaluate, train, ExperimentConfig, Split};
use css_core::{transform_separability, CssError};

#[derive(Parser)]
#[command(
    name = "css",
    version,
    about = "Channel self-supervision online distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field, e.g. `--set distill.temperature=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Dataset root replacing the one recorded in the checkpoint.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write diversity and separability artifacts for a checkpoint.
    Diversity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to `<checkpoint>/diversity`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Re-render the curve plots of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            let usage = e
                .chain()
                .any(|c| c.downcast_ref::<CssError>().is_some_and(CssError::is_usage));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let outcome = train(&cfg)?;
            println!("{}", outcome.final_record());
            println!("run_dir={}", outcome.run_dir.display());
        }
        Command::Eval {
            checkpoint,
            split,
            data_dir,
        } => {
            let ev = evaluate(&checkpoint, split, data_dir)?;
            println!("{}", ev.record);
        }
        Command::Diversity {
            checkpoint,
            out,
            split,
            data_dir,
        } => {
            let ev = evaluate(&checkpoint, split, data_dir)?;
            let report = ev.diversity()?;
            let out = out.unwrap_or_else(|| checkpoint.join("diversity"));
            emit_diversity_artifacts(std::slice::from_ref(&report), &out, Some(&ev.net1.features))?;
            write_matrix_csv(&out.join("per_pair.csv"), &report.per_pair)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
            print!(
                "intra_net={} inter_net={}",
                fmt(report.intra_net),
                fmt(report.inter_net)
            );
            if ev.net1.features.len() >= 2 {
                let sep = transform_separability(&ev.net1.features)?;
                print!(
                    " transform_probe_accuracy={} silhouette={}",
                    sep.transform_probe_accuracy, sep.silhouette
                );
            }
            println!();
            println!("artifacts={}", out.display());
        }
        Command::Plot { run } => {
            for p in plot_run(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
