//! Command-line driver: run experiment batches, verify transcripts by
//! replay, execute sensitivity plans, and regenerate reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use veil_core::ledger::emit_translation_report;
use veil_core::runner::{
    cmd_emit_ledger, cmd_replay, cmd_report, cmd_run, cmd_sensitivity, load_config,
};
use veil_core::workflow::ExecutionOptions;

#[derive(Parser)]
#[command(
    name = "veil",
    version,
    about = "Seeded multi-agent engine for veil-of-ignorance distributive-justice experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExecutionArgs {
    /// Experiment configuration file (translation-ledger JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; per-group seeds are derived from it.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of groups running concurrently.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Global cap on concurrent in-flight backend requests.
    #[arg(long)]
    backend_cap: Option<usize>,
    /// Per-group backend call budget; exceeding it aborts the group.
    #[arg(long)]
    max_backend_calls: Option<u64>,
    /// Strip timestamps so equal runs produce byte-identical files.
    #[arg(long)]
    canonical: bool,
}

impl ExecutionArgs {
    fn options(&self) -> ExecutionOptions {
        ExecutionOptions {
            parallelism: self.parallelism,
            canonical: self.canonical,
            backend_cap: self.backend_cap,
            max_backend_calls: self.max_backend_calls,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment batch for a configuration.
    Run(ExecutionArgs),
    /// Re-derive all computed quantities of a transcript and verify them.
    Replay {
        /// Transcript file (*.jsonl).
        transcript: PathBuf,
    },
    /// Run the base config plus one-factor-at-a-time overrides and compare.
    Sensitivity {
        #[command(flatten)]
        execution: ExecutionArgs,
        /// Overrides file: {"overrides": [{layer, aspect, value}, ...]}.
        #[arg(long)]
        overrides: PathBuf,
    },
    /// Regenerate analysis outputs from a directory of transcripts.
    Report {
        /// Directory containing group transcripts.
        results: PathBuf,
    },
    /// Validate a configuration and print the resolved summary.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render the translation-ledger report for a configuration.
    EmitLedger {
        #[arg(long)]
        config: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run(args) => {
            let summary = cmd_run(&args.config, args.seed, &args.options(), &args.out)?;
            println!(
                "run complete: {} group(s) completed, {} failed, outputs in {}",
                summary.completed,
                summary.failed,
                summary.out_dir.display()
            );
            for (category, count) in summary
                .table
                .counts_array()
                .iter()
                .enumerate()
                .map(|(i, c)| (veil_core::analysis::OutcomeCategory::ALL[i], *c))
            {
                println!("  {category}: {count}");
            }
            Ok(exit_for(summary.failed == 0))
        }
        Command::Replay { transcript } => {
            let report = cmd_replay(&transcript)?;
            if report.is_clean() {
                println!(
                    "replay clean: {} ({})",
                    report.group_id,
                    if report.record.is_some() {
                        "record reconstructed"
                    } else {
                        "aborted group, partial transcript consistent"
                    }
                );
                Ok(ExitCode::SUCCESS)
            } else {
                println!("replay found {} issue(s) in {}:", report.issues.len(), report.group_id);
                for issue in &report.issues {
                    println!("  - {issue}");
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Sensitivity {
            execution,
            overrides,
        } => {
            let summary = cmd_sensitivity(
                &execution.config,
                &overrides,
                execution.seed,
                &execution.options(),
                &execution.out,
            )?;
            println!(
                "sensitivity complete: base + {} variant(s), comparison in {}",
                summary.variants.len(),
                summary.comparison_files[1].display()
            );
            Ok(exit_for(summary.all_completed()))
        }
        Command::Report { results } => {
            let summary = cmd_report(&results)?;
            println!("report regenerated from {} record(s)", summary.records);
            for warning in &summary.skipped {
                eprintln!("warning: {warning}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateConfig { config } => {
            let (_, resolved, _) = load_config(&config)?;
            println!(
                "config valid: {} groups of {}, language {}, backend {:?}",
                resolved.params.groups,
                resolved.params.group_size,
                resolved.params.language,
                match &resolved.params.backend {
                    veil_core::ledger::BackendBinding::Scripted { .. } => "scripted".to_string(),
                    veil_core::ledger::BackendBinding::Http(cfg) => cfg.model.clone(),
                }
            );
            println!("{} ledger entries documented", resolved.entries.len());
            let _ = emit_translation_report(&resolved);
            Ok(ExitCode::SUCCESS)
        }
        Command::EmitLedger { config, out } => {
            let report = cmd_emit_ledger(&config, out.as_deref())?;
            match out {
                Some(path) => println!("translation report written to {}", path.display()),
                None => print!("{report}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(success: bool) -> ExitCode {
    if success {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
