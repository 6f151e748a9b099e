//! Command-level drivers: batch execution with persistence, replay
//! verification, sensitivity batches, and report regeneration.
//!
//! A run directory contains one line-delimited JSON transcript per group,
//! the run manifest, a copy of the configuration with its hash, the
//! translation ledger report, and the analysis exports. Everything an
//! analysis needs is re-derivable from the transcripts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    chi_square_independence, tabulate_outcomes, transition_matrix, AnalysisReport, ChiSquare,
    ExportError, LabeledChiSquare, OutcomeTable,
};
use crate::ledger::{
    emit_translation_report, sensitivity_plan, validate_config, ConfigError, ExperimentConfig,
    RawConfig, SensitivityOverride,
};
use crate::records::{GroupRecord, RankingTag};
use crate::replay::{replay_transcript, ReplayReport};
use crate::transcript::{read_transcript, write_transcript, TranscriptError};
use crate::workflow::{run_experiment, ExecutionOptions, GroupError, GroupStatus};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("configuration invalid:\n{}", format_config_errors(.0))]
    Config(Vec<ConfigError>),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("overrides file invalid: {detail}")]
    Overrides { detail: String },
}

fn format_config_errors(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn read_file(path: &Path) -> Result<String, RunnerError> {
    std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), RunnerError> {
    std::fs::write(path, content).map_err(|source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatusEntry {
    pub index: u64,
    pub group_id: String,
    #[serde(flatten)]
    pub status: GroupStatus,
}

/// Provenance record for one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub per_group_seeds: Vec<String>,
    pub software_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_unix_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix_ms: Option<u64>,
    pub groups: Vec<GroupStatusEntry>,
}

/// What a run left behind.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub completed: usize,
    pub failed: usize,
    pub table: OutcomeTable,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn all_completed(&self) -> bool {
        self.failed == 0
    }
}

fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Loads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<(RawConfig, ExperimentConfig, String), RunnerError> {
    let text = read_file(path)?;
    let raw = RawConfig::from_json(&text).map_err(|e| RunnerError::Config(vec![e]))?;
    let config = validate_config(&raw, path.parent()).map_err(RunnerError::Config)?;
    Ok((raw, config, text))
}

fn analysis_from_records(records: &[GroupRecord], label: &str) -> AnalysisReport {
    let table = tabulate_outcomes(records, label);
    AnalysisReport {
        matrices: vec![
            transition_matrix(records, RankingTag::R1, RankingTag::R4),
            transition_matrix(records, RankingTag::R3, RankingTag::R4),
        ],
        permutation_transitions: vec![crate::analysis::permutation_transitions(
            records,
            RankingTag::R1,
            RankingTag::R4,
        )],
        comparisons: Vec::new(),
        tables: vec![table],
    }
}

/// Executes one validated config into `out_dir`: transcripts, manifest,
/// translation report, and analysis exports.
fn execute_into(
    config: &ExperimentConfig,
    config_text: &str,
    label: &str,
    master_seed: u64,
    options: &ExecutionOptions,
    out_dir: &Path,
) -> Result<(RunSummary, Vec<GroupRecord>), RunnerError> {
    std::fs::create_dir_all(out_dir).map_err(|source| RunnerError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let started = (!options.canonical).then(now_unix_ms);

    let mut files = Vec::new();
    let config_path = out_dir.join("config.json");
    write_file(&config_path, config_text)?;
    files.push(config_path);

    // Manifest skeleton up front; statuses are appended once groups finish.
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: sha256_hex(config_text.as_bytes()),
        master_seed,
        per_group_seeds: (0..config.params.groups as u64)
            .map(|i| crate::rng::seed_hex(&crate::rng::group_seed(master_seed, i)))
            .collect(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_ms: started,
        finished_unix_ms: None,
        groups: Vec::new(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_file(
        &manifest_path,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    let runs = run_experiment(config, master_seed, options)?;

    for run in &runs {
        let path = out_dir.join(format!("{}.jsonl", run.group_id));
        write_transcript(&path, &run.events).map_err(|source| RunnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        files.push(path);
    }

    manifest.finished_unix_ms = (!options.canonical).then(now_unix_ms);
    manifest.groups = runs
        .iter()
        .map(|r| GroupStatusEntry {
            index: r.index,
            group_id: r.group_id.clone(),
            status: r.status.clone(),
        })
        .collect();
    write_file(
        &manifest_path,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    files.push(manifest_path);

    let report_path = out_dir.join("translation_report.md");
    write_file(&report_path, &emit_translation_report(config))?;
    files.push(report_path);

    let records: Vec<GroupRecord> = runs.iter().filter_map(|r| r.record.clone()).collect();
    let analysis = analysis_from_records(&records, label);
    files.extend(crate::analysis::export_results(out_dir, &analysis)?);

    let completed = runs
        .iter()
        .filter(|r| r.status == GroupStatus::Completed)
        .count();
    let summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        completed,
        failed: runs.len() - completed,
        table: analysis.tables[0].clone(),
        files,
    };
    Ok((summary, records))
}

/// `run` subcommand: execute a config end to end into an output directory.
pub fn cmd_run(
    config_path: &Path,
    master_seed: u64,
    options: &ExecutionOptions,
    out_dir: &Path,
) -> Result<RunSummary, RunnerError> {
    let (_, config, text) = load_config(config_path)?;
    let (summary, _) = execute_into(&config, &text, "run", master_seed, options, out_dir)?;
    Ok(summary)
}

/// `replay` subcommand: structural validation plus full re-derivation of
/// one transcript.
pub fn cmd_replay(transcript_path: &Path) -> Result<ReplayReport, RunnerError> {
    let events = read_transcript(transcript_path)?;
    Ok(replay_transcript(&events))
}

/// What `report` found in a results directory.
#[derive(Debug)]
pub struct ReportSummary {
    pub records: usize,
    pub skipped: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// `report` subcommand: regenerate analysis outputs from the transcripts
/// alone, without re-execution. Unreadable or unsupported transcripts are
/// skipped with a warning.
pub fn cmd_report(results_dir: &Path) -> Result<ReportSummary, RunnerError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(results_dir)
        .map_err(|source| RunnerError::Io {
            path: results_dir.display().to_string(),
            source,
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("jsonl"))
        .collect();
    paths.sort();
    for path in &paths {
        match read_transcript(path) {
            Ok(events) => {
                let report = replay_transcript(&events);
                if !report.issues.is_empty() {
                    skipped.push(format!(
                        "{}: replay issues: {}",
                        path.display(),
                        report.issues.join("; ")
                    ));
                }
                match report.record {
                    Some(record) if report.issues.is_empty() => records.push(record),
                    Some(_) => {}
                    None => {
                        if report.aborted {
                            skipped.push(format!("{}: group aborted, excluded", path.display()));
                        }
                    }
                }
            }
            Err(e) => skipped.push(format!("{}: {e}", path.display())),
        }
    }
    let analysis = analysis_from_records(&records, "run");
    let files = crate::analysis::export_results(results_dir, &analysis)?;
    Ok(ReportSummary {
        records: records.len(),
        skipped,
        files,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct OverridesDoc {
    overrides: Vec<SensitivityOverride>,
}

/// Result of a sensitivity batch.
#[derive(Debug)]
pub struct SensitivitySummary {
    pub base: RunSummary,
    pub variants: Vec<(String, RunSummary)>,
    pub comparison_files: Vec<PathBuf>,
}

impl SensitivitySummary {
    pub fn all_completed(&self) -> bool {
        self.base.all_completed() && self.variants.iter().all(|(_, s)| s.all_completed())
    }
}

/// `sensitivity` subcommand: run the base and each one-factor-at-a-time
/// variant under the same master seed, then emit a side-by-side comparison
/// labeled by the varied layer, with chi-square tests against the base.
pub fn cmd_sensitivity(
    config_path: &Path,
    overrides_path: &Path,
    master_seed: u64,
    options: &ExecutionOptions,
    out_dir: &Path,
) -> Result<SensitivitySummary, RunnerError> {
    let (raw, config, text) = load_config(config_path)?;
    let overrides_text = read_file(overrides_path)?;
    let doc: OverridesDoc =
        serde_json::from_str(&overrides_text).map_err(|e| RunnerError::Overrides {
            detail: e.to_string(),
        })?;
    let plan = sensitivity_plan(&raw, &doc.overrides, config_path.parent())
        .map_err(RunnerError::Config)?;

    let (base_summary, base_records) = execute_into(
        &config,
        &text,
        "base",
        master_seed,
        options,
        &out_dir.join("base"),
    )?;
    let base_table = tabulate_outcomes(&base_records, "base");

    let mut variants = Vec::new();
    let mut tables = vec![base_table.clone()];
    let mut comparisons = Vec::new();
    for variant in &plan {
        let dir_name = variant
            .label
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect::<String>();
        let variant_text =
            serde_json::to_string_pretty(&variant.raw).expect("config serializes");
        let (summary, records) = execute_into(
            &variant.config,
            &variant_text,
            &variant.label,
            master_seed,
            options,
            &out_dir.join(dir_name),
        )?;
        let table = tabulate_outcomes(&records, variant.label.clone());
        comparisons.push(LabeledChiSquare {
            label: format!("{} [{} layer] vs base", variant.label, variant.layer),
            result: chi_square_independence(&base_table, &table),
        });
        tables.push(table);
        variants.push((variant.label.clone(), summary));
    }

    // Side-by-side comparison artifacts.
    let csv_path = out_dir.join("comparison.csv");
    write_file(&csv_path, &crate::analysis::export_csv(&tables))?;
    let md_path = out_dir.join("comparison.md");
    write_file(&md_path, &comparison_markdown(&tables, &comparisons, &plan))?;

    Ok(SensitivitySummary {
        base: base_summary,
        variants,
        comparison_files: vec![csv_path, md_path],
    })
}

fn comparison_markdown(
    tables: &[OutcomeTable],
    comparisons: &[LabeledChiSquare],
    plan: &[crate::ledger::SensitivityVariant],
) -> String {
    let mut out = String::from("# Sensitivity Comparison\n\n");
    if !plan.is_empty() {
        out.push_str("Varied aspects (one factor at a time):\n\n");
        for variant in plan {
            out.push_str(&format!(
                "- `{}` ({} layer)\n",
                variant.label, variant.layer
            ));
        }
        out.push('\n');
    }
    out.push_str("| Outcome |");
    for table in tables {
        out.push_str(&format!(" {} |", table.label));
    }
    out.push_str("\n|---|");
    for _ in tables {
        out.push_str("---|");
    }
    out.push('\n');
    for category in crate::analysis::OutcomeCategory::ALL {
        out.push_str(&format!("| {} |", category.id()));
        for table in tables {
            out.push_str(&format!(" {} |", table.count(category)));
        }
        out.push('\n');
    }
    out.push_str("| **total** |");
    for table in tables {
        out.push_str(&format!(" {} |", table.total));
    }
    out.push('\n');

    if !comparisons.is_empty() {
        out.push_str("\n## Independence vs base\n\n| Comparison | Statistic | df | p |\n|---|---|---|---|\n");
        for comparison in comparisons {
            match &comparison.result {
                ChiSquare::Result {
                    statistic,
                    degrees_of_freedom,
                    p_value,
                } => out.push_str(&format!(
                    "| {} | {:.4} | {} | {:.6} |\n",
                    comparison.label, statistic, degrees_of_freedom, p_value
                )),
                ChiSquare::NotTestable { reason } => out.push_str(&format!(
                    "| {} | not testable: {} | - | - |\n",
                    comparison.label, reason
                )),
            }
        }
    }
    out
}

/// `emit-ledger` subcommand: render the translation report for a config.
pub fn cmd_emit_ledger(config_path: &Path, out: Option<&Path>) -> Result<String, RunnerError> {
    let (_, config, _) = load_config(config_path)?;
    let report = emit_translation_report(&config);
    if let Some(path) = out {
        write_file(path, &report)?;
    }
    Ok(report)
}
