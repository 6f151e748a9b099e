//! Prompt template resources, keyed by (stage, language).
//!
//! Three language sets ship embedded (English, Mandarin, Spanish); a
//! directory of additional or overriding sets can be supplied through the
//! experiment configuration. Wording is a reconstruction of the original
//! study script, flagged as such in the translation ledger.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::agent::{RetryTexts, Stage};
use crate::domain::PrincipleKind;

pub const EMBEDDED_LANGUAGES: [&str; 3] = ["english", "mandarin", "spanish"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no prompt templates for language `{language}`")]
    MissingLanguage { language: String },
    #[error("missing template `{key}` for language `{language}`")]
    MissingTemplate { language: String, key: String },
    #[error("failed to load templates from {path}: {detail}")]
    Load { path: String, detail: String },
}

/// All templates for one language.
#[derive(Debug, Clone, Deserialize)]
pub struct TemplateSet {
    pub language: String,
    sections: BTreeMap<String, String>,
    phases: BTreeMap<String, String>,
    principles: BTreeMap<String, String>,
    fragments: BTreeMap<String, String>,
    tasks: BTreeMap<String, String>,
    schema_instructions: BTreeMap<String, String>,
}

impl TemplateSet {
    fn lookup<'a>(
        &'a self,
        map: &'a BTreeMap<String, String>,
        key: &str,
    ) -> Result<&'a str, PromptError> {
        map.get(key)
            .map(String::as_str)
            .ok_or_else(|| PromptError::MissingTemplate {
                language: self.language.clone(),
                key: key.to_string(),
            })
    }

    pub fn section(&self, key: &str) -> Result<&str, PromptError> {
        self.lookup(&self.sections, key)
    }

    pub fn phase(&self, key: &str) -> Result<&str, PromptError> {
        self.lookup(&self.phases, key)
    }

    pub fn principle_name(&self, kind: PrincipleKind) -> Result<&str, PromptError> {
        self.lookup(&self.principles, kind.id())
    }

    pub fn fragment(&self, key: &str) -> Result<&str, PromptError> {
        self.lookup(&self.fragments, key)
    }

    pub fn task(&self, stage: Stage) -> Result<&str, PromptError> {
        self.lookup(&self.tasks, stage.key())
    }

    pub fn schema_instruction(&self, key: &str) -> Result<&str, PromptError> {
        self.lookup(&self.schema_instructions, key)
    }

    /// One localized line per principle, code first.
    pub fn principles_block(&self) -> Result<String, PromptError> {
        let mut lines = Vec::new();
        for kind in PrincipleKind::ALL {
            lines.push(format!(
                "({}) [{}] {}",
                kind.code(),
                kind.id(),
                self.principle_name(kind)?
            ));
        }
        Ok(lines.join("\n"))
    }

    pub fn retry_texts(&self) -> Result<RetryTexts, PromptError> {
        Ok(RetryTexts {
            schema_error: self.fragment("retry_schema")?.to_string(),
            too_short: self.fragment("retry_too_short")?.to_string(),
            constraint_violation: self.fragment("retry_constraint")?.to_string(),
        })
    }

    fn validate(&self) -> Result<(), PromptError> {
        for key in [
            "name",
            "role",
            "balance",
            "phase",
            "memory",
            "participants",
            "history",
        ] {
            self.section(key)?;
        }
        for key in ["individual", "group"] {
            self.phase(key)?;
        }
        for kind in PrincipleKind::ALL {
            self.principle_name(kind)?;
        }
        for key in [
            "memory_empty",
            "history_elided",
            "payoff_reveal",
            "ballot_reveal",
            "binding_reveal",
            "checkpoint_ranking",
            "checkpoint_discussion",
            "distribution_table_hinted",
            "distribution_table_plain",
            "rule_consensus",
            "rule_fallback_principle",
            "rule_fallback_distribution",
            "retry_schema",
            "retry_too_short",
            "retry_constraint",
        ] {
            self.fragment(key)?;
        }
        for stage in [
            Stage::RankingInitial,
            Stage::RankingInformed,
            Stage::ApplicationChoice,
            Stage::RankingFinalIndividual,
            Stage::PrivateAssessment,
            Stage::Statement,
            Stage::Readiness,
            Stage::BallotVote,
            Stage::BallotConfirm,
            Stage::MemoryUpdate,
            Stage::RankingPostGroup,
        ] {
            self.task(stage)?;
        }
        for key in [
            "ranking",
            "principle_choice",
            "statement",
            "readiness",
            "ballot",
            "confirmation",
            "memory_update",
            "private_assessment",
        ] {
            self.schema_instruction(key)?;
        }
        Ok(())
    }
}

/// Loaded template sets, one per language.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    sets: BTreeMap<String, TemplateSet>,
}

impl PromptLibrary {
    /// The three sets shipped with the crate.
    pub fn embedded() -> PromptLibrary {
        let sources = [
            include_str!("../data/prompts/english.json"),
            include_str!("../data/prompts/mandarin.json"),
            include_str!("../data/prompts/spanish.json"),
        ];
        let mut sets = BTreeMap::new();
        for source in sources {
            let set: TemplateSet =
                serde_json::from_str(source).expect("embedded templates are well-formed");
            set.validate().expect("embedded templates are complete");
            sets.insert(set.language.clone(), set);
        }
        PromptLibrary { sets }
    }

    /// Embedded sets plus every `*.json` template file in `dir` (overrides
    /// win on language collisions).
    pub fn embedded_with_overrides(dir: &Path) -> Result<PromptLibrary, PromptError> {
        let mut library = PromptLibrary::embedded();
        let entries = std::fs::read_dir(dir).map_err(|e| PromptError::Load {
            path: dir.display().to_string(),
            detail: e.to_string(),
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| PromptError::Load {
                path: dir.display().to_string(),
                detail: e.to_string(),
            })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Load {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            let set: TemplateSet =
                serde_json::from_str(&text).map_err(|e| PromptError::Load {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })?;
            set.validate()?;
            library.sets.insert(set.language.clone(), set);
        }
        Ok(library)
    }

    pub fn get(&self, language: &str) -> Result<&TemplateSet, PromptError> {
        self.sets
            .get(language)
            .ok_or_else(|| PromptError::MissingLanguage {
                language: language.to_string(),
            })
    }

    pub fn has_language(&self, language: &str) -> bool {
        self.sets.contains_key(language)
    }

    pub fn languages(&self) -> Vec<&str> {
        self.sets.keys().map(String::as_str).collect()
    }
}

/// Fills `{key}` placeholders. Unknown placeholders are left intact.
pub fn render(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in substitutions {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
