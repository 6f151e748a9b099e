//! The translation ledger: a layer-structured configuration schema where
//! every design choice carries its analogy layer, translation type, and
//! rationale.
//!
//! Validation is exhaustive (the full error list is returned, not just the
//! first failure) and rejects any config that leaves a required aspect
//! implicit, so no execution-relevant choice can go undocumented.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{BackendConfig, ScriptedProfile, TemperatureRegime};
use crate::domain::{
    validate_constraint, ConstraintCheck, Principle, SituationSet, SCALE_FACTOR_MAX,
    SCALE_FACTOR_MIN,
};
use crate::prompts::PromptLibrary;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const GROUP_SIZE: usize = 5;

/// The four analogy layers a design choice can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Cognitive,
    Ontological,
    Interactional,
    Interventional,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::Cognitive,
        Layer::Ontological,
        Layer::Interactional,
        Layer::Interventional,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Layer::Cognitive => "Cognitive",
            Layer::Ontological => "Ontological",
            Layer::Interactional => "Interactional",
            Layer::Interventional => "Interventional",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

/// Whether a study feature is carried over directly or made explicit as a
/// computational design choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationChoice {
    LiteralTranslation,
    Explicitation,
}

impl TranslationChoice {
    pub fn title(self) -> &'static str {
        match self {
            TranslationChoice::LiteralTranslation => "Literal Translation",
            TranslationChoice::Explicitation => "Explicitation",
        }
    }
}

/// Replication-type labels stored as-is; no semantics are enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationType {
    Direct,
    Constructive,
    Incremental,
    Quasirandom,
    Comprehensive,
}

impl ReplicationType {
    pub fn title(self) -> &'static str {
        match self {
            ReplicationType::Direct => "Direct",
            ReplicationType::Constructive => "Constructive",
            ReplicationType::Incremental => "Incremental",
            ReplicationType::Quasirandom => "Quasirandom",
            ReplicationType::Comprehensive => "Comprehensive",
        }
    }
}

/// One documented design choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationEntry {
    pub aspect: String,
    pub layer: Layer,
    pub choice: TranslationChoice,
    pub replication_type: ReplicationType,
    #[serde(default)]
    pub human_referent: String,
    pub value: serde_json::Value,
    pub rationale: String,
}

/// A configuration document as parsed from disk, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawConfig {
    pub schema_version: u32,
    pub entries: Vec<TranslationEntry>,
}

impl RawConfig {
    pub fn from_json(text: &str) -> Result<RawConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            detail: e.to_string(),
        })
    }

    pub fn entry(&self, aspect: &str) -> Option<&TranslationEntry> {
        self.entries.iter().find(|e| e.aspect == aspect)
    }

    pub fn entry_mut(&mut self, aspect: &str) -> Option<&mut TranslationEntry> {
        self.entries.iter_mut().find(|e| e.aspect == aspect)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("config does not parse: {detail}")]
    Parse { detail: String },
    #[error("unsupported config schema version {version}")]
    UnsupportedVersion { version: u32 },
    #[error("missing required aspect `{aspect}` ({layer} layer)")]
    MissingAspect { layer: Layer, aspect: String },
    #[error("aspect `{aspect}` appears more than once")]
    DuplicateAspect { aspect: String },
    #[error("aspect `{aspect}`: {detail}")]
    TypeMismatch { aspect: String, detail: String },
    #[error("cross-check failed: {detail}")]
    CrossCheckFailure { detail: String },
}

/// Required aspects and the layer each must be declared under.
pub const REQUIRED_ASPECTS: [(&str, Layer); 13] = [
    ("backend", Layer::Cognitive),
    ("group_count", Layer::Cognitive),
    ("statement_min_length", Layer::Cognitive),
    ("persona", Layer::Ontological),
    ("language", Layer::Ontological),
    ("temperature_regime", Layer::Ontological),
    ("memory_limit", Layer::Ontological),
    ("max_rounds", Layer::Interactional),
    ("history_char_cap", Layer::Interactional),
    ("situations", Layer::Interventional),
    ("scale_factor_range", Layer::Interventional),
    ("fallback_policy", Layer::Interventional),
    ("seeds_policy", Layer::Interventional),
];

// --- aspect value payloads -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendBinding {
    Scripted { profiles: Vec<ScriptedProfile> },
    Http(BackendConfig),
}

#[derive(Debug, Clone, Deserialize)]
struct BackendValue {
    #[serde(flatten)]
    binding: BackendBinding,
    #[serde(default = "default_elicit_retries")]
    elicit_max_retries: u32,
}

fn default_elicit_retries() -> u32 {
    3
}

#[derive(Debug, Clone, Deserialize)]
struct GroupCountValue {
    groups: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct CharsValue {
    chars: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct PersonaValue {
    names: Vec<String>,
    role_description: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
struct LanguageValue {
    language: String,
}

#[derive(Debug, Clone, Deserialize)]
struct TemperatureValue {
    policy: String,
    #[serde(default)]
    regime: Option<String>,
    #[serde(default)]
    fixed_temperatures: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
struct MaxRoundsValue {
    rounds: u32,
    #[serde(default = "default_min_rounds")]
    min_rounds_before_vote: u32,
}

fn default_min_rounds() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
struct SituationsValue {
    path: String,
    #[serde(default = "default_application_order")]
    application_order: Vec<String>,
    #[serde(default = "default_group_base")]
    group_base: String,
}

fn default_application_order() -> Vec<String> {
    ["A", "B", "C", "D"].map(String::from).to_vec()
}

fn default_group_base() -> String {
    "G".to_string()
}

#[derive(Debug, Clone, Deserialize)]
struct ScaleRangeValue {
    min: f64,
    max: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct FallbackValue {
    #[serde(default = "default_draw")]
    draw: String,
    default_floor: f64,
    default_range: f64,
}

fn default_draw() -> String {
    "principle".to_string()
}

#[derive(Debug, Clone, Deserialize)]
struct SeedsValue {
    scheme: String,
}

#[derive(Debug, Clone, Deserialize)]
struct PromptTemplatesValue {
    #[serde(default)]
    dir: Option<String>,
}

// --- resolved parameters ---------------------------------------------------

/// How agent temperatures are assigned across groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemperaturePolicy {
    /// Groups split equally across the three regimes, in index order.
    RegimeSplit,
    Fixed {
        regime: TemperatureRegime,
        /// Optional pinned per-agent temperatures (overrides sampling).
        pinned: Option<Vec<f64>>,
    },
}

impl TemperaturePolicy {
    pub fn regime_for(&self, group_index: u64, total_groups: usize) -> TemperatureRegime {
        match self {
            TemperaturePolicy::Fixed { regime, .. } => *regime,
            TemperaturePolicy::RegimeSplit => {
                let band = (group_index as usize * 3) / total_groups.max(1);
                TemperatureRegime::ALL[band.min(2)]
            }
        }
    }

    pub fn pinned(&self) -> Option<&[f64]> {
        match self {
            TemperaturePolicy::Fixed {
                pinned: Some(p), ..
            } => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackPolicy {
    pub draw_distribution: bool,
    pub default_floor: f64,
    pub default_range: f64,
}

/// Flattened execution parameters derived from a validated config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub groups: usize,
    pub group_size: usize,
    pub language: String,
    pub persona_names: Vec<String>,
    pub role_description: BTreeMap<String, String>,
    pub temperature_policy: TemperaturePolicy,
    pub memory_limit: usize,
    pub min_statement_chars: usize,
    pub max_retries: u32,
    pub max_rounds: u32,
    pub min_rounds_before_vote: u32,
    pub history_char_cap: usize,
    pub situations: SituationSet,
    pub application_order: Vec<String>,
    pub group_base: String,
    pub scale_range: (f64, f64),
    pub fallback: FallbackPolicy,
    pub backend: BackendBinding,
    pub prompts_dir: Option<PathBuf>,
}

impl RunParameters {
    pub fn role_for_language(&self, language: &str) -> &str {
        self.role_description
            .get(language)
            .or_else(|| self.role_description.get("english"))
            .or_else(|| self.role_description.values().next())
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn prompt_library(&self) -> Result<PromptLibrary, crate::prompts::PromptError> {
        match &self.prompts_dir {
            Some(dir) => PromptLibrary::embedded_with_overrides(dir),
            None => Ok(PromptLibrary::embedded()),
        }
    }
}

/// A fully validated configuration: the documented entries plus the derived
/// execution parameters other modules consume.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub entries: Vec<TranslationEntry>,
    pub params: RunParameters,
}

fn typed_value<T: for<'de> Deserialize<'de>>(
    entry: &TranslationEntry,
    errors: &mut Vec<ConfigError>,
) -> Option<T> {
    match serde_json::from_value(entry.value.clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(ConfigError::TypeMismatch {
                aspect: entry.aspect.clone(),
                detail: e.to_string(),
            });
            None
        }
    }
}

/// Validates a raw config document, returning either the resolved
/// configuration or every error found. `base_dir` anchors relative paths.
pub fn validate_config(
    raw: &RawConfig,
    base_dir: Option<&Path>,
) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();
    if raw.schema_version != CONFIG_SCHEMA_VERSION {
        errors.push(ConfigError::UnsupportedVersion {
            version: raw.schema_version,
        });
    }

    // Presence, uniqueness, and layer placement of required aspects.
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for entry in &raw.entries {
        *seen.entry(entry.aspect.as_str()).or_default() += 1;
        if entry.rationale.trim().is_empty() {
            errors.push(ConfigError::TypeMismatch {
                aspect: entry.aspect.clone(),
                detail: "rationale must be non-empty".into(),
            });
        }
    }
    for (aspect, count) in &seen {
        if *count > 1 {
            errors.push(ConfigError::DuplicateAspect {
                aspect: aspect.to_string(),
            });
        }
    }
    for (aspect, layer) in REQUIRED_ASPECTS {
        match raw.entry(aspect) {
            None => errors.push(ConfigError::MissingAspect {
                layer,
                aspect: aspect.to_string(),
            }),
            Some(entry) if entry.layer != layer => errors.push(ConfigError::TypeMismatch {
                aspect: aspect.to_string(),
                detail: format!(
                    "must be declared under the {layer} layer, found {}",
                    entry.layer
                ),
            }),
            Some(_) => {}
        }
    }

    // Typed extraction with per-aspect checks.
    let backend = raw
        .entry("backend")
        .and_then(|e| typed_value::<BackendValue>(e, &mut errors));
    let group_count = raw
        .entry("group_count")
        .and_then(|e| typed_value::<GroupCountValue>(e, &mut errors));
    let statement_min = raw
        .entry("statement_min_length")
        .and_then(|e| typed_value::<CharsValue>(e, &mut errors));
    let persona = raw
        .entry("persona")
        .and_then(|e| typed_value::<PersonaValue>(e, &mut errors));
    let language = raw
        .entry("language")
        .and_then(|e| typed_value::<LanguageValue>(e, &mut errors));
    let temperature = raw
        .entry("temperature_regime")
        .and_then(|e| typed_value::<TemperatureValue>(e, &mut errors));
    let memory_limit = raw
        .entry("memory_limit")
        .and_then(|e| typed_value::<CharsValue>(e, &mut errors));
    let max_rounds = raw
        .entry("max_rounds")
        .and_then(|e| typed_value::<MaxRoundsValue>(e, &mut errors));
    let history_cap = raw
        .entry("history_char_cap")
        .and_then(|e| typed_value::<CharsValue>(e, &mut errors));
    let situations_value = raw
        .entry("situations")
        .and_then(|e| typed_value::<SituationsValue>(e, &mut errors));
    let scale_range = raw
        .entry("scale_factor_range")
        .and_then(|e| typed_value::<ScaleRangeValue>(e, &mut errors));
    let fallback = raw
        .entry("fallback_policy")
        .and_then(|e| typed_value::<FallbackValue>(e, &mut errors));
    let seeds = raw
        .entry("seeds_policy")
        .and_then(|e| typed_value::<SeedsValue>(e, &mut errors));
    let prompts_value = raw
        .entry("prompt_templates")
        .and_then(|e| typed_value::<PromptTemplatesValue>(e, &mut errors));

    let resolve = |p: &str| -> PathBuf {
        let path = PathBuf::from(p);
        match (path.is_relative(), base_dir) {
            (true, Some(dir)) => dir.join(path),
            _ => path,
        }
    };

    // Backend checks.
    let mut max_retries = default_elicit_retries();
    let mut binding = None;
    if let Some(value) = backend {
        max_retries = value.elicit_max_retries;
        match &value.binding {
            BackendBinding::Scripted { profiles } => {
                if profiles.len() != GROUP_SIZE {
                    errors.push(ConfigError::CrossCheckFailure {
                        detail: format!(
                            "scripted backend needs exactly {GROUP_SIZE} profiles, got {}",
                            profiles.len()
                        ),
                    });
                }
            }
            BackendBinding::Http(cfg) => {
                if cfg.endpoint.trim().is_empty() || cfg.model.trim().is_empty() {
                    errors.push(ConfigError::CrossCheckFailure {
                        detail: "http backend needs a non-empty endpoint and model".into(),
                    });
                }
                if cfg.timeout_secs == 0 {
                    errors.push(ConfigError::CrossCheckFailure {
                        detail: "http backend timeout must be positive".into(),
                    });
                }
            }
        }
        binding = Some(value.binding);
    }

    // Group count and temperature regime interplay.
    let groups = group_count.as_ref().map(|g| g.groups).unwrap_or(0);
    if group_count.is_some() && groups == 0 {
        errors.push(ConfigError::CrossCheckFailure {
            detail: "group count must be at least 1".into(),
        });
    }
    let temperature_policy = temperature.and_then(|t| match t.policy.as_str() {
        "regime_split" => {
            if groups > 0 && !groups.is_multiple_of(3) {
                errors.push(ConfigError::CrossCheckFailure {
                    detail: format!(
                        "regime_split requires a group count divisible by 3, got {groups}"
                    ),
                });
            }
            if t.fixed_temperatures.is_some() {
                errors.push(ConfigError::CrossCheckFailure {
                    detail: "fixed_temperatures requires the fixed policy".into(),
                });
            }
            Some(TemperaturePolicy::RegimeSplit)
        }
        "fixed" => {
            let regime = t
                .regime
                .as_deref()
                .and_then(TemperatureRegime::from_id);
            match regime {
                None => {
                    errors.push(ConfigError::TypeMismatch {
                        aspect: "temperature_regime".into(),
                        detail: format!(
                            "fixed policy needs a regime of zero, 0-1, or 0-1.5 (got {:?})",
                            t.regime
                        ),
                    });
                    None
                }
                Some(regime) => {
                    if let Some(temps) = &t.fixed_temperatures {
                        for temp in temps {
                            if !regime.contains(*temp) {
                                errors.push(ConfigError::CrossCheckFailure {
                                    detail: format!(
                                        "temperature {temp} outside regime {} bounds",
                                        regime.id()
                                    ),
                                });
                            }
                        }
                        if temps.len() != GROUP_SIZE {
                            errors.push(ConfigError::CrossCheckFailure {
                                detail: format!(
                                    "fixed_temperatures needs {GROUP_SIZE} values, got {}",
                                    temps.len()
                                ),
                            });
                        }
                    }
                    Some(TemperaturePolicy::Fixed {
                        regime,
                        pinned: t.fixed_temperatures,
                    })
                }
            }
        }
        other => {
            errors.push(ConfigError::TypeMismatch {
                aspect: "temperature_regime".into(),
                detail: format!("unknown policy `{other}` (expected regime_split or fixed)"),
            });
            None
        }
    });

    // Persona checks.
    if let Some(p) = &persona {
        if p.names.len() != GROUP_SIZE {
            errors.push(ConfigError::CrossCheckFailure {
                detail: format!("persona needs {GROUP_SIZE} names, got {}", p.names.len()),
            });
        }
        let unique: std::collections::BTreeSet<&str> =
            p.names.iter().map(String::as_str).collect();
        if unique.len() != p.names.len() || p.names.iter().any(|n| n.trim().is_empty()) {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "persona names must be unique and non-empty".into(),
            });
        }
        if p.role_description.is_empty() {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "persona needs at least one role description".into(),
            });
        }
    }

    // Simple bounds.
    if let Some(m) = &memory_limit {
        if m.chars == 0 {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "memory limit must be positive".into(),
            });
        }
    }
    if let Some(s) = &statement_min {
        if s.chars == 0 {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "minimum statement length must be positive".into(),
            });
        }
    }
    if let Some(h) = &history_cap {
        if h.chars == 0 {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "history character cap must be positive".into(),
            });
        }
    }
    if let Some(r) = &max_rounds {
        if r.rounds == 0 {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "max rounds must be at least 1".into(),
            });
        }
    }
    if let Some(range) = &scale_range {
        if !(SCALE_FACTOR_MIN..=SCALE_FACTOR_MAX).contains(&range.min)
            || !(SCALE_FACTOR_MIN..=SCALE_FACTOR_MAX).contains(&range.max)
            || range.min > range.max
        {
            errors.push(ConfigError::CrossCheckFailure {
                detail: format!(
                    "scale factor range [{}, {}] must lie within [{SCALE_FACTOR_MIN}, {SCALE_FACTOR_MAX}]",
                    range.min, range.max
                ),
            });
        }
    }
    if let Some(s) = &seeds {
        if s.scheme.trim().is_empty() {
            errors.push(ConfigError::CrossCheckFailure {
                detail: "seeds policy scheme must be documented".into(),
            });
        }
    }

    // Situations: the dataset must load and cover the referenced names.
    let mut situations = None;
    if let Some(value) = &situations_value {
        let loaded = if value.path == "embedded:default" {
            Ok(SituationSet::embedded())
        } else {
            let path = resolve(&value.path);
            std::fs::read_to_string(&path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))
                .and_then(|text| {
                    SituationSet::from_json(&text).map_err(|e| format!("invalid dataset: {e}"))
                })
        };
        match loaded {
            Err(detail) => errors.push(ConfigError::CrossCheckFailure { detail }),
            Ok(set) => {
                if value.application_order.len() != 4 {
                    errors.push(ConfigError::CrossCheckFailure {
                        detail: format!(
                            "application order must name 4 situations, got {}",
                            value.application_order.len()
                        ),
                    });
                }
                for name in &value.application_order {
                    if set.get(name).is_none() {
                        errors.push(ConfigError::CrossCheckFailure {
                            detail: format!("application situation `{name}` not in dataset"),
                        });
                    }
                }
                situations = Some(set);
            }
        }
    }
    // The group-phase base falls back to situation D when absent.
    let group_base = situations_value.as_ref().map(|v| {
        let set = situations.as_ref();
        let configured = v.group_base.as_str();
        match set {
            Some(set) if set.get(configured).is_some() => configured.to_string(),
            Some(set) if set.get("D").is_some() => "D".to_string(),
            _ => {
                errors.push(ConfigError::CrossCheckFailure {
                    detail: format!(
                        "group base situation `{configured}` not in dataset and no `D` fallback"
                    ),
                });
                configured.to_string()
            }
        }
    });

    // Fallback defaults must be feasible on every referenced situation.
    if let Some(f) = &fallback {
        if !["principle", "distribution"].contains(&f.draw.as_str()) {
            errors.push(ConfigError::TypeMismatch {
                aspect: "fallback_policy".into(),
                detail: "draw must be `principle` or `distribution`".into(),
            });
        }
    }
    let fallback_policy = fallback.as_ref().map(|f| FallbackPolicy {
        draw_distribution: f.draw == "distribution",
        default_floor: f.default_floor,
        default_range: f.default_range,
    });
    if let (Some(f), Some(set)) = (&fallback_policy, &situations) {
        for situation in set.situations() {
            for principle in [
                Principle::with_floor(f.default_floor),
                Principle::with_range(f.default_range),
            ] {
                match principle.map(|p| validate_constraint(&p, situation)) {
                    Ok(Ok(ConstraintCheck::Ok)) => {}
                    Ok(Ok(ConstraintCheck::Violation { message, .. })) => {
                        errors.push(ConfigError::CrossCheckFailure {
                            detail: format!(
                                "fallback default infeasible on situation {}: {message}",
                                situation.name()
                            ),
                        });
                    }
                    Ok(Err(e)) | Err(e) => errors.push(ConfigError::CrossCheckFailure {
                        detail: format!("fallback defaults: {e}"),
                    }),
                }
            }
        }
    }

    // Language must have templates (embedded or from the overrides dir).
    let prompts_dir = prompts_value.and_then(|p| p.dir).map(|d| resolve(&d));
    if let Some(lang) = &language {
        let library = match &prompts_dir {
            Some(dir) => PromptLibrary::embedded_with_overrides(dir),
            None => Ok(PromptLibrary::embedded()),
        };
        match library {
            Err(e) => errors.push(ConfigError::CrossCheckFailure {
                detail: e.to_string(),
            }),
            Ok(library) => {
                if !library.has_language(&lang.language) {
                    errors.push(ConfigError::CrossCheckFailure {
                        detail: format!(
                            "language `{}` has no prompt templates (available: {})",
                            lang.language,
                            library.languages().join(", ")
                        ),
                    });
                }
            }
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }

    // All Options are Some here: every required aspect parsed cleanly.
    let persona = persona.expect("validated");
    let situations_value = situations_value.expect("validated");
    let params = RunParameters {
        groups,
        group_size: GROUP_SIZE,
        language: language.expect("validated").language,
        persona_names: persona.names,
        role_description: persona.role_description,
        temperature_policy: temperature_policy.expect("validated"),
        memory_limit: memory_limit.expect("validated").chars,
        min_statement_chars: statement_min.expect("validated").chars,
        max_retries,
        max_rounds: max_rounds.as_ref().expect("validated").rounds,
        min_rounds_before_vote: max_rounds.expect("validated").min_rounds_before_vote,
        history_char_cap: history_cap.expect("validated").chars,
        situations: situations.expect("validated"),
        application_order: situations_value.application_order,
        group_base: group_base.expect("validated"),
        scale_range: scale_range
            .map(|r| (r.min, r.max))
            .expect("validated"),
        fallback: fallback_policy.expect("validated"),
        backend: binding.expect("validated"),
        prompts_dir,
    };
    Ok(ExperimentConfig {
        schema_version: raw.schema_version,
        entries: raw.entries.clone(),
        params,
    })
}

/// Renders the appendix-style translation report: one markdown table per
/// layer, rows ordered by aspect name. Regeneration from the same config is
/// byte-identical.
pub fn emit_translation_report(config: &ExperimentConfig) -> String {
    let mut out = String::from("# Translation Ledger\n");
    out.push_str(
        "\nEvery execution-relevant design choice, its analogy layer, and the rationale \
         for translating the human-study feature into this engine. Prompt wording is a \
         reconstruction of the original study script, not a verbatim copy.\n",
    );
    for layer in Layer::ALL {
        let mut rows: Vec<&TranslationEntry> =
            config.entries.iter().filter(|e| e.layer == layer).collect();
        rows.sort_by(|a, b| a.aspect.cmp(&b.aspect));
        if rows.is_empty() {
            continue;
        }
        out.push_str(&format!("\n## {} Layer\n\n", layer.title()));
        out.push_str(
            "| Aspect | Human-Study Referent | Layer | Translation Choice | Instantiation | Rationale |\n",
        );
        out.push_str("|---|---|---|---|---|---|\n");
        for entry in rows {
            let instantiation = serde_json::to_string(&entry.value).unwrap_or_default();
            out.push_str(&format!(
                "| {} | {} | {} | {} ({}) | {} | {} |\n",
                md_cell(&entry.aspect),
                md_cell(&entry.human_referent),
                layer.title(),
                entry.choice.title(),
                entry.replication_type.title(),
                md_cell(&instantiation),
                md_cell(&entry.rationale),
            ));
        }
    }
    out
}

fn md_cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

/// One requested one-factor-at-a-time change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOverride {
    pub layer: Layer,
    pub aspect: String,
    pub value: serde_json::Value,
}

/// A derived config differing from the base in exactly one aspect.
#[derive(Debug, Clone)]
pub struct SensitivityVariant {
    pub label: String,
    pub layer: Layer,
    pub aspect: String,
    pub raw: RawConfig,
    pub config: ExperimentConfig,
}

fn override_label(aspect: &str, value: &serde_json::Value) -> String {
    let rendered = value
        .as_object()
        .filter(|o| o.len() == 1)
        .and_then(|o| o.values().next())
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| {
            let compact = value.to_string();
            if compact.len() > 40 {
                format!("{}...", &compact[..37])
            } else {
                compact
            }
        });
    format!("{aspect}={rendered}")
}

/// Derives one validated config per override, each differing from the base
/// in exactly that aspect. Any invalid override fails the whole plan and
/// leaves the base untouched.
pub fn sensitivity_plan(
    base: &RawConfig,
    overrides: &[SensitivityOverride],
    base_dir: Option<&Path>,
) -> Result<Vec<SensitivityVariant>, Vec<ConfigError>> {
    let mut variants = Vec::new();
    for request in overrides {
        let mut derived = base.clone();
        let Some(entry) = derived.entry_mut(&request.aspect) else {
            return Err(vec![ConfigError::MissingAspect {
                layer: request.layer,
                aspect: request.aspect.clone(),
            }]);
        };
        if entry.layer != request.layer {
            return Err(vec![ConfigError::TypeMismatch {
                aspect: request.aspect.clone(),
                detail: format!(
                    "override targets the {} layer but the aspect lives in {}",
                    request.layer, entry.layer
                ),
            }]);
        }
        entry.value = request.value.clone();
        let config = validate_config(&derived, base_dir)?;
        variants.push(SensitivityVariant {
            label: override_label(&request.aspect, &request.value),
            layer: request.layer,
            aspect: request.aspect.clone(),
            raw: derived,
            config,
        });
    }
    Ok(variants)
}

/// Number of aspects whose documented value differs between two configs.
pub fn structural_diff(a: &RawConfig, b: &RawConfig) -> Vec<String> {
    let mut changed = Vec::new();
    for entry in &a.entries {
        match b.entry(&entry.aspect) {
            Some(other) if other == entry => {}
            _ => changed.push(entry.aspect.clone()),
        }
    }
    for entry in &b.entries {
        if a.entry(&entry.aspect).is_none() {
            changed.push(entry.aspect.clone());
        }
    }
    changed.sort();
    changed.dedup();
    changed
}

/// The baseline configuration shipped with the crate: 33 groups split
/// across the three temperature regimes, English personas, HTTP backend.
pub fn baseline_config_text() -> &'static str {
    include_str!("../data/baseline_config.json")
}

/// A small scripted configuration for smoke runs (3 groups).
pub fn scripted_smoke_config_text() -> &'static str {
    include_str!("../data/scripted_smoke.json")
}
