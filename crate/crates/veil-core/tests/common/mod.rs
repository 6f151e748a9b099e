//! Shared helpers for integration tests: scripted profile builders and
//! single-group runners over the smoke configuration.

use serde_json::json;

use veil_core::ledger::{scripted_smoke_config_text, validate_config, ExperimentConfig, RawConfig};
use veil_core::prompts::PromptLibrary;
use veil_core::transcript::probability_tokens;
use veil_core::workflow::{run_single_group, ExecutionOptions, GroupRun};

pub fn stubborn(kind: &str, constraint: Option<f64>, ready_after: u32) -> serde_json::Value {
    let mut principle = json!({"kind": kind});
    if let Some(c) = constraint {
        principle["constraint"] = json!(c);
    }
    json!({
        "policy": "stubborn",
        "principle": principle,
        "ready_after_round": ready_after,
        "confirm": "own_kind_only",
    })
}

pub fn conformist(initial_kind: &str) -> serde_json::Value {
    let initial = match initial_kind {
        "max_avg_with_floor" => json!({"kind": initial_kind, "constraint": 10_000.0}),
        "max_avg_with_range" => json!({"kind": initial_kind, "constraint": 20_000.0}),
        _ => json!({"kind": initial_kind}),
    };
    json!({
        "policy": "conformist",
        "initial": initial,
        "ready_after_round": 1,
        "confirm": "always",
    })
}

/// The smoke config with the backend profiles and group count swapped out.
pub fn config_with_profiles(profiles: Vec<serde_json::Value>, groups: u64) -> ExperimentConfig {
    let mut raw = RawConfig::from_json(scripted_smoke_config_text()).unwrap();
    raw.entry_mut("backend").unwrap().value = json!({
        "kind": "scripted",
        "elicit_max_retries": 3,
        "profiles": profiles,
    });
    raw.entry_mut("group_count").unwrap().value = json!({ "groups": groups });
    validate_config(&raw, None).unwrap()
}

pub fn run_one(config: &ExperimentConfig, seed: u64) -> GroupRun {
    let library = PromptLibrary::embedded();
    run_single_group(
        config,
        &library,
        None,
        seed,
        0,
        &ExecutionOptions {
            canonical: true,
            ..ExecutionOptions::default()
        },
    )
}

pub fn default_probability_tokens() -> Vec<String> {
    probability_tokens(&[0.05, 0.10, 0.50, 0.25, 0.10])
}

/// Deterministically varied profile mixes for randomized protocol checks.
pub fn randomized_config(seed: u64) -> ExperimentConfig {
    let kinds = [
        "max_floor",
        "max_average",
        "max_avg_with_floor",
        "max_avg_with_range",
    ];
    let mut profiles = Vec::new();
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    for _ in 0..5 {
        let profile = match next() % 6 {
            0 => stubborn("max_floor", None, 1 + (next() % 2) as u32),
            1 => stubborn("max_average", None, 1),
            2 => stubborn(
                "max_avg_with_floor",
                Some(8_000.0 + (next() % 5) as f64 * 1_000.0),
                1,
            ),
            3 => stubborn(
                "max_avg_with_range",
                Some(20_000.0 + (next() % 3) as f64 * 5_000.0),
                1 + (next() % 3) as u32,
            ),
            4 => conformist(kinds[next() % 4]),
            _ => stubborn("max_avg_with_floor", Some(10_000.0), 1),
        };
        profiles.push(profile);
    }
    config_with_profiles(profiles, 1)
}
