//! Seeded multi-agent engine for veil-of-ignorance distributive-justice
//! experiments.
//!
//! Five-agent groups first work through an individual phase (principle
//! rankings and four payoff-relevant application rounds), then deliberate
//! in randomized turns and decide a binding distribution rule by two-stage
//! secret ballot under a unanimity rule, with payoffs at scaled stakes.
//! Agents are pluggable: an HTTP chat-completion backend drives real
//! models; deterministic scripted policies serve as protocol oracles.
//! Every design choice lives in a layer-tagged translation ledger, every
//! run is an event-sourced transcript replayable from its seed, and the
//! analysis layer produces outcome tables, disagreement rates, transition
//! matrices, and independence tests.

pub mod agent;
pub mod analysis;
pub mod deliberation;
pub mod domain;
pub mod ledger;
pub mod prompts;
pub mod records;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod transcript;
pub mod workflow;

pub use domain::{
    compute_payoff, counterfactual_payoffs, draw_income_class, evaluate_principle,
    scale_situation, validate_constraint, weighted_average, BankBalance, ClassProbabilities,
    IncomeDistribution, Money, PayoffOutcome, Principle, PrincipleKind, Situation, SituationSet,
};
