//! The full experiment script: prompt assembly, the individual phase
//! (introduction, rankings, four payoff-relevant application rounds), the
//! group phase (deliberation, binding payoffs at scaled stakes, final
//! rankings), and the batch runner that derives per-group seeds.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    update_memory, AgentSpec, Backend, ElicitError, Elicitor, HistoryEntry, MemoryBuffer,
    Observation, ParsedResponse, Phase, Ranking, ResponseSchema, RetryTexts, ScriptedBackend,
    Stage,
};
use crate::agent::backend::{HttpBackend, Semaphore};
use crate::deliberation::{run_deliberation, DeliberationState, GroupOutcome};
use crate::domain::{
    fmt_amount, BankBalance, DomainError, Money, PayoffOutcome, Principle, PrincipleKind,
    Situation,
};
use crate::ledger::{BackendBinding, ExperimentConfig, FallbackPolicy, RunParameters};
use crate::prompts::{render, PromptError, PromptLibrary, TemplateSet};
use crate::records::{ApplicationRound, GroupRecord, IndividualRecord, RankingTag};
use crate::rng::{group_seed, rng_for_group, seed_hex, GroupRng};
use crate::transcript::{
    to_payload, EventKind, EventSink, FailurePayload, MemoryUpdatedPayload, PayoffPayload,
    RankingPayload, SeedDrawPayload, TranscriptEvent, Visibility,
};

#[derive(Debug, Error)]
pub enum GroupError {
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("group constraint re-validation failed: {message}")]
    InvalidGroupConstraint { message: String },
}

/// One participant with its live per-run state.
pub struct GroupAgent {
    pub spec: AgentSpec,
    pub memory: MemoryBuffer,
    pub balance: BankBalance,
    pub backend: Arc<dyn Backend>,
}

/// Everything one group run owns: agents, templates, parameters, the event
/// sink, and the seeded random stream.
pub struct GroupSession<'a> {
    pub group_id: String,
    pub agents: Vec<GroupAgent>,
    pub templates: &'a TemplateSet,
    pub params: &'a RunParameters,
    pub sink: EventSink,
    pub rng: GroupRng,
    retry_texts: RetryTexts,
}

/// The ordered context sections an agent sees; participant names and
/// history only exist in the group phase.
pub struct PromptContext<'a> {
    pub spec: &'a AgentSpec,
    pub balance: Money,
    pub memory: &'a str,
    pub phase: Phase,
    pub participants: Vec<String>,
    pub history_text: Option<String>,
}

/// Builds the context text (sections in fixed order, blank-line separated,
/// localized) and the task text (task body plus the response-format
/// instruction). Identical inputs produce byte-identical prompts.
pub fn assemble_prompt(
    ctx: &PromptContext<'_>,
    task_body: &str,
    schema_instruction: &str,
    templates: &TemplateSet,
) -> Result<(String, String), PromptError> {
    let mut sections = Vec::with_capacity(7);
    sections.push(render(templates.section("name")?, &[("name", &ctx.spec.name)]));
    sections.push(render(
        templates.section("role")?,
        &[("role", &ctx.spec.role_description)],
    ));
    sections.push(render(
        templates.section("balance")?,
        &[("balance", &ctx.balance.to_string())],
    ));
    sections.push(render(
        templates.section("phase")?,
        &[("phase", templates.phase(ctx.phase.key())?)],
    ));
    let memory_text = if ctx.memory.is_empty() {
        templates.fragment("memory_empty")?
    } else {
        ctx.memory
    };
    sections.push(render(templates.section("memory")?, &[("memory", memory_text)]));
    if ctx.phase == Phase::Group {
        sections.push(render(
            templates.section("participants")?,
            &[("participants", &ctx.participants.join(", "))],
        ));
        sections.push(render(
            templates.section("history")?,
            &[("history", ctx.history_text.as_deref().unwrap_or(""))],
        ));
    }
    Ok((
        sections.join("\n\n"),
        format!("{task_body}\n\n{schema_instruction}"),
    ))
}

impl<'a> GroupSession<'a> {
    pub fn record_event(
        &mut self,
        kind: EventKind,
        visibility: Visibility,
        payload: serde_json::Value,
    ) {
        self.sink.record(kind, visibility, payload);
    }

    fn prompt_context(
        &self,
        idx: usize,
        observation: &Observation,
    ) -> Result<PromptContext<'_>, PromptError> {
        let agent = &self.agents[idx];
        let (participants, history_text) = if observation.phase == Phase::Group {
            let others = self
                .agents
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, a)| a.spec.name.clone())
                .collect();
            let text = crate::deliberation::render_history(
                &observation.history,
                self.params.history_char_cap,
                self.templates.fragment("history_elided")?,
            );
            (others, Some(text))
        } else {
            (Vec::new(), None)
        };
        Ok(PromptContext {
            spec: &agent.spec,
            balance: agent.balance.total(),
            memory: agent.memory.content(),
            phase: observation.phase,
            participants,
            history_text,
        })
    }

    /// One schema-validated elicitation for agent `idx`.
    pub fn elicit(
        &mut self,
        idx: usize,
        observation: &Observation,
        schema: &ResponseSchema,
        task_body: &str,
    ) -> Result<ParsedResponse, GroupError> {
        let templates = self.templates;
        let ctx = self.prompt_context(idx, observation)?;
        let (context, task) = assemble_prompt(
            &ctx,
            task_body,
            templates.schema_instruction(schema.kind_key())?,
            templates,
        )?;
        let backend = Arc::clone(&self.agents[idx].backend);
        let spec = self.agents[idx].spec.clone();
        let elicitor = Elicitor::new(
            backend.as_ref(),
            self.params.max_retries,
            self.retry_texts.clone(),
        );
        Ok(elicitor.elicit(&spec, &context, &task, schema, observation, &mut self.sink)?)
    }

    fn elicit_ranking(
        &mut self,
        idx: usize,
        stage: Stage,
        phase: Phase,
        history: Vec<HistoryEntry>,
        tag: RankingTag,
        task_body: &str,
    ) -> Result<Ranking, GroupError> {
        let observation = Observation::new(stage).with_phase(phase).with_history(history);
        let ranking = self
            .elicit(idx, &observation, &ResponseSchema::Ranking, task_body)?
            .into_ranking();
        let agent = self.agents[idx].spec.name.clone();
        self.record_event(
            EventKind::RankingRecorded,
            Visibility::PrivateTo(agent.clone()),
            to_payload(&RankingPayload {
                agent,
                tag,
                ranking,
            }),
        );
        Ok(ranking)
    }

    /// Offers the agent a memory update; the reply replaces the buffer
    /// (truncated to the limit) and the displacement is recorded.
    pub fn memory_checkpoint(
        &mut self,
        idx: usize,
        phase: Phase,
        round: u32,
        history: Vec<HistoryEntry>,
        checkpoint: &str,
        event_text: &str,
    ) -> Result<(), GroupError> {
        let limit = self.agents[idx].spec.memory_limit;
        let task = render(
            self.templates.task(Stage::MemoryUpdate)?,
            &[("event", event_text), ("limit", &limit.to_string())],
        );
        let observation = Observation::new(Stage::MemoryUpdate)
            .with_phase(phase)
            .with_round(round)
            .with_history(history);
        let new_content = self
            .elicit(idx, &observation, &ResponseSchema::MemoryUpdate, &task)?
            .into_text();
        let agent = &mut self.agents[idx];
        let old = agent.memory.content().to_string();
        agent.memory = update_memory(&agent.memory, &new_content);
        let payload = MemoryUpdatedPayload {
            agent: agent.spec.name.clone(),
            checkpoint: checkpoint.to_string(),
            old,
            new: agent.memory.content().to_string(),
        };
        let name = agent.spec.name.clone();
        self.record_event(
            EventKind::MemoryUpdated,
            Visibility::PrivateTo(name),
            to_payload(&payload),
        );
        Ok(())
    }

    /// End-of-round memory checkpoint, offering the agent its own private
    /// assessment back.
    pub fn discussion_memory_checkpoint(
        &mut self,
        idx: usize,
        state: &DeliberationState,
        own_assessment: &str,
    ) -> Result<(), GroupError> {
        let event_text = render(
            self.templates.fragment("checkpoint_discussion")?,
            &[
                ("round", &state.round.to_string()),
                ("assessment", own_assessment),
            ],
        );
        self.memory_checkpoint(
            idx,
            Phase::Group,
            state.round,
            state.history.clone(),
            &format!("discussion-round-{}", state.round),
            &event_text,
        )
    }

    fn ranking_checkpoint(&mut self, idx: usize, tag: RankingTag) -> Result<(), GroupError> {
        let event_text = render(
            self.templates.fragment("checkpoint_ranking")?,
            &[("tag", tag.as_str())],
        );
        self.memory_checkpoint(
            idx,
            Phase::Individual,
            0,
            Vec::new(),
            &format!("ranking-{tag}"),
            &event_text,
        )
    }
}

// --- presentation helpers ---------------------------------------------------

fn distribution_table(situation: &Situation) -> String {
    situation
        .distributions()
        .iter()
        .map(|d| {
            let incomes: Vec<String> = d.class_incomes().iter().map(|v| fmt_amount(*v)).collect();
            format!("{}: {}", d.label(), incomes.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn probability_row(situation: &Situation) -> String {
    situation
        .probabilities()
        .probs()
        .iter()
        .map(|p| format!("{}%", fmt_amount(p * 100.0)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn hints_block(situation: &Situation, templates: &TemplateSet) -> Result<String, PromptError> {
    let mut lines = Vec::new();
    for kind in PrincipleKind::ALL {
        if let Some(label) = situation.principle_hints().get(&kind) {
            lines.push(format!(
                "({}) {} -> {}",
                kind.code(),
                templates.principle_name(kind)?,
                label
            ));
        }
    }
    Ok(lines.join("\n"))
}

fn counterfactual_lines(counterfactuals: &BTreeMap<PrincipleKind, Money>) -> String {
    counterfactuals
        .iter()
        .map(|(kind, payoff)| format!("({}) {}: ${}", kind.code(), kind.id(), payoff))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The four-principle set used for counterfactual payoffs: the agent's own
/// choice for its kind, configured defaults for the other constrained kinds.
/// `constraint_scale` lifts the defaults onto a scaled situation.
fn counterfactual_choices(
    chosen: Option<&Principle>,
    fallback: &FallbackPolicy,
    constraint_scale: f64,
) -> Result<Vec<Principle>, DomainError> {
    PrincipleKind::ALL
        .into_iter()
        .map(|kind| match chosen {
            Some(p) if p.kind() == kind => Ok(p.clone()),
            _ => match kind {
                PrincipleKind::MaxAvgWithFloor => {
                    Principle::with_floor(fallback.default_floor * constraint_scale)
                }
                PrincipleKind::MaxAvgWithRange => {
                    Principle::with_range(fallback.default_range * constraint_scale)
                }
                other => Principle::new(other, None),
            },
        })
        .collect()
}

// --- individual phase -------------------------------------------------------

/// Runs one agent's full individual phase: principle introduction with
/// ranking R1, the instructional presentation with ranking R2 (the original
/// comprehension test is omitted), four payoff-relevant application rounds
/// at scale 1, and ranking R3. Memory checkpoints follow each ranking and
/// each application round. Class probabilities appear in the instructional
/// presentation only, never in application-round prompts.
pub fn run_individual_phase(
    session: &mut GroupSession<'_>,
    idx: usize,
) -> Result<IndividualRecord, GroupError> {
    let templates = session.templates;
    let params = session.params;
    let agent_name = session.agents[idx].spec.name.clone();
    let principles = templates.principles_block()?;
    let mut rankings = BTreeMap::new();

    // Introduction + R1.
    let r1_task = render(templates.task(Stage::RankingInitial)?, &[("principles", principles.as_str())]);
    let r1 = session.elicit_ranking(
        idx,
        Stage::RankingInitial,
        Phase::Individual,
        Vec::new(),
        RankingTag::R1,
        &r1_task,
    )?;
    rankings.insert(RankingTag::R1, r1);
    session.ranking_checkpoint(idx, RankingTag::R1)?;

    // Instructional presentation (probabilities and principle
    // correspondence shown here) + R2.
    let instructional = params
        .situations
        .get(&params.application_order[0])
        .expect("validated application order");
    let presentation = render(
        templates.fragment("distribution_table_hinted")?,
        &[
            ("probability_row", &probability_row(instructional)),
            ("table", &distribution_table(instructional)),
            ("hints", &hints_block(instructional, templates)?),
        ],
    );
    let r2_task = render(
        templates.task(Stage::RankingInformed)?,
        &[("presentation", presentation.as_str())],
    );
    let r2 = session.elicit_ranking(
        idx,
        Stage::RankingInformed,
        Phase::Individual,
        Vec::new(),
        RankingTag::R2,
        &r2_task,
    )?;
    rankings.insert(RankingTag::R2, r2);
    session.ranking_checkpoint(idx, RankingTag::R2)?;

    // Four application rounds.
    let mut application_rounds = Vec::with_capacity(4);
    for round in 1..=4u8 {
        let situation_name = params.application_order[round as usize - 1].clone();
        let situation = params
            .situations
            .get(&situation_name)
            .expect("validated application order")
            .clone();
        let presentation = render(
            templates.fragment("distribution_table_plain")?,
            &[("table", &distribution_table(&situation))],
        );
        let task = render(
            templates.task(Stage::ApplicationChoice)?,
            &[
                ("round", &round.to_string()),
                ("presentation", presentation.as_str()),
            ],
        );
        let observation = Observation::new(Stage::ApplicationChoice)
            .with_phase(Phase::Individual)
            .with_round(round as u32);
        let schema = ResponseSchema::PrincipleChoice {
            situation: situation.clone(),
        };
        let choice = session.elicit(idx, &observation, &schema, &task)?.into_choice();

        let choices = counterfactual_choices(Some(&choice), &params.fallback, 1.0)?;
        let outcome = PayoffOutcome::realize(choice, &situation, &choices, 1.0, &mut session.rng)?;
        session.agents[idx]
            .balance
            .credit(format!("application-{round}"), outcome.payoff);
        let balance_after = session.agents[idx].balance.total();
        session.record_event(
            EventKind::PayoffCredited,
            Visibility::PrivateTo(agent_name.clone()),
            to_payload(&PayoffPayload {
                agent: agent_name.clone(),
                phase: "application".into(),
                round: Some(round),
                situation: situation.clone(),
                principle: outcome.principle.clone(),
                selected: outcome.selected_distribution.clone(),
                drawn_class: outcome.drawn_class,
                income: outcome.income,
                scale: 1.0,
                payoff: outcome.payoff,
                counterfactual_principles: choices,
                counterfactuals: outcome.counterfactuals.clone(),
                balance_after,
            }),
        );

        let reveal = render(
            templates.fragment("payoff_reveal")?,
            &[
                ("round", &round.to_string()),
                (
                    "principle",
                    &outcome
                        .principle
                        .as_ref()
                        .map(ToString::to_string)
                        .unwrap_or_default(),
                ),
                ("selected", &outcome.selected_distribution),
                ("class", &(outcome.drawn_class + 1).to_string()),
                ("income", &fmt_amount(outcome.income)),
                ("payoff", &outcome.payoff.to_string()),
                ("counterfactuals", &counterfactual_lines(&outcome.counterfactuals)),
                ("balance", &balance_after.to_string()),
            ],
        );
        session.memory_checkpoint(
            idx,
            Phase::Individual,
            round as u32,
            Vec::new(),
            &format!("application-{round}"),
            &reveal,
        )?;
        application_rounds.push(ApplicationRound {
            round,
            situation: situation_name,
            outcome,
        });
    }

    // R3 closes the individual phase.
    let r3_task = render(
        templates.task(Stage::RankingFinalIndividual)?,
        &[("principles", principles.as_str())],
    );
    let r3 = session.elicit_ranking(
        idx,
        Stage::RankingFinalIndividual,
        Phase::Individual,
        Vec::new(),
        RankingTag::R3,
        &r3_task,
    )?;
    rankings.insert(RankingTag::R3, r3);
    session.ranking_checkpoint(idx, RankingTag::R3)?;

    Ok(IndividualRecord {
        agent: agent_name,
        rankings,
        application_rounds,
        balance: session.agents[idx].balance.clone(),
    })
}

// --- group phase ------------------------------------------------------------

/// Everything the group phase adds on top of the individual records.
pub struct GroupPhaseResult {
    pub outcome: GroupOutcome,
    pub statements: Vec<HistoryEntry>,
    pub scale_factor: f64,
    pub binding_situation: String,
    pub binding_payoffs: BTreeMap<String, PayoffOutcome>,
    pub final_rankings: BTreeMap<String, Ranking>,
}

/// Runs deliberation on the (undisclosed) group base situation, draws the
/// stake multiplier, applies the adopted rule to the scaled situation with
/// independent per-agent class draws, credits binding payoffs, and collects
/// ranking R4 after the payoffs are revealed.
pub fn run_group_phase(session: &mut GroupSession<'_>) -> Result<GroupPhaseResult, GroupError> {
    let params = session.params;
    let templates = session.templates;
    let base = params
        .situations
        .get(&params.group_base)
        .expect("validated group base")
        .clone();

    let (outcome, state) = run_deliberation(session, &base)?;

    // Stakes are raised by a seeded random factor; constraint values scale
    // with the incomes so feasibility is preserved.
    let (lo, hi) = params.scale_range;
    let factor = session.rng.random_range(lo..=hi);
    session.record_event(
        EventKind::SeedDrawn,
        Visibility::Experimenter,
        to_payload(&SeedDrawPayload::ScaleFactor { factor }),
    );
    let binding = crate::domain::scale_situation(&base, factor)?;

    let applied: Option<Principle> = match (outcome.consensus_principle(), &outcome.fallback_principle) {
        (Some(p), _) => Some(p.scaled(factor)),
        (None, Some(p)) => Some(p.scaled(factor)),
        (None, None) => None,
    };
    let selected = match (&applied, &outcome.fallback_distribution) {
        (Some(p), _) => crate::domain::evaluate_principle(p, &binding)?.to_string(),
        (None, Some(label)) => label.clone(),
        (None, None) => unreachable!("outcome carries either a principle or a distribution"),
    };
    let choices = counterfactual_choices(applied.as_ref(), &params.fallback, factor)?;

    let mut binding_payoffs = BTreeMap::new();
    for idx in 0..session.agents.len() {
        let agent_name = session.agents[idx].spec.name.clone();
        let payoff_outcome = PayoffOutcome::realize_with_label(
            applied.clone(),
            selected.clone(),
            &binding,
            &choices,
            1.0,
            &mut session.rng,
        )?;
        session.agents[idx].balance.credit("binding", payoff_outcome.payoff);
        let balance_after = session.agents[idx].balance.total();
        session.record_event(
            EventKind::PayoffCredited,
            Visibility::PrivateTo(agent_name.clone()),
            to_payload(&PayoffPayload {
                agent: agent_name.clone(),
                phase: "binding".into(),
                round: None,
                situation: binding.clone(),
                principle: applied.clone(),
                selected: payoff_outcome.selected_distribution.clone(),
                drawn_class: payoff_outcome.drawn_class,
                income: payoff_outcome.income,
                scale: 1.0,
                payoff: payoff_outcome.payoff,
                counterfactual_principles: choices.clone(),
                counterfactuals: payoff_outcome.counterfactuals.clone(),
                balance_after,
            }),
        );
        binding_payoffs.insert(agent_name, payoff_outcome);
    }

    // Reveal payoffs to each agent, then collect the final ranking.
    let rule_text = match (&applied, &outcome.fallback_distribution) {
        (Some(p), None) if outcome.is_consensus() => render(
            templates.fragment("rule_consensus")?,
            &[("principle", &p.to_string())],
        ),
        (Some(p), None) => render(
            templates.fragment("rule_fallback_principle")?,
            &[("principle", &p.to_string())],
        ),
        _ => templates.fragment("rule_fallback_distribution")?.to_string(),
    };
    for idx in 0..session.agents.len() {
        let name = session.agents[idx].spec.name.clone();
        let payoff_outcome = &binding_payoffs[&name];
        let reveal = render(
            templates.fragment("binding_reveal")?,
            &[
                ("rule", rule_text.as_str()),
                ("selected", &payoff_outcome.selected_distribution),
                ("class", &(payoff_outcome.drawn_class + 1).to_string()),
                ("income", &fmt_amount(payoff_outcome.income)),
                ("payoff", &payoff_outcome.payoff.to_string()),
                (
                    "counterfactuals",
                    &counterfactual_lines(&payoff_outcome.counterfactuals),
                ),
                ("balance", &session.agents[idx].balance.total().to_string()),
            ],
        );
        session.memory_checkpoint(
            idx,
            Phase::Group,
            state.round,
            state.history.clone(),
            "binding-payoff",
            &reveal,
        )?;
    }

    let principles = templates.principles_block()?;
    let r4_task = render(
        templates.task(Stage::RankingPostGroup)?,
        &[("principles", principles.as_str())],
    );
    let mut final_rankings = BTreeMap::new();
    for idx in 0..session.agents.len() {
        let name = session.agents[idx].spec.name.clone();
        let ranking = session.elicit_ranking(
            idx,
            Stage::RankingPostGroup,
            Phase::Group,
            state.history.clone(),
            RankingTag::R4,
            &r4_task,
        )?;
        final_rankings.insert(name, ranking);
    }

    Ok(GroupPhaseResult {
        outcome,
        statements: state.history,
        scale_factor: factor,
        binding_situation: binding.name().to_string(),
        binding_payoffs,
        final_rankings,
    })
}

// --- batch runner -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum GroupStatus {
    Completed,
    Failed { reason: String },
}

/// Outcome of one group run: the record (when completed) plus the full
/// event transcript either way.
pub struct GroupRun {
    pub index: u64,
    pub group_id: String,
    pub seed_hex: String,
    pub status: GroupStatus,
    pub record: Option<GroupRecord>,
    pub events: Vec<TranscriptEvent>,
}

#[derive(Debug, Clone)]
pub struct ExecutionOptions {
    pub parallelism: usize,
    /// Strip timestamps so equal runs produce byte-identical transcripts.
    pub canonical: bool,
    /// Global cap on concurrent in-flight backend requests.
    pub backend_cap: Option<usize>,
    /// Per-group backend call budget; exceeding it aborts the group with a
    /// recorded failure.
    pub max_backend_calls: Option<u64>,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        ExecutionOptions {
            parallelism: 1,
            canonical: false,
            backend_cap: None,
            max_backend_calls: None,
        }
    }
}

fn failure_payload(error: &GroupError) -> FailurePayload {
    let (agent, stage) = match error {
        GroupError::Elicit(ElicitError::Failure { agent, stage, .. })
        | GroupError::Elicit(ElicitError::Backend { agent, stage, .. })
        | GroupError::Elicit(ElicitError::BudgetExhausted { agent, stage, .. }) => {
            (Some(agent.clone()), Some(stage.clone()))
        }
        _ => (None, None),
    };
    FailurePayload {
        agent,
        stage,
        reason: error.to_string(),
    }
}

/// Runs a single group end to end. Failures abort the group with a recorded
/// reason; the partial transcript is preserved.
pub fn run_single_group(
    config: &ExperimentConfig,
    library: &PromptLibrary,
    shared_backend: Option<Arc<dyn Backend>>,
    master_seed: u64,
    index: u64,
    options: &ExecutionOptions,
) -> GroupRun {
    let params = &config.params;
    let seed = group_seed(master_seed, index);
    let hex = seed_hex(&seed);
    let group_id = format!("group-{index:03}");
    let mut sink = EventSink::new(&group_id, options.canonical)
        .with_backend_call_budget(options.max_backend_calls);

    let fail_now = |sink: EventSink, reason: String| GroupRun {
        index,
        group_id: format!("group-{index:03}"),
        seed_hex: seed_hex(&seed),
        status: GroupStatus::Failed { reason },
        record: None,
        events: sink.into_events(),
    };

    let templates = match library.get(&params.language) {
        Ok(t) => t,
        Err(e) => return fail_now(sink, e.to_string()),
    };
    let retry_texts = match templates.retry_texts() {
        Ok(t) => t,
        Err(e) => return fail_now(sink, e.to_string()),
    };

    let mut rng = rng_for_group(master_seed, index);
    let regime = params.temperature_policy.regime_for(index, params.groups);
    let temperatures: Vec<f64> = (0..params.group_size)
        .map(|i| match params.temperature_policy.pinned() {
            Some(pinned) => pinned[i],
            None => regime.sample(&mut rng),
        })
        .collect();

    let backends: Vec<Arc<dyn Backend>> = match &params.backend {
        BackendBinding::Scripted { profiles } => profiles
            .iter()
            .map(|p| Arc::new(ScriptedBackend::new(p.clone())) as Arc<dyn Backend>)
            .collect(),
        BackendBinding::Http(_) => {
            let shared = shared_backend.expect("http binding provides a shared backend");
            (0..params.group_size).map(|_| Arc::clone(&shared)).collect()
        }
    };
    let role = params.role_for_language(&params.language).to_string();
    let specs: Vec<AgentSpec> = params
        .persona_names
        .iter()
        .zip(&temperatures)
        .zip(&backends)
        .map(|((name, temperature), backend)| AgentSpec {
            name: name.clone(),
            role_description: role.clone(),
            language: params.language.clone(),
            temperature: *temperature,
            backend: backend.id(),
            memory_limit: params.memory_limit,
        })
        .collect();
    let base_situation = params
        .situations
        .get(&params.group_base)
        .expect("validated group base")
        .clone();

    sink.record(
        EventKind::SeedDrawn,
        Visibility::Experimenter,
        to_payload(&SeedDrawPayload::GroupSeed {
            group_index: index,
            seed_hex: hex.clone(),
            language: params.language.clone(),
            agents: specs.clone(),
            application_order: params.application_order.clone(),
            group_base: base_situation,
        }),
    );
    for spec in &specs {
        sink.record(
            EventKind::SeedDrawn,
            Visibility::Experimenter,
            to_payload(&SeedDrawPayload::Temperature {
                agent: spec.name.clone(),
                regime: regime.id().to_string(),
                value: spec.temperature,
            }),
        );
    }

    let agents: Vec<GroupAgent> = specs
        .into_iter()
        .zip(backends)
        .map(|(spec, backend)| GroupAgent {
            memory: MemoryBuffer::new(spec.memory_limit),
            balance: BankBalance::new(),
            spec,
            backend,
        })
        .collect();
    let mut session = GroupSession {
        group_id: group_id.clone(),
        agents,
        templates,
        params,
        sink,
        rng,
        retry_texts,
    };

    let mut individuals = Vec::with_capacity(params.group_size);
    for idx in 0..params.group_size {
        match run_individual_phase(&mut session, idx) {
            Ok(record) => individuals.push(record),
            Err(e) => {
                session.record_event(
                    EventKind::Failure,
                    Visibility::Experimenter,
                    to_payload(&failure_payload(&e)),
                );
                return fail_now(session.sink, e.to_string());
            }
        }
    }

    let phase_result = match run_group_phase(&mut session) {
        Ok(r) => r,
        Err(e) => {
            session.record_event(
                EventKind::Failure,
                Visibility::Experimenter,
                to_payload(&failure_payload(&e)),
            );
            return fail_now(session.sink, e.to_string());
        }
    };

    let record = GroupRecord {
        group_id: group_id.clone(),
        group_index: index,
        seed_hex: hex.clone(),
        language: params.language.clone(),
        agents: session.agents.iter().map(|a| a.spec.clone()).collect(),
        temperatures: session
            .agents
            .iter()
            .map(|a| (a.spec.name.clone(), a.spec.temperature))
            .collect(),
        individuals: individuals
            .into_iter()
            .map(|mut i| {
                // Balances accumulated after the individual phase snapshot
                // (the binding payoff); refresh from the live agent state.
                if let Some(agent) = session.agents.iter().find(|a| a.spec.name == i.agent) {
                    i.balance = agent.balance.clone();
                }
                i
            })
            .collect(),
        statements: phase_result.statements,
        outcome: phase_result.outcome,
        scale_factor: phase_result.scale_factor,
        binding_situation: phase_result.binding_situation,
        binding_payoffs: phase_result.binding_payoffs,
        final_rankings: phase_result.final_rankings,
    };
    GroupRun {
        index,
        group_id,
        seed_hex: hex,
        status: GroupStatus::Completed,
        record: Some(record),
        events: session.sink.into_events(),
    }
}

/// Runs the whole batch: N groups with per-group seeds derived from the
/// master seed, executed on a bounded worker pool. Individual group
/// failures are recorded and the batch continues.
pub fn run_experiment(
    config: &ExperimentConfig,
    master_seed: u64,
    options: &ExecutionOptions,
) -> Result<Vec<GroupRun>, GroupError> {
    let library = config.params.prompt_library()?;
    let shared_backend: Option<Arc<dyn Backend>> = match &config.params.backend {
        BackendBinding::Http(cfg) => {
            let mut backend = HttpBackend::new(cfg.clone());
            if let Some(cap) = options.backend_cap {
                backend = backend.with_inflight_cap(Arc::new(Semaphore::new(cap)));
            }
            Some(Arc::new(backend))
        }
        BackendBinding::Scripted { .. } => None,
    };

    let total = config.params.groups as u64;
    let workers = options.parallelism.clamp(1, config.params.groups.max(1));
    let next = AtomicU64::new(0);
    let results: Mutex<Vec<GroupRun>> = Mutex::new(Vec::with_capacity(config.params.groups));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= total {
                    break;
                }
                let run = run_single_group(
                    config,
                    &library,
                    shared_backend.clone(),
                    master_seed,
                    index,
                    options,
                );
                results.lock().unwrap().push(run);
            });
        }
    });

    let mut runs = results.into_inner().unwrap();
    runs.sort_by_key(|r| r.index);
    Ok(runs)
}
