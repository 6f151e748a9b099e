//! The elicitation loop: prompt, parse, validate, re-prompt on violation.
//!
//! Every attempt is logged to the transcript. A response that fails its
//! schema triggers a corrective retry (with the achievable bound for
//! constraint violations); exhausting the retry budget aborts the
//! elicitation rather than substituting an answer.

use thiserror::Error;

use crate::transcript::{
    to_payload, EventKind, EventSink, PromptPayload, ResponsePayload, RetryPayload, Visibility,
};

use super::backend::{Backend, BackendError, BackendRequest, ChatMessage, Feedback};
use super::schema::{ParsedResponse, ResponseSchema, SchemaViolation};
use super::{AgentSpec, Observation};

#[derive(Debug, Error)]
pub enum ElicitError {
    #[error("{agent} failed {stage} after {attempts} attempts: {last_error}")]
    Failure {
        agent: String,
        stage: String,
        attempts: u32,
        last_error: String,
    },
    #[error("backend unavailable for {agent} at {stage}: {source}")]
    Backend {
        agent: String,
        stage: String,
        source: BackendError,
    },
    #[error("backend call budget of {limit} exhausted at {stage} for {agent}")]
    BudgetExhausted {
        agent: String,
        stage: String,
        limit: u64,
    },
}

/// Localized retry messages; `{detail}`, `{min}`, and `{message}` are
/// substituted per violation.
#[derive(Debug, Clone)]
pub struct RetryTexts {
    pub schema_error: String,
    pub too_short: String,
    pub constraint_violation: String,
}

impl Default for RetryTexts {
    fn default() -> Self {
        RetryTexts {
            schema_error:
                "Your previous reply did not match the required JSON format: {detail}. \
                 Reply again with only the requested JSON object."
                    .into(),
            too_short:
                "Your statement was too short: {detail}. Write at least {min} characters."
                    .into(),
            constraint_violation:
                "Your constraint value is not feasible here: {message}. \
                 Submit the same principle with a feasible value."
                    .into(),
        }
    }
}

impl RetryTexts {
    fn message_for(&self, violation: &SchemaViolation) -> String {
        match violation {
            SchemaViolation::TooShort { min, .. } => self
                .too_short
                .replace("{detail}", &violation.to_string())
                .replace("{min}", &min.to_string()),
            SchemaViolation::ConstraintViolation { message, .. } => self
                .constraint_violation
                .replace("{message}", message)
                .replace("{detail}", &violation.to_string()),
            other => self.schema_error.replace("{detail}", &other.to_string()),
        }
    }
}

fn feedback_for(violation: &SchemaViolation) -> Feedback {
    match violation {
        SchemaViolation::TooShort { min, .. } => Feedback::TooShort { min: *min },
        SchemaViolation::ConstraintViolation {
            achievable,
            message,
            ..
        } => Feedback::ConstraintViolation {
            achievable: *achievable,
            message: message.clone(),
        },
        other => Feedback::SchemaError {
            detail: other.to_string(),
        },
    }
}

/// Runs schema-validated elicitations against one backend.
pub struct Elicitor<'a> {
    backend: &'a dyn Backend,
    max_retries: u32,
    retry_texts: RetryTexts,
}

impl<'a> Elicitor<'a> {
    pub fn new(backend: &'a dyn Backend, max_retries: u32, retry_texts: RetryTexts) -> Self {
        Elicitor {
            backend,
            max_retries,
            retry_texts,
        }
    }

    /// At most `1 + max_retries` backend calls; each attempt is recorded.
    pub fn elicit(
        &self,
        agent: &AgentSpec,
        context: &str,
        task: &str,
        schema: &ResponseSchema,
        observation: &Observation,
        sink: &mut EventSink,
    ) -> Result<ParsedResponse, ElicitError> {
        let stage = observation.stage.key().to_string();
        let mut messages = vec![ChatMessage::system(context), ChatMessage::user(task)];
        let mut feedback: Option<Feedback> = None;
        let mut last_error = String::new();

        for attempt in 0..=self.max_retries {
            sink.charge_backend_call()
                .map_err(|limit| ElicitError::BudgetExhausted {
                    agent: agent.name.clone(),
                    stage: stage.clone(),
                    limit,
                })?;
            let (ctx_field, task_field, retry_field) = if attempt == 0 {
                (Some(context.to_string()), Some(task.to_string()), None)
            } else {
                (None, None, messages.last().map(|m| m.content.clone()))
            };
            sink.record(
                EventKind::PromptSent,
                Visibility::PrivateTo(agent.name.clone()),
                to_payload(&PromptPayload {
                    agent: agent.name.clone(),
                    stage: stage.clone(),
                    phase: observation.phase.key().to_string(),
                    round: observation.round,
                    attempt,
                    context: ctx_field,
                    task: task_field,
                    retry_message: retry_field,
                }),
            );

            let request = BackendRequest {
                agent,
                messages: &messages,
                schema_kind: schema.kind_key(),
                observation,
                feedback: feedback.as_ref(),
                attempt,
            };
            let raw = self
                .backend
                .complete(&request)
                .map_err(|source| ElicitError::Backend {
                    agent: agent.name.clone(),
                    stage: stage.clone(),
                    source,
                })?;
            sink.record(
                EventKind::ResponseReceived,
                Visibility::PrivateTo(agent.name.clone()),
                to_payload(&ResponsePayload {
                    agent: agent.name.clone(),
                    stage: stage.clone(),
                    attempt,
                    raw: raw.clone(),
                }),
            );

            match schema.parse(&raw) {
                Ok(parsed) => return Ok(parsed),
                Err(violation) => {
                    last_error = violation.to_string();
                    if attempt < self.max_retries {
                        let correction = self.retry_texts.message_for(&violation);
                        sink.record(
                            EventKind::RetryIssued,
                            Visibility::PrivateTo(agent.name.clone()),
                            to_payload(&RetryPayload {
                                agent: agent.name.clone(),
                                stage: stage.clone(),
                                attempt,
                                error: last_error.clone(),
                            }),
                        );
                        messages.push(ChatMessage::assistant(raw));
                        messages.push(ChatMessage::user(correction));
                        feedback = Some(feedback_for(&violation));
                    }
                }
            }
        }

        Err(ElicitError::Failure {
            agent: agent.name.clone(),
            stage,
            attempts: self.max_retries + 1,
            last_error,
        })
    }
}
