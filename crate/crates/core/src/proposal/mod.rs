//! Candidate replacements for a step.

pub mod gateway;
pub mod mutator;
pub mod prompts;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::execution::fenced_block;
use crate::trace::Trace;
use gateway::{ChatGateway, ChatRequest};
use prompts::{render_intervention_messages, PromptError, PromptVariant, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Gateway,
    RuleMutator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub step_index: usize,
    pub payload: String,
    pub provider: Provider,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_variant: Option<PromptVariant>,
}

impl Proposal {
    /// Stable identifier within one trace.
    pub fn id(&self) -> String {
        let p = match self.provider {
            Provider::Gateway => "gw",
            Provider::RuleMutator => "mut",
        };
        format!("s{}-{p}-{}", self.step_index, self.sample_index)
    }
}

/// Proposals for one step plus a note when fewer than requested came back.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalBatch {
    pub proposals: Vec<Proposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<String>,
}

/// Source of proposals used by the scoring loop.
pub trait Proposer: Send + Sync {
    /// Up to `k` proposals for step `index`; `feedback` describes the failure.
    fn propose(&self, t: &Trace, index: usize, k: usize, feedback: &str) -> ProposalBatch;

    /// Model calls one `propose` may issue (used for budget accounting).
    fn calls_per_step(&self, k: usize) -> usize {
        k
    }
}

/// Replacement text from a model reply: the first fenced block, else the
/// whole reply, trimmed.
pub fn parse_reply(reply: &str) -> String {
    match fenced_block(reply) {
        Some(b) if !b.trim().is_empty() => b,
        _ => reply.trim().to_string(),
    }
}

/// Issue `k` sampled calls with the intervention prompt for step `index`.
#[allow(clippy::too_many_arguments)]
pub fn generate_proposals(
    t: &Trace,
    index: usize,
    k: usize,
    gateway: &dyn ChatGateway,
    template: &Template,
    variant: PromptVariant,
    feedback: &str,
    temperature: f64,
) -> Result<ProposalBatch, PromptError> {
    let messages = render_intervention_messages(template, t, index, feedback, variant)?;
    let mut batch = ProposalBatch::default();
    let mut failures = Vec::new();
    for sample in 0..k as u32 {
        let req = ChatRequest::new(messages.clone(), temperature, sample);
        match gateway.complete(&req) {
            Ok(reply) => {
                let payload = parse_reply(&reply);
                if payload.is_empty() {
                    failures.push(format!("sample {sample}: empty reply"));
                    continue;
                }
                batch.proposals.push(Proposal {
                    step_index: index,
                    payload,
                    provider: Provider::Gateway,
                    sample_index: sample,
                    prompt_variant: Some(variant),
                });
            }
            Err(e) => failures.push(format!("sample {sample}: {e}")),
        }
    }
    if !failures.is_empty() {
        batch.shortfall = Some(format!(
            "{} of {k} proposals missing: {}",
            failures.len(),
            failures.join("; ")
        ));
    }
    Ok(batch)
}

/// Model-backed proposer.
pub struct GatewayProposer {
    pub gateway: Arc<dyn ChatGateway>,
    pub template: Template,
    pub variant: PromptVariant,
    pub temperature: f64,
}

impl Proposer for GatewayProposer {
    fn propose(&self, t: &Trace, index: usize, k: usize, feedback: &str) -> ProposalBatch {
        match generate_proposals(
            t,
            index,
            k,
            self.gateway.as_ref(),
            &self.template,
            self.variant,
            feedback,
            self.temperature,
        ) {
            Ok(b) => b,
            Err(e) => ProposalBatch {
                proposals: Vec::new(),
                shortfall: Some(format!("prompt rendering failed: {e}")),
            },
        }
    }
}

/// Offline proposer backed by [`mutator::mutate_numeric`].
///
/// Hints map `(trace_id, step_index)` to a known-good payload, which is
/// proposed first.
#[derive(Clone, Debug, Default)]
pub struct MutatorProposer {
    pub hints: HashMap<(String, usize), String>,
}

impl MutatorProposer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_hint(mut self, trace_id: &str, step: usize, payload: &str) -> Self {
        self.hints
            .insert((trace_id.to_string(), step), payload.to_string());
        self
    }
}

impl Proposer for MutatorProposer {
    fn propose(&self, t: &Trace, index: usize, k: usize, _feedback: &str) -> ProposalBatch {
        let hint = self
            .hints
            .get(&(t.trace_id.clone(), index))
            .map(String::as_str);
        let proposals = mutator::mutate_numeric(t, index, k, hint);
        let shortfall = (proposals.len() < k)
            .then(|| format!("mutator produced {} of {k} proposals", proposals.len()));
        ProposalBatch {
            proposals,
            shortfall,
        }
    }

    fn calls_per_step(&self, _k: usize) -> usize {
        0
    }
}
