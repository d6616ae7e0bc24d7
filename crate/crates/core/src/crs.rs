//! Causal responsibility scoring.
//!
//! A step is responsible for a failure (crs = 1) when at least one proposed
//! replacement, followed by re-execution of everything after it, makes the
//! verifier pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::replay::{reexecute_suffix, SuffixExecutor};
use crate::execution::{Origin, ReexecutedTrace, TraceVerifier, Verdict, VerdictMode, VerifyError};
use crate::proposal::{Proposal, Proposer};
use crate::trace::{substitute_step, StepType, Trace};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_BUDGET_CAP: usize = 150;

/// A proposal whose re-executed trace passed the verifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub proposal: Proposal,
    pub reexecuted: ReexecutedTrace,
    pub verdict: Verdict,
}

/// A proposal that did not flip the outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedAttempt {
    pub sample_index: u32,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub step_index: usize,
    pub crs: u8,
    pub original_payload: String,
    pub successful_interventions: Vec<Intervention>,
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailedAttempt>,
    /// Why the step was not evaluated at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<String>,
}

impl StepScore {
    fn skipped(t: &Trace, i: usize, reason: &str) -> Self {
        Self {
            step_index: i,
            crs: 0,
            original_payload: t.steps[i].payload.clone(),
            successful_interventions: Vec::new(),
            attempts: 0,
            failures: Vec::new(),
            skipped: Some(reason.to_string()),
            shortfall: None,
        }
    }

    pub fn is_causal(&self) -> bool {
        self.crs == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceScoring {
    pub trace_id: String,
    pub scores: Vec<StepScore>,
    /// Every proposal was evaluated (early break off).
    pub exhaustive: bool,
    /// Later steps were left unscored by the evaluation budget.
    #[serde(default)]
    pub truncated: bool,
    /// Steps flagged by an external attribution source, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attribution_flags: Vec<usize>,
}

impl TraceScoring {
    pub fn causal_steps(&self) -> Vec<usize> {
        self.scores
            .iter()
            .filter(|s| s.is_causal())
            .map(|s| s.step_index)
            .collect()
    }

    pub fn first_causal(&self) -> Option<&StepScore> {
        self.scores.iter().find(|s| s.is_causal())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub k: usize,
    pub early_break: bool,
    pub stop_after_first_causal_step: bool,
    /// Maximum proposal evaluations per trace; `None` is unbounded.
    pub budget_cap: Option<usize>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            early_break: true,
            stop_after_first_causal_step: false,
            budget_cap: Some(DEFAULT_BUDGET_CAP),
        }
    }
}

#[derive(Debug, Error)]
pub enum CrsError {
    #[error("trace {0} already passes its verifier")]
    NotFailed(String),
    #[error("trace {0} has no scorable steps")]
    TooShort(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("verifying the original trace: {0}")]
    Verify(#[from] VerifyError),
}

/// Evaluate `proposals` for step `i` in sample order.
pub fn compute_crs_for_step(
    t: &Trace,
    i: usize,
    proposals: &[Proposal],
    executor: &dyn SuffixExecutor,
    verifier: &dyn TraceVerifier,
    early_break: bool,
) -> StepScore {
    let mut ordered: Vec<&Proposal> = proposals.iter().collect();
    ordered.sort_by_key(|p| p.sample_index);
    let mut score = StepScore {
        step_index: i,
        crs: 0,
        original_payload: t
            .steps
            .get(i)
            .map(|s| s.payload.clone())
            .unwrap_or_default(),
        successful_interventions: Vec::new(),
        attempts: 0,
        failures: Vec::new(),
        skipped: None,
        shortfall: None,
    };
    let mode = executor.mode();
    for p in ordered {
        score.attempts += 1;
        let prefix = match substitute_step(t, i, &p.payload) {
            Ok(prefix) => prefix,
            Err(e) => {
                score.failures.push(FailedAttempt {
                    sample_index: p.sample_index,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        let origin = Origin {
            source_trace_id: t.trace_id.clone(),
            step_index: i,
            proposal_id: p.id(),
        };
        let rt = reexecute_suffix(t, &prefix, executor, origin);
        let verdict = match &rt.error {
            Some(e) => Verdict::failure(format!("execution failed: {e}"), mode),
            None => match verifier.verify_trace(&rt.trace) {
                Ok(v) => v,
                Err(e) => Verdict::failure(format!("verifier error: {e}"), mode),
            },
        };
        if verdict.success {
            score.successful_interventions.push(Intervention {
                proposal: p.clone(),
                reexecuted: rt,
                verdict,
            });
            if early_break {
                break;
            }
        } else {
            score.failures.push(FailedAttempt {
                sample_index: p.sample_index,
                detail: verdict.detail,
            });
        }
    }
    score.crs = u8::from(!score.successful_interventions.is_empty());
    score
}

/// Score every non-final step of a failed trace, in ascending order.
pub fn score_trace(
    t: &Trace,
    proposer: &dyn Proposer,
    executor: &dyn SuffixExecutor,
    verifier: &dyn TraceVerifier,
    opts: &ScoreOptions,
) -> Result<TraceScoring, CrsError> {
    if opts.k == 0 {
        return Err(CrsError::ZeroK);
    }
    if t.steps.len() < 2 {
        return Err(CrsError::TooShort(t.trace_id.clone()));
    }
    let original = verifier.verify_trace(t)?;
    if original.success {
        return Err(CrsError::NotFailed(t.trace_id.clone()));
    }
    let candidates = t.steps.len() - 1;
    let scorable = match opts.budget_cap {
        Some(cap) if candidates * opts.k > cap => cap / opts.k,
        _ => candidates,
    };
    let mut scoring = TraceScoring {
        trace_id: t.trace_id.clone(),
        scores: Vec::with_capacity(candidates),
        exhaustive: !opts.early_break,
        truncated: scorable < candidates,
        attribution_flags: Vec::new(),
    };
    let mut stopped = false;
    for i in 0..candidates {
        if t.steps[i].step_type == StepType::FinalAnswer {
            scoring
                .scores
                .push(StepScore::skipped(t, i, "final_answer step"));
            continue;
        }
        if i >= scorable {
            scoring
                .scores
                .push(StepScore::skipped(t, i, "evaluation budget exhausted"));
            continue;
        }
        if stopped {
            scoring
                .scores
                .push(StepScore::skipped(t, i, "stopped after first causal step"));
            continue;
        }
        if executor.mode() == VerdictMode::Deterministic
            && t.steps[i].step_type == StepType::ToolResponse
        {
            scoring.scores.push(StepScore::skipped(
                t,
                i,
                "tool_response is regenerated by the deterministic executor",
            ));
            continue;
        }
        let batch = proposer.propose(t, i, opts.k, &original.detail);
        let mut proposals = batch.proposals;
        proposals.truncate(opts.k);
        let mut score =
            compute_crs_for_step(t, i, &proposals, executor, verifier, opts.early_break);
        score.shortfall = batch.shortfall;
        if score.is_causal() && opts.stop_after_first_causal_step {
            stopped = true;
        }
        scoring.scores.push(score);
    }
    Ok(scoring)
}
