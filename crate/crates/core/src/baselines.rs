//! Whole-answer refinement baselines: direct answering, an iterative
//! generate/feedback/refine loop, and a single reflect-then-re-answer pass.
//!
//! None of these touch individual trace steps; they rewrite the answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{extract_program, find_numerals, Verifier, VerifyError};
use crate::metrics::Method;
use crate::proposal::gateway::{ChatGateway, ChatRequest, GatewayError};
use crate::proposal::prompts::{join_messages, PromptError, PromptSet, Template};
use crate::trace::{TaskSpec, VerifierKind};

pub const STOP_TOKEN: &str = "[STOP]";
pub const DEFAULT_MAX_ITERS_MATH: usize = 4;
pub const DEFAULT_MAX_ITERS_PROGRAM: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub reply: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub method: Method,
    pub initial_answer: String,
    pub final_answer: String,
    /// Full text of the last solution, before answer extraction.
    pub final_solution: String,
    pub iterations_used: usize,
    pub transcript: Vec<Exchange>,
    /// A gateway failure cut the loop short; `final_answer` is the last good one.
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("max_iters must be at least 1")]
    ZeroIterations,
    #[error("the initial answer already passes; reflection only runs on incorrect answers")]
    AlreadyCorrect,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Default refinement cap for a task kind.
pub fn default_max_iters(task: &TaskSpec) -> usize {
    match task.verifier_kind {
        VerifierKind::ProgramTests => DEFAULT_MAX_ITERS_PROGRAM,
        _ => DEFAULT_MAX_ITERS_MATH,
    }
}

/// The answer a free-form solution commits to: its last numeral for numeric
/// tasks, its first fenced block for program tasks, the whole text otherwise.
pub fn extract_answer(task: &TaskSpec, solution: &str) -> String {
    match task.verifier_kind {
        VerifierKind::Numeric => match find_numerals(solution).pop() {
            Some(n) => n.text,
            None => solution.trim().to_string(),
        },
        VerifierKind::ProgramTests => extract_program(solution),
        VerifierKind::Predictive => solution.trim().to_string(),
    }
}

/// Whether the last non-empty line of `feedback` is exactly `[STOP]`.
pub fn is_stop(feedback: &str) -> bool {
    feedback
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim() == STOP_TOKEN)
}

struct Session<'a> {
    gateway: &'a dyn ChatGateway,
    temperature: f64,
    transcript: Vec<Exchange>,
    calls: u32,
}

impl Session<'_> {
    fn ask(
        &mut self,
        template: &Template,
        vars: &[(&'static str, &str)],
    ) -> Result<String, BaselineError> {
        let vars: BTreeMap<&str, String> = vars.iter().map(|(k, v)| (*k, v.to_string())).collect();
        let messages = template.render(&vars)?;
        let prompt = join_messages(&messages);
        let reply =
            self.gateway
                .complete(&ChatRequest::new(messages, self.temperature, self.calls))?;
        self.calls += 1;
        self.transcript.push(Exchange {
            prompt,
            reply: reply.clone(),
        });
        Ok(reply)
    }
}

/// One generation call, no refinement.
pub fn direct(
    task: &TaskSpec,
    gateway: &dyn ChatGateway,
    prompts: &PromptSet,
    temperature: f64,
) -> Result<RefinementOutcome, BaselineError> {
    let mut s = Session {
        gateway,
        temperature,
        transcript: Vec::new(),
        calls: 0,
    };
    let solution = s.ask(
        &prompts.refine_generate,
        &[("problem", &task.problem_statement)],
    )?;
    let answer = extract_answer(task, &solution);
    Ok(RefinementOutcome {
        method: Method::Direct,
        initial_answer: answer.clone(),
        final_answer: answer,
        final_solution: solution,
        iterations_used: 0,
        transcript: s.transcript,
        truncated: false,
        error: None,
    })
}

/// Generate, then alternate feedback and refinement until the feedback ends
/// in `[STOP]` or `max_iters` feedback rounds have run.
pub fn self_refine(
    task: &TaskSpec,
    gateway: &dyn ChatGateway,
    prompts: &PromptSet,
    max_iters: usize,
    temperature: f64,
) -> Result<RefinementOutcome, BaselineError> {
    if max_iters == 0 {
        return Err(BaselineError::ZeroIterations);
    }
    let mut s = Session {
        gateway,
        temperature,
        transcript: Vec::new(),
        calls: 0,
    };
    let problem = task.problem_statement.as_str();
    let mut solution = s.ask(&prompts.refine_generate, &[("problem", problem)])?;
    let initial_answer = extract_answer(task, &solution);
    let mut iterations = 0;
    let mut error = None;
    while iterations < max_iters {
        iterations += 1;
        let feedback = match s.ask(
            &prompts.refine_feedback,
            &[("problem", problem), ("solution", &solution)],
        ) {
            Ok(f) => f,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        if is_stop(&feedback) {
            break;
        }
        match s.ask(
            &prompts.refine_refine,
            &[
                ("problem", problem),
                ("solution", &solution),
                ("feedback", &feedback),
            ],
        ) {
            Ok(refined) => solution = refined,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    Ok(RefinementOutcome {
        method: Method::SelfRefine,
        initial_answer,
        final_answer: extract_answer(task, &solution),
        final_solution: solution,
        iterations_used: iterations,
        transcript: s.transcript,
        truncated: error.is_some(),
        error,
    })
}

/// One reflection on an incorrect answer, then one re-answer.
pub fn self_reflection(
    task: &TaskSpec,
    gateway: &dyn ChatGateway,
    prompts: &PromptSet,
    initial_solution: &str,
    verifier: &Verifier,
    temperature: f64,
) -> Result<RefinementOutcome, BaselineError> {
    let initial_answer = extract_answer(task, initial_solution);
    if verifier.verify(&initial_answer, task)?.success {
        return Err(BaselineError::AlreadyCorrect);
    }
    let mut s = Session {
        gateway,
        temperature,
        transcript: Vec::new(),
        calls: 0,
    };
    let problem = task.problem_statement.as_str();
    let reflection = s.ask(
        &prompts.reflect_reflect,
        &[("problem", problem), ("wrong_solution", initial_solution)],
    )?;
    let (solution, error) = match s.ask(
        &prompts.reflect_reanswer,
        &[("problem", problem), ("reflection", &reflection)],
    ) {
        Ok(sol) => (sol, None),
        Err(e) => (initial_solution.to_string(), Some(e.to_string())),
    };
    Ok(RefinementOutcome {
        method: Method::SelfReflection,
        initial_answer,
        final_answer: extract_answer(task, &solution),
        final_solution: solution,
        iterations_used: 1,
        transcript: s.transcript,
        truncated: error.is_some(),
        error,
    })
}
