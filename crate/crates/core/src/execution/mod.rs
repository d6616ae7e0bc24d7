//! Verifiers and suffix re-execution.

pub mod arith;
pub mod numbers;
pub mod replay;
pub mod sandbox;

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use num_traits::Signed;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposal::gateway::{ChatGateway, ChatRequest, GatewayError};
use crate::proposal::prompts::{PromptError, Template};
use crate::trace::{TaskSpec, Trace, VerifierKind};

pub use arith::{evaluate_expression, EvalError, Number};
pub use numbers::{extract_number, find_numerals, Numeral};
pub use replay::{
    reexecute_suffix, replay_trace, DeterministicExecutor, PredictiveExecutor, SuffixExecutor,
};
pub use sandbox::{
    run_sandboxed_tests, Limits, Sandbox, SandboxBackend, SandboxConfig, SandboxError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMode {
    Deterministic,
    Predictive,
}

impl VerdictMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictMode::Deterministic => "deterministic",
            VerdictMode::Predictive => "predictive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub detail: String,
    pub mode: VerdictMode,
}

impl Verdict {
    pub fn success(detail: impl Into<String>, mode: VerdictMode) -> Self {
        Self {
            success: true,
            detail: detail.into(),
            mode,
        }
    }

    pub fn failure(detail: impl Into<String>, mode: VerdictMode) -> Self {
        Self {
            success: false,
            detail: detail.into(),
            mode,
        }
    }
}

/// Where a re-executed trace came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub source_trace_id: String,
    pub step_index: usize,
    pub proposal_id: String,
}

/// A trace completed after an intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReexecutedTrace {
    pub trace: Trace,
    pub origin: Origin,
    /// Executor failure; a trace carrying one never verifies as success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("numeric verification needs a gold answer")]
    MissingGold,
    #[error("gold answer {0:?} contains no number")]
    GoldNotNumeric(String),
    #[error("predictive verification needs a gateway")]
    MissingGateway,
    #[error("program-test verification needs a sandbox")]
    MissingSandbox,
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Anything that can decide whether a complete trace solved its task.
pub trait TraceVerifier: Send + Sync {
    fn mode(&self, task: &TaskSpec) -> VerdictMode;
    fn verify_trace(&self, t: &Trace) -> Result<Verdict, VerifyError>;
}

fn decimal_of_f64(v: f64) -> Number {
    // f64 Display prints the shortest round-tripping decimal without exponent
    Number::parse_decimal(&format!("{}", v.abs())).unwrap_or_else(|| Number::from_integer(0))
}

/// Numeric comparison of `answer` against `gold`.
///
/// Both sides go through [`extract_number`]; comparison is exact over the
/// decimal literals so a difference of exactly the tolerance succeeds.
pub fn verify_numeric(answer: &str, task: &TaskSpec) -> Result<Verdict, VerifyError> {
    let gold_text = task
        .gold_answer
        .as_deref()
        .ok_or(VerifyError::MissingGold)?;
    let gold = find_numerals(gold_text)
        .pop()
        .ok_or_else(|| VerifyError::GoldNotNumeric(gold_text.to_string()))?;
    let mode = VerdictMode::Deterministic;
    let Some(got) = find_numerals(answer).pop() else {
        return Ok(Verdict::failure("no numeric answer", mode));
    };
    let (Some(g), Some(a)) = (
        Number::parse_decimal(&gold.text),
        Number::parse_decimal(&got.text),
    ) else {
        return Ok(Verdict::failure("no numeric answer", mode));
    };
    let diff = (a.as_rational() - g.as_rational()).abs();
    let abs_tol = decimal_of_f64(task.verifier_config.abs_tolerance.unwrap_or(1e-6));
    let mut ok = &diff <= abs_tol.as_rational();
    if let Some(rel) = task.verifier_config.rel_tolerance {
        let bound = decimal_of_f64(rel).as_rational() * g.as_rational().abs();
        ok |= diff <= bound;
    }
    let detail = format!("answer {} vs gold {}", got.text, gold.text);
    Ok(if ok {
        Verdict::success(detail, mode)
    } else {
        Verdict::failure(detail, mode)
    })
}

/// Source text of a program answer: the first fenced block, else the whole text.
pub fn extract_program(answer: &str) -> String {
    match fenced_block(answer) {
        Some(code) => code,
        None => answer.to_string(),
    }
}

/// Contents of the first ``` fenced block, without the info string.
pub fn fenced_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n').map(|n| n + 1)?;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim_end_matches(['\n', '\r']).to_string())
}

fn verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)VERDICT:\s*\**\s*(INCORRECT|CORRECT)\b").unwrap())
}

/// Grade `final_answer` with one model call.
pub fn predict_outcome(
    t: &Trace,
    gateway: &dyn ChatGateway,
    grader: &Template,
    temperature: f64,
) -> Result<Verdict, VerifyError> {
    let mut vars = BTreeMap::new();
    vars.insert("problem_statement", t.task.problem_statement.clone());
    vars.insert(
        "gold_answer",
        t.task
            .gold_answer
            .clone()
            .unwrap_or_else(|| "(none)".into()),
    );
    vars.insert(
        "final_answer",
        t.final_answer().unwrap_or("(no final answer)").to_string(),
    );
    let messages = grader.render(&vars)?;
    let reply = gateway.complete(&ChatRequest::new(messages, temperature, 0))?;
    Ok(parse_grader_reply(&reply))
}

pub fn parse_grader_reply(reply: &str) -> Verdict {
    let mode = VerdictMode::Predictive;
    match verdict_re().captures(reply) {
        Some(c) if c[1].eq_ignore_ascii_case("CORRECT") => Verdict::success(reply.trim(), mode),
        Some(_) => Verdict::failure(reply.trim(), mode),
        None => Verdict::failure("grader-unparseable", mode),
    }
}

/// The standard verifier: numeric, program tests or model grading depending
/// on the task.
#[derive(Clone)]
pub struct Verifier {
    pub sandbox: Option<Arc<Sandbox>>,
    pub gateway: Option<Arc<dyn ChatGateway>>,
    pub grader: Template,
    pub grader_temperature: f64,
}

impl Verifier {
    pub fn new(grader: Template) -> Self {
        Self {
            sandbox: None,
            gateway: None,
            grader,
            grader_temperature: 0.0,
        }
    }

    pub fn with_sandbox(mut self, sandbox: Arc<Sandbox>) -> Self {
        self.sandbox = Some(sandbox);
        self
    }

    pub fn with_gateway(mut self, gateway: Arc<dyn ChatGateway>) -> Self {
        self.gateway = Some(gateway);
        self
    }

    /// Verify a bare answer against `task`.
    pub fn verify(&self, answer: &str, task: &TaskSpec) -> Result<Verdict, VerifyError> {
        match task.verifier_kind {
            VerifierKind::Numeric => verify_numeric(answer, task),
            VerifierKind::ProgramTests => {
                let sandbox = self.sandbox.as_ref().ok_or(VerifyError::MissingSandbox)?;
                let program = extract_program(answer);
                Ok(sandbox.run_tests(
                    &program,
                    &task.verifier_config.tests,
                    sandbox.default_limits(),
                )?)
            }
            VerifierKind::Predictive => {
                let gateway = self.gateway.as_ref().ok_or(VerifyError::MissingGateway)?;
                let t = Trace {
                    trace_id: String::new(),
                    task: task.clone(),
                    steps: vec![crate::trace::Step::new(
                        0,
                        crate::trace::StepType::FinalAnswer,
                        answer,
                    )],
                };
                predict_outcome(&t, gateway.as_ref(), &self.grader, self.grader_temperature)
            }
        }
    }
}

impl TraceVerifier for Verifier {
    fn mode(&self, task: &TaskSpec) -> VerdictMode {
        if task.verifier_kind.is_deterministic() {
            VerdictMode::Deterministic
        } else {
            VerdictMode::Predictive
        }
    }

    fn verify_trace(&self, t: &Trace) -> Result<Verdict, VerifyError> {
        match t.task.verifier_kind {
            VerifierKind::Predictive => {
                let gateway = self.gateway.as_ref().ok_or(VerifyError::MissingGateway)?;
                predict_outcome(t, gateway.as_ref(), &self.grader, self.grader_temperature)
            }
            _ => match t.final_answer() {
                Some(a) => self.verify(a, &t.task),
                None => Ok(Verdict::failure("no final answer", self.mode(&t.task))),
            },
        }
    }
}
