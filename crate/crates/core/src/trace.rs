//! Typed execution traces.
//!
//! A [`Trace`] is an ordered chain of [`Step`]s logged by an agent runtime,
//! bound to the [`TaskSpec`] it was solving. Traces are immutable values once
//! parsed; interventions build new traces through [`substitute_step`].

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Step type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepType {
    Reasoning,
    ToolCall,
    ToolResponse,
    LlmResponse,
    MemoryAccess,
    FinalAnswer,
}

impl StepType {
    pub const ALL: [StepType; 6] = [
        StepType::Reasoning,
        StepType::ToolCall,
        StepType::ToolResponse,
        StepType::LlmResponse,
        StepType::MemoryAccess,
        StepType::FinalAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepType::Reasoning => "reasoning",
            StepType::ToolCall => "tool_call",
            StepType::ToolResponse => "tool_response",
            StepType::LlmResponse => "llm_response",
            StepType::MemoryAccess => "memory_access",
            StepType::FinalAnswer => "final_answer",
        }
    }

    pub fn parse(tag: &str) -> Option<StepType> {
        StepType::ALL.into_iter().find(|t| t.as_str() == tag)
    }
}

impl fmt::Display for StepType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One unit of agent execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub id: usize,
    #[serde(rename = "type")]
    pub step_type: StepType,
    pub payload: String,
    #[serde(default)]
    pub deps: Vec<usize>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Step {
    pub fn new(id: usize, step_type: StepType, payload: impl Into<String>) -> Self {
        Self {
            id,
            step_type,
            payload: payload.into(),
            deps: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_deps(mut self, deps: impl IntoIterator<Item = usize>) -> Self {
        self.deps = deps.into_iter().collect();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Numeric,
    ProgramTests,
    Predictive,
}

impl VerifierKind {
    pub fn is_deterministic(self) -> bool {
        !matches!(self, VerifierKind::Predictive)
    }
}

/// Verifier parameters carried with a task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    /// Assertion lines for `program_tests`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tolerance: Option<f64>,
    /// Relative tolerance; disabled unless set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub problem_statement: String,
    #[serde(default)]
    pub gold_answer: Option<String>,
    pub verifier_kind: VerifierKind,
    #[serde(default)]
    pub verifier_config: VerifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub task: TaskSpec,
    pub steps: Vec<Step>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_answer(&self) -> Option<&str> {
        final_answer_of(self)
    }

    pub fn to_json(&self) -> String {
        serialize_trace(self)
    }
}

/// A broken structural rule, named by step where applicable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyTrace,
    IdMismatch { position: usize, found: usize },
    ForwardDependency { step: usize, dep: usize },
    EmptyPayload { step: usize },
    MultipleFinalAnswers { steps: Vec<usize> },
    FinalAnswerNotLast { step: usize },
    MissingTests,
}

impl Violation {
    pub fn step(&self) -> Option<usize> {
        match self {
            Violation::IdMismatch { position, .. } => Some(*position),
            Violation::ForwardDependency { step, .. }
            | Violation::EmptyPayload { step }
            | Violation::FinalAnswerNotLast { step } => Some(*step),
            Violation::MultipleFinalAnswers { steps } => steps.get(1).copied(),
            Violation::EmptyTrace | Violation::MissingTests => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTrace => write!(f, "trace has no steps"),
            Violation::IdMismatch { position, found } => {
                write!(f, "step {position}: id {found} breaks dense ordering")
            }
            Violation::ForwardDependency { step, dep } => {
                write!(f, "forward dependency at step {step} (depends on {dep})")
            }
            Violation::EmptyPayload { step } => write!(f, "step {step}: empty payload"),
            Violation::MultipleFinalAnswers { steps } => {
                write!(f, "multiple final_answer steps at {steps:?}")
            }
            Violation::FinalAnswerNotLast { step } => {
                write!(f, "step {step}: final_answer must be the last step")
            }
            Violation::MissingTests => {
                write!(f, "program_tests verifier requires a non-empty test list")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace document: {0}")]
    Malformed(String),
    #[error("step {step}: unknown step type {tag:?}")]
    UnknownStepType { step: usize, tag: String },
    #[error("{0}")]
    Invalid(Violation),
    #[error("step index {index} out of range for substitution in a {len}-step trace")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("step {0} is the final_answer step and cannot be substituted")]
    FinalAnswerStep(usize),
}

#[derive(Deserialize)]
struct RawTrace {
    trace_id: String,
    task: TaskSpec,
    steps: Vec<RawStep>,
}

#[derive(Deserialize)]
struct RawStep {
    id: usize,
    #[serde(rename = "type")]
    step_type: String,
    payload: String,
    #[serde(default)]
    deps: Vec<usize>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Parse and validate a serialized trace document.
pub fn parse_trace(bytes: &[u8]) -> Result<Trace, TraceError> {
    let raw: RawTrace =
        serde_json::from_slice(bytes).map_err(|e| TraceError::Malformed(e.to_string()))?;
    let mut steps = Vec::with_capacity(raw.steps.len());
    for (position, s) in raw.steps.into_iter().enumerate() {
        let step_type = StepType::parse(&s.step_type).ok_or(TraceError::UnknownStepType {
            step: position,
            tag: s.step_type.clone(),
        })?;
        steps.push(Step {
            id: s.id,
            step_type,
            payload: s.payload,
            deps: s.deps,
            meta: s.meta,
        });
    }
    let trace = Trace {
        trace_id: raw.trace_id,
        task: raw.task,
        steps,
    };
    match validate_trace(&trace).into_iter().next() {
        Some(v) => Err(TraceError::Invalid(v)),
        None => Ok(trace),
    }
}

pub fn serialize_trace(t: &Trace) -> String {
    serde_json::to_string_pretty(t).expect("trace serialization is infallible")
}

/// Collect every structural violation; empty means valid.
pub fn validate_trace(t: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.steps.is_empty() {
        out.push(Violation::EmptyTrace);
    }
    for (position, step) in t.steps.iter().enumerate() {
        if step.id != position {
            out.push(Violation::IdMismatch {
                position,
                found: step.id,
            });
        }
        for &dep in &step.deps {
            if dep >= position {
                out.push(Violation::ForwardDependency {
                    step: position,
                    dep,
                });
            }
        }
        if step.step_type != StepType::MemoryAccess && step.payload.trim().is_empty() {
            out.push(Violation::EmptyPayload { step: position });
        }
    }
    let finals: Vec<usize> = t
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.step_type == StepType::FinalAnswer)
        .map(|(i, _)| i)
        .collect();
    if finals.len() > 1 {
        out.push(Violation::MultipleFinalAnswers {
            steps: finals.clone(),
        });
    }
    if let Some(&first) = finals.first() {
        if first + 1 != t.steps.len() && finals.len() == 1 {
            out.push(Violation::FinalAnswerNotLast { step: first });
        }
    }
    if t.task.verifier_kind == VerifierKind::ProgramTests && t.task.verifier_config.tests.is_empty()
    {
        out.push(Violation::MissingTests);
    }
    out
}

/// Payload of the final answer step, verbatim.
pub fn final_answer_of(t: &Trace) -> Option<&str> {
    t.steps
        .last()
        .filter(|s| s.step_type == StepType::FinalAnswer)
        .map(|s| s.payload.as_str())
}

thread_local! {
    static INTERVENTIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of step substitutions and suffix re-executions performed on the
/// current thread. Used to audit code paths that must never intervene.
pub fn intervention_count() -> u64 {
    INTERVENTIONS.with(Cell::get)
}

pub(crate) fn record_intervention() {
    INTERVENTIONS.with(|c| c.set(c.get() + 1));
}

/// Build the prefix `0..=index` with step `index` carrying `payload`.
///
/// Every step after `index` is dropped; regenerating the suffix is the
/// executor's job. The input trace is left untouched.
pub fn substitute_step(t: &Trace, index: usize, payload: &str) -> Result<Trace, TraceError> {
    if let Some(step) = t.steps.get(index) {
        if step.step_type == StepType::FinalAnswer {
            return Err(TraceError::FinalAnswerStep(index));
        }
    }
    if index + 1 >= t.steps.len() {
        return Err(TraceError::IndexOutOfRange {
            index,
            len: t.steps.len(),
        });
    }
    record_intervention();
    let mut steps = t.steps[..=index].to_vec();
    steps[index].payload = payload.to_string();
    Ok(Trace {
        trace_id: t.trace_id.clone(),
        task: t.task.clone(),
        steps,
    })
}
