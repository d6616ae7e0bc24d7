//! Synthetic arithmetic traces with one injected fault each.
//!
//! A trace tracks a warehouse stock through `depth` updates. Every update is
//! a reasoning step, a calculator call and its response; the final answer
//! reports the last result. One calculator call is corrupted, and the
//! corrected payload is kept as ground truth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::replay::{
    format_tool_call, reexecute_suffix, replay_trace, DeterministicExecutor, CALCULATOR,
};
use crate::execution::{Origin, TraceVerifier, Verifier};
use crate::proposal::prompts::PromptSet;
use crate::trace::{
    serialize_trace, substitute_step, Step, StepType, TaskSpec, Trace, VerifierConfig, VerifierKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    WrongOperand,
    WrongOperator,
    DroppedConstraint,
    WrongToolArg,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [
        FaultKind::WrongOperand,
        FaultKind::WrongOperator,
        FaultKind::DroppedConstraint,
        FaultKind::WrongToolArg,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub trace_id: String,
    pub injected_step: usize,
    pub fault_kind: FaultKind,
    pub true_payload: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub fault_mix: Vec<FaultKind>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 200,
            min_depth: 5,
            max_depth: 9,
            fault_mix: FaultKind::ALL.to_vec(),
            seed: 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic suite: {0}")]
    Invalid(String),
    #[error("generated trace {0} violates its fault-record contract: {1}")]
    Contract(String, String),
    #[error("cannot write corpus: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.count == 0 {
            return Err(SynthError::Invalid("count must be at least 1".into()));
        }
        if self.min_depth < 3 || self.max_depth < self.min_depth {
            return Err(SynthError::Invalid(format!(
                "depth range {}..{} must satisfy 3 <= min <= max",
                self.min_depth, self.max_depth
            )));
        }
        if self.fault_mix.is_empty() {
            return Err(SynthError::Invalid("fault mix is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Add(i64),
    Sub(i64),
    Mul(i64),
    Div(i64),
    /// multiply, then remove a fixed amount
    MulSub(i64, i64),
}

impl Op {
    fn apply(self, v: i64) -> i64 {
        match self {
            Op::Add(b) => v + b,
            Op::Sub(b) => v - b,
            Op::Mul(b) => v * b,
            Op::Div(b) => v / b,
            Op::MulSub(m, c) => v * m - c,
        }
    }

    fn expression(self, lhs: &str) -> String {
        match self {
            Op::Add(b) => format!("{lhs} + {b}"),
            Op::Sub(b) => format!("{lhs} - {b}"),
            Op::Mul(b) => format!("{lhs} * {b}"),
            Op::Div(b) => format!("{lhs} / {b}"),
            Op::MulSub(m, c) => format!("{lhs} * {m} - {c}"),
        }
    }

    fn sentence(self) -> String {
        match self {
            Op::Add(b) => format!("a delivery truck unloads {b} more units onto the receiving dock"),
            Op::Sub(b) => format!("a customer order ships out and takes {b} units away from the shelves"),
            Op::Mul(b) => format!("every unit is repacked into a bundle of {b} smaller retail units"),
            Op::Div(b) => format!("units are combined so that every {b} of them form one shipping pallet"),
            Op::MulSub(m, c) => format!(
                "every unit is split into {m} retail units and then {c} damaged retail units are discarded"
            ),
        }
    }
}

struct Chain {
    start: i64,
    ops: Vec<Op>,
}

fn random_op<R: Rng>(rng: &mut R, current: i64, compound: bool) -> Op {
    if compound {
        let m = rng.gen_range(2..=5);
        let c = rng.gen_range(2..=9);
        return Op::MulSub(m, c);
    }
    loop {
        match rng.gen_range(0..4) {
            0 => return Op::Add(rng.gen_range(11..=60)),
            1 if current > 20 => return Op::Sub(rng.gen_range(11..current.min(60))),
            2 if current < 5_000 => return Op::Mul(rng.gen_range(2..=6)),
            3 => {
                let divisors: Vec<i64> = (2..=6)
                    .filter(|d| current % d == 0 && current / d > 10)
                    .collect();
                if let Some(d) = divisors.choose(rng) {
                    return Op::Div(*d);
                }
            }
            _ => {}
        }
    }
}

/// Calculator call for `op` evaluating `expr`.
fn call_payload(op: Op, expr: &str) -> String {
    let args = serde_json::json!({
        "description": format!(
            "update the running warehouse stock count recorded in the inventory ledger because {}",
            op.sentence()
        ),
        "expression": expr,
    });
    format_tool_call(CALCULATOR, &args)
}

fn build_trace(id: &str, chain: &Chain, payloads: &[String]) -> Trace {
    let mut problem = format!("A warehouse starts with {} units.", chain.start);
    for op in &chain.ops {
        problem.push_str(&format!(" Then {}.", op.sentence()));
    }
    problem.push_str(" How many units are in stock at the end?");
    let mut steps = vec![Step::new(
        0,
        StepType::Reasoning,
        format!(
            "Plan: begin from the starting stock of {} units and apply the {} updates in order with the calculator.",
            chain.start,
            chain.ops.len()
        ),
    )];
    for (j, op) in chain.ops.iter().enumerate() {
        let n = steps.len();
        steps.push(
            Step::new(
                n,
                StepType::Reasoning,
                format!("Update {}: {}.", j + 1, op.sentence()),
            )
            .with_deps([n - 1]),
        );
        steps.push(Step::new(n + 1, StepType::ToolCall, payloads[j].clone()).with_deps([n]));
        steps.push(Step::new(n + 2, StepType::ToolResponse, "pending").with_deps([n + 1]));
    }
    let n = steps.len();
    steps.push(
        Step::new(
            n,
            StepType::FinalAnswer,
            "The warehouse ends with 0 units in stock.",
        )
        .with_deps([n - 1]),
    );
    Trace {
        trace_id: id.to_string(),
        task: TaskSpec {
            problem_statement: problem,
            gold_answer: None,
            verifier_kind: VerifierKind::Numeric,
            verifier_config: VerifierConfig::default(),
        },
        steps,
    }
}

/// Corrupt op `j`'s call; `None` when the kind does not apply there.
fn inject<R: Rng>(
    rng: &mut R,
    kind: FaultKind,
    chain: &Chain,
    j: usize,
    values: &[i64],
) -> Option<String> {
    let op = chain.ops[j];
    let lhs = if j == 0 {
        chain.start.to_string()
    } else {
        "ans".to_string()
    };
    let faulty_expr = match kind {
        FaultKind::WrongOperand => {
            let delta = rng.gen_range(2..=9);
            let bumped = match op {
                Op::Add(b) => Op::Add(b + delta),
                Op::Sub(b) => Op::Sub(b + delta),
                Op::Mul(b) => Op::Mul(b + delta),
                Op::Div(b) => Op::Div(b + delta),
                Op::MulSub(m, c) => Op::MulSub(m, c + delta),
            };
            bumped.expression(&lhs)
        }
        FaultKind::WrongOperator => {
            let expr = op.expression(&lhs);
            let (from, to) = match op {
                Op::Add(_) => (" + ", " - "),
                Op::Sub(_) => (" - ", " + "),
                Op::Mul(_) | Op::MulSub(..) => (" * ", " + "),
                Op::Div(_) => (" / ", " * "),
            };
            expr.replacen(from, to, 1)
        }
        FaultKind::DroppedConstraint => match op {
            Op::MulSub(m, _) => Op::Mul(m).expression(&lhs),
            _ => return None,
        },
        FaultKind::WrongToolArg => {
            if j == 0 {
                return None;
            }
            // a stale value from two updates back, or the starting stock
            let stale = if j >= 2 { values[j - 2] } else { chain.start };
            if stale == values[j - 1] {
                return None;
            }
            op.expression(&stale.to_string())
        }
    };
    Some(call_payload(op, &faulty_expr))
}

fn tool_call_index(j: usize) -> usize {
    // plan step, then (reasoning, call, response) per update
    1 + 3 * j + 1
}

/// Generate `spec.count` faulty traces and their ground-truth records.
pub fn generate_synthetic_suite(
    spec: &SynthSpec,
) -> Result<(Vec<Trace>, Vec<FaultRecord>), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let exec = DeterministicExecutor::default();
    let verifier = Verifier::new(PromptSet::default().grader);
    let mut traces = Vec::with_capacity(spec.count);
    let mut faults = Vec::with_capacity(spec.count);
    let width = spec.count.to_string().len().max(4);
    for n in 0..spec.count {
        let id = format!("synth-{n:0width$}");
        'attempt: loop {
            let depth = rng.gen_range(spec.min_depth..=spec.max_depth);
            let kind = *spec.fault_mix.choose(&mut rng).expect("non-empty mix");
            let eligible: Vec<usize> = match kind {
                FaultKind::WrongToolArg => (1..depth).collect(),
                _ => (0..depth).collect(),
            };
            let target = *eligible.choose(&mut rng).expect("depth >= 3");
            let start = rng.gen_range(12..=99);
            let mut ops = Vec::with_capacity(depth);
            let mut values = Vec::with_capacity(depth);
            let mut cur = start;
            for j in 0..depth {
                let compound = kind == FaultKind::DroppedConstraint && j == target;
                let op = random_op(&mut rng, cur, compound);
                cur = op.apply(cur);
                ops.push(op);
                values.push(cur);
            }
            let chain = Chain { start, ops };
            let true_payloads: Vec<String> = chain
                .ops
                .iter()
                .enumerate()
                .map(|(j, op)| {
                    let lhs = if j == 0 {
                        start.to_string()
                    } else {
                        "ans".to_string()
                    };
                    call_payload(*op, &op.expression(&lhs))
                })
                .collect();
            let Some(faulty_payload) = inject(&mut rng, kind, &chain, target, &values) else {
                continue 'attempt;
            };
            let mut payloads = true_payloads.clone();
            payloads[target] = faulty_payload;

            let skeleton = build_trace(&id, &chain, &payloads);
            let Ok(mut faulty) = replay_trace(&skeleton, &exec) else {
                continue 'attempt;
            };
            faulty.task.gold_answer = Some(cur.to_string());

            let injected_step = tool_call_index(target);
            let record = FaultRecord {
                trace_id: id.clone(),
                injected_step,
                fault_kind: kind,
                true_payload: true_payloads[target].clone(),
            };
            // both halves of the ground-truth contract
            let failed = verifier
                .verify_trace(&faulty)
                .map_err(|e| SynthError::Contract(id.clone(), e.to_string()))?;
            if failed.success {
                continue 'attempt;
            }
            let prefix = substitute_step(&faulty, injected_step, &record.true_payload)
                .map_err(|e| SynthError::Contract(id.clone(), e.to_string()))?;
            let origin = Origin {
                source_trace_id: id.clone(),
                step_index: injected_step,
                proposal_id: "ground-truth".into(),
            };
            let fixed = reexecute_suffix(&faulty, &prefix, &exec, origin);
            let ok = fixed.error.is_none()
                && verifier
                    .verify_trace(&fixed.trace)
                    .map_err(|e| SynthError::Contract(id.clone(), e.to_string()))?
                    .success;
            if !ok {
                return Err(SynthError::Contract(
                    id,
                    "true payload does not repair the trace".into(),
                ));
            }
            traces.push(faulty);
            faults.push(record);
            break;
        }
    }
    Ok((traces, faults))
}

/// Write `traces/<id>.json` and `faults.jsonl` under `dir`.
pub fn write_corpus(
    dir: &Path,
    traces: &[Trace],
    faults: &[FaultRecord],
) -> Result<(), SynthError> {
    let tdir = dir.join("traces");
    std::fs::create_dir_all(&tdir)?;
    for t in traces {
        std::fs::write(
            tdir.join(format!("{}.json", t.trace_id)),
            serialize_trace(t),
        )?;
    }
    let mut lines = String::new();
    for f in faults {
        lines.push_str(&serde_json::to_string(f).expect("record serializes"));
        lines.push('\n');
    }
    std::fs::write(dir.join("faults.jsonl"), lines)?;
    Ok(())
}

/// Read a `faults.jsonl` file.
pub fn read_faults(path: &Path) -> Result<Vec<FaultRecord>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| SynthError::Invalid(format!("{}: {e}", path.display())))
        })
        .collect()
}
