//! Oracles and scripted worlds shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;

use tracefix_core::execution::replay::{ExecFailure, SuffixExecutor};
use tracefix_core::execution::{TraceVerifier, Verdict, VerdictMode, VerifyError};
use tracefix_core::proposal::{Proposal, ProposalBatch, Proposer, Provider};
use tracefix_core::trace::{Step, StepType, TaskSpec, Trace, VerifierConfig, VerifierKind};

/// Lexical minimality from integer counts, combined in one division:
/// (m/L)(1 - d/(2L)) = m(2L - d) / (2L^2).
pub fn lexical_oracle(x: &[&str], y: &[&str]) -> f64 {
    let l = x.len().max(y.len());
    if l == 0 {
        return 1.0;
    }
    let mut m = 0u64;
    for k in 0..x.len().min(y.len()) {
        if x[k] == y[k] {
            m += 1;
        }
    }
    let d = x.len().abs_diff(y.len()) as u64;
    let l = l as u64;
    (m * (2 * l - d)) as f64 / (2 * l * l) as f64
}

/// Exhaustive edit distance by plain recursion; only for short inputs.
pub fn edit_distance_oracle(x: &[&str], y: &[&str]) -> usize {
    match (x.split_first(), y.split_first()) {
        (None, _) => y.len(),
        (_, None) => x.len(),
        (Some((a, xs)), Some((b, ys))) => {
            let sub = edit_distance_oracle(xs, ys) + usize::from(a != b);
            let del = edit_distance_oracle(xs, y) + 1;
            let ins = edit_distance_oracle(x, ys) + 1;
            sub.min(del).min(ins)
        }
    }
}

pub fn edit_oracle(x: &[&str], y: &[&str]) -> f64 {
    let l = x.len().max(y.len());
    if l == 0 {
        return 1.0;
    }
    1.0 - edit_distance_oracle(x, y) as f64 / l as f64
}

/// Outcome table: `table[i][k]` says whether proposal k for step i repairs
/// the trace. Acts as proposer, executor and verifier at once.
pub struct TableWorld {
    pub table: Vec<Vec<bool>>,
}

impl TableWorld {
    pub fn random<R: Rng>(rng: &mut R, steps: usize, k: usize) -> Self {
        let p: f64 = rng.gen_range(0.0..0.6);
        let table = (0..steps)
            .map(|_| (0..k).map(|_| rng.gen_bool(p)).collect())
            .collect();
        Self { table }
    }

    /// A failed trace with one scorable reasoning step per table row.
    pub fn trace(&self) -> Trace {
        let n = self.table.len();
        let mut steps: Vec<Step> = (0..n)
            .map(|i| Step::new(i, StepType::Reasoning, format!("step {i}")))
            .collect();
        steps.push(Step::new(n, StepType::FinalAnswer, "answer"));
        Trace {
            trace_id: "table".into(),
            task: TaskSpec {
                problem_statement: "scripted".into(),
                gold_answer: Some("0".into()),
                verifier_kind: VerifierKind::Numeric,
                verifier_config: VerifierConfig::default(),
            },
            steps,
        }
    }

    /// crs by definition: some of the first `k` proposals succeed.
    pub fn expected_crs(&self, i: usize, k: usize) -> u8 {
        u8::from(self.table[i].iter().take(k).any(|&b| b))
    }

    fn parse(payload: &str) -> Option<(usize, usize)> {
        let rest = payload.strip_prefix("fix ")?;
        let (i, k) = rest.split_once(' ')?;
        Some((i.parse().ok()?, k.parse().ok()?))
    }
}

impl Proposer for TableWorld {
    fn propose(&self, _t: &Trace, index: usize, k: usize, _feedback: &str) -> ProposalBatch {
        let proposals = (0..k.min(self.table[index].len()))
            .map(|s| Proposal {
                step_index: index,
                payload: format!("fix {index} {s}"),
                provider: Provider::RuleMutator,
                sample_index: s as u32,
                prompt_variant: None,
            })
            .collect();
        ProposalBatch {
            proposals,
            shortfall: None,
        }
    }
}

impl SuffixExecutor for TableWorld {
    fn mode(&self) -> VerdictMode {
        VerdictMode::Deterministic
    }

    fn complete(&self, _original: &Trace, prefix: &Trace) -> Result<Vec<Step>, ExecFailure> {
        Ok(prefix.steps.clone())
    }
}

impl TraceVerifier for TableWorld {
    fn mode(&self, _task: &TaskSpec) -> VerdictMode {
        VerdictMode::Deterministic
    }

    fn verify_trace(&self, t: &Trace) -> Result<Verdict, VerifyError> {
        let hit = t
            .steps
            .iter()
            .filter_map(|s| Self::parse(&s.payload))
            .any(|(i, k)| self.table[i][k]);
        Ok(if hit {
            Verdict::success("table hit", VerdictMode::Deterministic)
        } else {
            Verdict::failure("table miss", VerdictMode::Deterministic)
        })
    }
}

const WORDS: [&str; 12] = [
    "add",
    "the",
    "7",
    "apples",
    "ans * 3",
    "café",
    "naïve",
    "x = 1",
    "{\"k\": 2}",
    "line\nbreak",
    "tab\there",
    "ß",
];

fn payload<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..6);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// A structurally valid trace of random shape.
pub fn random_trace<R: Rng>(rng: &mut R, id: usize) -> Trace {
    let n = rng.gen_range(1..12);
    let complete = rng.gen_bool(0.8);
    let body_types = [
        StepType::Reasoning,
        StepType::ToolCall,
        StepType::ToolResponse,
        StepType::LlmResponse,
        StepType::MemoryAccess,
    ];
    let mut steps = Vec::with_capacity(n);
    for i in 0..n {
        let last = i + 1 == n;
        let ty = if last && complete {
            StepType::FinalAnswer
        } else {
            body_types[rng.gen_range(0..body_types.len())]
        };
        let text = if ty == StepType::MemoryAccess && rng.gen_bool(0.3) {
            String::new()
        } else {
            payload(rng)
        };
        let mut s = Step::new(i, ty, text);
        if i > 0 {
            let deps = rng.gen_range(0..=i.min(3));
            let mut d: Vec<usize> = (0..deps).map(|_| rng.gen_range(0..i)).collect();
            d.sort_unstable();
            d.dedup();
            s.deps = d;
        }
        if rng.gen_bool(0.3) {
            s.meta
                .insert("latency_ms".into(), rng.gen_range(1..500).to_string());
        }
        steps.push(s);
    }
    let kind = [
        VerifierKind::Numeric,
        VerifierKind::ProgramTests,
        VerifierKind::Predictive,
    ][rng.gen_range(0..3)];
    let tests = if kind == VerifierKind::ProgramTests {
        vec!["assert f(1) == 2".to_string()]
    } else {
        Vec::new()
    };
    Trace {
        trace_id: format!("rand-{id}"),
        task: TaskSpec {
            problem_statement: payload(rng),
            gold_answer: rng
                .gen_bool(0.7)
                .then(|| rng.gen_range(-1000..1000).to_string()),
            verifier_kind: kind,
            verifier_config: VerifierConfig {
                tests,
                abs_tolerance: rng.gen_bool(0.3).then(|| rng.gen_range(0.0..0.01)),
                rel_tolerance: None,
            },
        },
        steps,
    }
}
