//! Suffix re-execution after an intervention.
//!
//! A deterministic executor walks the original suffix, carrying reasoning
//! verbatim and re-running every tool call; a predictive executor asks the
//! model to write the continuation in one call.
//!
//! Tool calls are a tool-name line followed by a JSON arguments object:
//!
//! ```text
//! calculator
//! {"expression": "ans * 12"}
//! ```
//!
//! `calculator` evaluates `expression`, where `ans` is the previous
//! calculator result. `run_tests` runs `program` against the task's tests.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::Deserialize;

use super::arith::{evaluate_expression, Number};
use super::numbers::find_numerals;
use super::sandbox::Sandbox;
use super::{fenced_block, Origin, ReexecutedTrace, VerdictMode};
use crate::proposal::gateway::{ChatGateway, ChatRequest};
use crate::proposal::prompts::Template;
use crate::trace::{record_intervention, Step, StepType, Trace};

pub const CALCULATOR: &str = "calculator";
pub const RUN_TESTS: &str = "run_tests";

/// Meta key holding the exact rational result of a calculator call.
pub const EXACT_KEY: &str = "exact";
pub const ERROR_KEY: &str = "error";

/// Regenerates steps after the intervened one.
pub trait SuffixExecutor: Send + Sync {
    fn mode(&self) -> VerdictMode;

    /// Complete `prefix` (the output of `substitute_step` on `original`).
    fn complete(&self, original: &Trace, prefix: &Trace) -> Result<Vec<Step>, ExecFailure>;
}

/// Partial output of a failed execution.
#[derive(Debug, Clone)]
pub struct ExecFailure {
    pub steps: Vec<Step>,
    pub message: String,
}

/// Complete `prefix` with `executor`, renumbering ids and remapping deps.
pub fn reexecute_suffix(
    original: &Trace,
    prefix: &Trace,
    executor: &dyn SuffixExecutor,
    origin: Origin,
) -> ReexecutedTrace {
    record_intervention();
    let (mut steps, error) = match executor.complete(original, prefix) {
        Ok(steps) => (steps, None),
        Err(f) => (f.steps, Some(f.message)),
    };
    if let Some(msg) = &error {
        let mut fin = Step::new(steps.len(), StepType::FinalAnswer, "execution failed");
        fin.meta.insert(ERROR_KEY.into(), msg.clone());
        steps.retain(|s| s.step_type != StepType::FinalAnswer);
        steps.push(fin);
    }
    for (n, s) in steps.iter_mut().enumerate() {
        s.id = n;
        s.deps.retain(|&d| d < n);
    }
    ReexecutedTrace {
        trace: Trace {
            trace_id: prefix.trace_id.clone(),
            task: prefix.task.clone(),
            steps,
        },
        origin,
        error,
    }
}

/// Re-run every tool call of `t` from the start.
pub fn replay_trace(t: &Trace, executor: &DeterministicExecutor) -> Result<Trace, String> {
    let steps = executor.run(&[], &t.steps, t).map_err(|f| f.message)?;
    Ok(Trace {
        trace_id: t.trace_id.clone(),
        task: t.task.clone(),
        steps,
    })
}

#[derive(Debug, Deserialize)]
struct CalculatorArgs {
    expression: String,
}

#[derive(Debug, Deserialize)]
struct RunTestsArgs {
    program: String,
}

/// Split a tool-call payload into tool name and argument document.
pub fn parse_tool_call(payload: &str) -> Result<(String, serde_json::Value), String> {
    let trimmed = payload.trim_start();
    let (name, rest) = match trimmed.split_once('\n') {
        Some((n, r)) => (n.trim(), r.trim()),
        None => (trimmed.trim(), ""),
    };
    if name.is_empty() {
        return Err("tool call without a tool name".into());
    }
    let args = if rest.is_empty() {
        serde_json::Value::Object(Default::default())
    } else {
        serde_json::from_str(rest).map_err(|e| format!("bad arguments for {name}: {e}"))?
    };
    Ok((name.to_string(), args))
}

/// Render a tool call in the canonical two-part layout.
pub fn format_tool_call(name: &str, args: &serde_json::Value) -> String {
    format!("{name}\n{args}")
}

fn ans_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bans\b").unwrap())
}

fn rational_literal(v: &Number) -> String {
    let r = v.as_rational();
    if r.is_integer() {
        format!("({})", r.numer())
    } else {
        format!("({}/{})", r.numer(), r.denom())
    }
}

fn parse_rational(text: &str) -> Option<Number> {
    evaluate_expression(text).ok()
}

/// Replays tool calls without any model.
#[derive(Clone, Default)]
pub struct DeterministicExecutor {
    pub sandbox: Option<Arc<Sandbox>>,
}

struct RunState {
    ans: Option<Number>,
    last_program: Option<String>,
}

impl DeterministicExecutor {
    pub fn new(sandbox: Option<Arc<Sandbox>>) -> Self {
        Self { sandbox }
    }

    /// Seed the running state from already-executed steps.
    fn state_from(prefix: &[Step]) -> RunState {
        let mut st = RunState {
            ans: None,
            last_program: None,
        };
        let mut pending: Option<String> = None;
        for s in prefix {
            match s.step_type {
                StepType::ToolCall => {
                    pending = None;
                    if let Ok((name, args)) = parse_tool_call(&s.payload) {
                        if name == RUN_TESTS {
                            if let Ok(a) = serde_json::from_value::<RunTestsArgs>(args) {
                                st.last_program = Some(a.program);
                            }
                        }
                        pending = Some(name);
                    }
                }
                StepType::ToolResponse => {
                    if pending.as_deref() == Some(CALCULATOR) {
                        let v = s
                            .meta
                            .get(EXACT_KEY)
                            .and_then(|e| parse_rational(e))
                            .or_else(|| Number::parse_decimal(s.payload.trim()))
                            .or_else(|| {
                                find_numerals(&s.payload)
                                    .pop()
                                    .and_then(|n| Number::parse_decimal(&n.text))
                            });
                        if v.is_some() {
                            st.ans = v;
                        }
                    }
                    pending = None;
                }
                _ => {}
            }
        }
        st
    }

    fn call_tool(&self, st: &mut RunState, call: &Step, trace: &Trace) -> Result<Step, String> {
        let (name, args) = parse_tool_call(&call.payload)?;
        let mut resp = Step::new(0, StepType::ToolResponse, "");
        resp.deps = vec![call.id];
        match name.as_str() {
            CALCULATOR => {
                let a: CalculatorArgs = serde_json::from_value(args)
                    .map_err(|e| format!("bad calculator arguments: {e}"))?;
                let expr = if ans_re().is_match(&a.expression) {
                    let ans = st
                        .ans
                        .as_ref()
                        .ok_or("`ans` used before any calculator result")?;
                    ans_re()
                        .replace_all(&a.expression, rational_literal(ans).as_str())
                        .into_owned()
                } else {
                    a.expression.clone()
                };
                let v = evaluate_expression(&expr).map_err(|e| format!("calculator: {e}"))?;
                resp.payload = v.to_string();
                resp.meta.insert(EXACT_KEY.into(), {
                    let r = v.as_rational();
                    format!("{}/{}", r.numer(), r.denom())
                });
                st.ans = Some(v);
            }
            RUN_TESTS => {
                let a: RunTestsArgs = serde_json::from_value(args)
                    .map_err(|e| format!("bad run_tests arguments: {e}"))?;
                let sandbox = self.sandbox.as_ref().ok_or("run_tests needs a sandbox")?;
                let verdict = sandbox
                    .run_tests(
                        &a.program,
                        &trace.task.verifier_config.tests,
                        sandbox.default_limits(),
                    )
                    .map_err(|e| e.to_string())?;
                resp.payload = if verdict.success {
                    verdict.detail
                } else {
                    format!("FAILED\n{}", verdict.detail)
                };
                st.last_program = Some(a.program);
            }
            other => return Err(format!("unknown tool {other:?}")),
        }
        Ok(resp)
    }

    fn final_payload(st: &RunState, original: &str) -> String {
        if let Some(program) = &st.last_program {
            return program.clone();
        }
        let Some(ans) = &st.ans else {
            return original.to_string();
        };
        match find_numerals(original).pop() {
            Some(n) => format!("{}{}{}", &original[..n.start], ans, &original[n.end..]),
            None => ans.to_string(),
        }
    }

    /// Emit `done` followed by the re-executed `rest`.
    fn run(&self, done: &[Step], rest: &[Step], trace: &Trace) -> Result<Vec<Step>, ExecFailure> {
        let mut st = Self::state_from(done);
        let mut out: Vec<Step> = done.to_vec();
        // old id -> new position, for dep remapping
        let mut remap: HashMap<usize, usize> =
            done.iter().enumerate().map(|(n, s)| (s.id, n)).collect();
        let fail = |out: &Vec<Step>, message: String| ExecFailure {
            steps: out.clone(),
            message,
        };

        // an intervened tool call at the end of the prefix needs its response
        if let Some(last) = done.last() {
            if last.step_type == StepType::ToolCall {
                let pos = out.len() - 1;
                let mut call = last.clone();
                call.id = pos;
                let mut resp = self
                    .call_tool(&mut st, &call, trace)
                    .map_err(|m| fail(&out, m))?;
                if let Some(orig) = rest
                    .first()
                    .filter(|s| s.step_type == StepType::ToolResponse)
                {
                    remap.insert(orig.id, pos + 1);
                    inherit_meta(&mut resp, orig);
                }
                resp.deps = vec![pos];
                out.push(resp);
            }
        }
        for s in rest {
            match s.step_type {
                StepType::ToolResponse => continue,
                StepType::ToolCall => {
                    let pos = out.len();
                    remap.insert(s.id, pos);
                    let mut call = s.clone();
                    call.deps = remap_deps(&s.deps, &remap);
                    call.id = pos;
                    out.push(call.clone());
                    let mut resp = self
                        .call_tool(&mut st, &call, trace)
                        .map_err(|m| fail(&out, m))?;
                    if let Some(orig) = response_after(rest, s.id) {
                        remap.insert(orig.id, pos + 1);
                        inherit_meta(&mut resp, orig);
                    }
                    resp.deps = vec![pos];
                    out.push(resp);
                }
                StepType::FinalAnswer => {
                    let mut fin = s.clone();
                    fin.deps = remap_deps(&s.deps, &remap);
                    fin.payload = Self::final_payload(&st, &s.payload);
                    out.push(fin);
                }
                _ => {
                    remap.insert(s.id, out.len());
                    let mut c = s.clone();
                    c.deps = remap_deps(&s.deps, &remap);
                    out.push(c);
                }
            }
        }
        if out.last().map(|s| s.step_type) != Some(StepType::FinalAnswer) {
            let payload = Self::final_payload(&st, "");
            if payload.is_empty() {
                return Err(fail(&out, "no final answer could be produced".into()));
            }
            out.push(Step::new(out.len(), StepType::FinalAnswer, payload));
        }
        for (n, s) in out.iter_mut().enumerate() {
            s.id = n;
        }
        Ok(out)
    }
}

fn inherit_meta(resp: &mut Step, orig: &Step) {
    for (k, v) in &orig.meta {
        resp.meta.entry(k.clone()).or_insert_with(|| v.clone());
    }
}

fn response_after(rest: &[Step], call_id: usize) -> Option<&Step> {
    let pos = rest.iter().position(|s| s.id == call_id)?;
    rest.get(pos + 1)
        .filter(|s| s.step_type == StepType::ToolResponse)
}

fn remap_deps(deps: &[usize], remap: &HashMap<usize, usize>) -> Vec<usize> {
    deps.iter().filter_map(|d| remap.get(d).copied()).collect()
}

impl SuffixExecutor for DeterministicExecutor {
    fn mode(&self) -> VerdictMode {
        VerdictMode::Deterministic
    }

    fn complete(&self, original: &Trace, prefix: &Trace) -> Result<Vec<Step>, ExecFailure> {
        let i = prefix.steps.len();
        let rest = original.steps.get(i..).unwrap_or(&[]);
        self.run(&prefix.steps, rest, original)
    }
}

#[derive(Deserialize)]
struct ContinuationStep {
    #[serde(rename = "type")]
    step_type: String,
    payload: String,
}

/// Generates the continuation with one model call.
pub struct PredictiveExecutor {
    pub gateway: Arc<dyn ChatGateway>,
    pub template: Template,
    pub temperature: f64,
}

/// Render steps one per line for the continuation prompt.
pub fn render_steps(steps: &[Step]) -> String {
    steps
        .iter()
        .map(|s| format!("Step {} ({}): {}", s.id, s.step_type, s.payload))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Pull the JSON step array out of a continuation reply.
pub fn parse_continuation(reply: &str, first_id: usize) -> Result<Vec<Step>, String> {
    let body = fenced_block(reply).unwrap_or_else(|| reply.to_string());
    let start = body
        .find('[')
        .ok_or("continuation reply has no JSON array")?;
    let end = body
        .rfind(']')
        .ok_or("continuation reply has no JSON array")?;
    if end < start {
        return Err("continuation reply has no JSON array".into());
    }
    let raw: Vec<ContinuationStep> =
        serde_json::from_str(&body[start..=end]).map_err(|e| format!("bad continuation: {e}"))?;
    let mut steps = Vec::with_capacity(raw.len());
    for (n, r) in raw.into_iter().enumerate() {
        let ty = StepType::parse(&r.step_type)
            .ok_or_else(|| format!("continuation step {n}: unknown step type {:?}", r.step_type))?;
        steps.push(Step::new(first_id + n, ty, r.payload));
    }
    match steps.last() {
        Some(s) if s.step_type == StepType::FinalAnswer => {}
        _ => return Err("continuation does not end in final_answer".into()),
    }
    if steps[..steps.len() - 1]
        .iter()
        .any(|s| s.step_type == StepType::FinalAnswer)
    {
        return Err("continuation has more than one final_answer".into());
    }
    Ok(steps)
}

impl SuffixExecutor for PredictiveExecutor {
    fn mode(&self) -> VerdictMode {
        VerdictMode::Predictive
    }

    fn complete(&self, _original: &Trace, prefix: &Trace) -> Result<Vec<Step>, ExecFailure> {
        let fail = |message: String| ExecFailure {
            steps: prefix.steps.clone(),
            message,
        };
        let mut vars = BTreeMap::new();
        vars.insert("problem_statement", prefix.task.problem_statement.clone());
        vars.insert("trace_prefix", render_steps(&prefix.steps));
        let messages = self
            .template
            .render(&vars)
            .map_err(|e| fail(e.to_string()))?;
        let reply = self
            .gateway
            .complete(&ChatRequest::new(messages, self.temperature, 0))
            .map_err(|e| fail(e.to_string()))?;
        let cont = parse_continuation(&reply, prefix.steps.len()).map_err(fail)?;
        let mut steps = prefix.steps.clone();
        steps.extend(cont);
        Ok(steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::{TraceVerifier, Verifier};
    use crate::proposal::gateway::ScriptedGateway;
    use crate::proposal::prompts::PromptSet;
    use crate::trace::{substitute_step, validate_trace, TaskSpec, VerifierConfig, VerifierKind};

    fn calc(expr: &str) -> String {
        format_tool_call(CALCULATOR, &serde_json::json!({ "expression": expr }))
    }

    fn arithmetic_trace() -> Trace {
        Trace {
            trace_id: "a".into(),
            task: TaskSpec {
                problem_statement: "6 boxes of 12 eggs; how many eggs?".into(),
                gold_answer: Some("72".into()),
                verifier_kind: VerifierKind::Numeric,
                verifier_config: VerifierConfig::default(),
            },
            steps: vec![
                Step::new(0, StepType::Reasoning, "Multiply boxes by eggs per box."),
                Step::new(1, StepType::ToolCall, calc("6*13")).with_deps([0]),
                Step::new(2, StepType::ToolResponse, "78").with_deps([1]),
                Step::new(3, StepType::FinalAnswer, "There are 78 eggs.").with_deps([2]),
            ],
        }
    }

    fn origin(i: usize) -> Origin {
        Origin {
            source_trace_id: "a".into(),
            step_index: i,
            proposal_id: "p".into(),
        }
    }

    #[test]
    fn edited_call_regenerates_response_and_answer() {
        let t = arithmetic_trace();
        let prefix = substitute_step(&t, 1, &calc("6*12")).unwrap();
        let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(1));
        assert!(rt.error.is_none());
        let s = &rt.trace.steps;
        assert_eq!(s.len(), 4);
        assert_eq!(s[2].payload, "72");
        assert_eq!(s[2].deps, vec![1]);
        assert_eq!(s[3].payload, "There are 72 eggs.");
        assert!(validate_trace(&rt.trace).is_empty());
        let v = Verifier::new(PromptSet::default().grader);
        assert!(v.verify_trace(&rt.trace).unwrap().success);
    }

    #[test]
    fn spec_example_six_times_thirteen() {
        let mut t = arithmetic_trace();
        t.steps[1].payload = calc("6*12");
        t.steps[2].payload = "72".into();
        let prefix = substitute_step(&t, 1, &calc("6*13")).unwrap();
        let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(1));
        assert_eq!(rt.trace.steps[2].payload, "78");
        assert_eq!(rt.trace.final_answer(), Some("There are 78 eggs."));
    }

    #[test]
    fn identity_substitution_reproduces_suffix() {
        let t = replay_trace(&arithmetic_trace(), &DeterministicExecutor::default()).unwrap();
        for i in 0..t.len() - 1 {
            let prefix = substitute_step(&t, i, &t.steps[i].payload).unwrap();
            let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(i));
            assert_eq!(rt.trace.steps, t.steps, "step {i}");
        }
    }

    #[test]
    fn ans_chains_exactly() {
        let mut t = arithmetic_trace();
        t.steps = vec![
            Step::new(0, StepType::ToolCall, calc("10/3")),
            Step::new(1, StepType::ToolResponse, "?"),
            Step::new(2, StepType::ToolCall, calc("ans * 3")),
            Step::new(3, StepType::ToolResponse, "?"),
            Step::new(4, StepType::FinalAnswer, "So 0."),
        ];
        let r = replay_trace(&t, &DeterministicExecutor::default()).unwrap();
        assert_eq!(r.steps[1].payload, "3.333333333333");
        assert_eq!(r.steps[3].payload, "10");
        assert_eq!(r.steps[4].payload, "So 10.");
        // intervening after the first call reads ans back from the response meta
        let prefix = substitute_step(&r, 2, &calc("ans * 6")).unwrap();
        let rt = reexecute_suffix(&r, &prefix, &DeterministicExecutor::default(), origin(2));
        assert_eq!(rt.trace.final_answer(), Some("So 20."));
    }

    #[test]
    fn executor_errors_are_recorded() {
        let t = arithmetic_trace();
        let prefix = substitute_step(&t, 1, &calc("6/0")).unwrap();
        let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(1));
        assert_eq!(rt.error.as_deref(), Some("calculator: division by zero"));
        let fin = rt.trace.steps.last().unwrap();
        assert_eq!(fin.step_type, StepType::FinalAnswer);
        assert_eq!(fin.meta[ERROR_KEY], "calculator: division by zero");
        assert!(validate_trace(&rt.trace).is_empty());

        let prefix = substitute_step(&t, 1, "calculator\n{not json").unwrap();
        let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(1));
        assert!(rt.error.unwrap().starts_with("bad arguments"));

        let prefix = substitute_step(&t, 1, "search\n{}").unwrap();
        let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(1));
        assert_eq!(rt.error.as_deref(), Some("unknown tool \"search\""));
    }

    #[test]
    fn reasoning_edit_keeps_suffix() {
        let t = replay_trace(&arithmetic_trace(), &DeterministicExecutor::default()).unwrap();
        let prefix = substitute_step(&t, 0, "Think harder.").unwrap();
        let rt = reexecute_suffix(&t, &prefix, &DeterministicExecutor::default(), origin(0));
        assert_eq!(rt.trace.steps[0].payload, "Think harder.");
        assert_eq!(rt.trace.steps[1..], t.steps[1..]);
    }

    #[test]
    fn predictive_continuation_appends_steps() {
        let t = arithmetic_trace();
        let reply = "```json\n[{\"type\": \"reasoning\", \"payload\": \"6*12 is 72\"},\n {\"type\": \"final_answer\", \"payload\": \"72\"}]\n```";
        let gw = Arc::new(ScriptedGateway::new([reply]));
        let ex = PredictiveExecutor {
            gateway: gw.clone(),
            template: PromptSet::default().continuation,
            temperature: 0.0,
        };
        let prefix = substitute_step(&t, 1, &calc("6*12")).unwrap();
        let rt = reexecute_suffix(&t, &prefix, &ex, origin(1));
        assert!(rt.error.is_none());
        assert_eq!(rt.trace.len(), prefix.len() + 2);
        assert_eq!(rt.trace.final_answer(), Some("72"));
        assert!(validate_trace(&rt.trace).is_empty());
        assert_eq!(gw.requests().len(), 1);
    }

    #[test]
    fn predictive_bad_reply_is_an_execution_error() {
        let t = arithmetic_trace();
        let gw = Arc::new(ScriptedGateway::new(["I think it works"]));
        let ex = PredictiveExecutor {
            gateway: gw,
            template: PromptSet::default().continuation,
            temperature: 0.0,
        };
        let prefix = substitute_step(&t, 0, "x").unwrap();
        let rt = reexecute_suffix(&t, &prefix, &ex, origin(0));
        assert!(rt.error.is_some());
        assert_eq!(rt.trace.final_answer(), Some("execution failed"));
    }

    #[test]
    fn continuation_parsing() {
        assert!(parse_continuation("[]", 0).is_err());
        assert!(parse_continuation(r#"[{"type":"reasoning","payload":"x"}]"#, 0).is_err());
        assert!(parse_continuation(r#"[{"type":"thinking","payload":"x"}]"#, 0).is_err());
        let s =
            parse_continuation(r#"ok [{"type":"final_answer","payload":"9"}] done"#, 3).unwrap();
        assert_eq!(s[0].id, 3);
    }

    #[test]
    fn tool_call_parsing() {
        let (n, a) = parse_tool_call("calculator\n{\"expression\": \"1+1\"}").unwrap();
        assert_eq!(n, "calculator");
        assert_eq!(a["expression"], "1+1");
        assert!(parse_tool_call("\n").is_err());
    }
}
