//! End-to-end runs over a corpus, persisted to a resumable run directory.
//!
//! Layout of the run directory:
//!
//! - `config.toml`: snapshot of the configuration that started the run
//! - `corpus/`: the generated suite, for synthetic runs
//! - `scores.jsonl`: one [`TraceRecord`] per (method, trace)
//! - `pairs.jsonl`: exported contrastive pairs
//! - `summary.json`, `report.csv`, `report.md`: aggregates, rewritten at the end
//! - `run.log`: one line per processed trace

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ProposerKind, RunConfig, Stage};
use super::ingest::{ingest_corpus, IngestError};
use super::synth::{generate_synthetic_suite, write_corpus, FaultRecord, SynthError};
use crate::baselines::{default_max_iters, self_refine, self_reflection, RefinementOutcome};
use crate::consensus::{validate_attribution, ConsensusOutcome, CriticTemplates};
use crate::crs::{score_trace, TraceScoring};
use crate::execution::replay::{DeterministicExecutor, PredictiveExecutor, SuffixExecutor};
use crate::execution::{Sandbox, TraceVerifier, VerdictMode, Verifier};
use crate::metrics::{crs_precision, render_report, FlagSource, Method, MetricsError, RunSummary};
use crate::proposal::gateway::{
    build_http_gateway, ChatGateway, GatewayError, Metered, StubDirGateway,
};
use crate::proposal::prompts::{PromptError, PromptSet};
use crate::proposal::{GatewayProposer, MutatorProposer, Proposer};
use crate::repair::{
    emit_pair, select_repair, ContrastivePair, MinimalityScore, PairError, PairWriter,
};
use crate::trace::Trace;

pub const CONFIG_FILE: &str = "config.toml";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
pub const LOG_FILE: &str = "run.log";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// The original trace already passes.
    Passed,
    /// Scored only (score stage).
    Scored,
    Repaired,
    Unrepaired,
    Error,
}

/// Outcome of one method on one trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub method: Method,
    pub trace_id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<TraceScoring>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<ContrastivePair>,
    /// Gate results, in the order causal steps were tried.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub consensus: Vec<ConsensusOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<RefinementOutcome>,
    /// Lexical minimality of a baseline's final answer against the original.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_minimality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TraceRecord {
    fn new(method: Method, trace_id: &str, status: Status) -> Self {
        Self {
            method,
            trace_id: trace_id.to_string(),
            status,
            scoring: None,
            repair: None,
            consensus: Vec::new(),
            baseline: None,
            answer_minimality: None,
            error: None,
        }
    }

    fn failed(method: Method, trace_id: &str, error: impl ToString) -> Self {
        let mut r = Self::new(method, trace_id, Status::Error);
        r.error = Some(error.to_string());
        r
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0} already holds a run with a different configuration")]
    ConfigMismatch(PathBuf),
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a run did, for the caller's exit status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub summaries: Vec<RunSummary>,
    /// Records produced by this invocation.
    pub processed: usize,
    /// (method, trace) pairs already present from an earlier invocation.
    pub resumed: usize,
    /// Records with status `error` across the whole run.
    pub errors: usize,
    pub rejected_inputs: usize,
    pub pairs_written: usize,
    pub proposal_calls: u64,
    pub proposal_budget: u64,
    pub consensus_calls: u64,
    pub gateway_calls: u64,
}

impl RunOutcome {
    pub fn is_partial(&self) -> bool {
        self.errors > 0 || self.rejected_inputs > 0
    }
}

/// Load the corpus named by the config, writing synthetic suites to disk.
pub fn load_inputs(
    config: &RunConfig,
    out: &Path,
) -> Result<(Vec<Trace>, Vec<FaultRecord>, usize), PipelineError> {
    if let Some(spec) = &config.run.synthetic {
        let spec = super::synth::SynthSpec {
            seed: config.run.seed,
            ..spec.clone()
        };
        let (traces, faults) = generate_synthetic_suite(&spec)?;
        let dir = out.join("corpus");
        if !dir.exists() {
            write_corpus(&dir, &traces, &faults)?;
        }
        return Ok((traces, faults, 0));
    }
    let path = config
        .run
        .corpus
        .as_ref()
        .ok_or_else(|| PipelineError::Other("no corpus configured".into()))?;
    let corpus = ingest_corpus(path)?;
    for r in &corpus.rejected {
        log::warn!("rejected {}: {}", r.path.display(), r.reason);
    }
    let faults_path = path.join("faults.jsonl");
    let faults = if faults_path.exists() {
        super::synth::read_faults(&faults_path)?
    } else {
        Vec::new()
    };
    let rejected = corpus.rejected.len();
    Ok((
        corpus.traces.into_iter().map(|(_, t)| t).collect(),
        faults,
        rejected,
    ))
}

struct Context<'a> {
    config: &'a RunConfig,
    prompts: PromptSet,
    verifier: Verifier,
    deterministic: DeterministicExecutor,
    /// Shared gateway for grading, continuation and baselines.
    gateway: Option<Arc<Metered<Arc<dyn ChatGateway>>>>,
    /// Separate meters so the proposal budget can be checked on its own.
    proposal_gateway: Option<Arc<Metered<Arc<dyn ChatGateway>>>>,
    consensus_gateway: Option<Arc<Metered<Arc<dyn ChatGateway>>>>,
    /// Present when the run includes the scoring method.
    proposer: Option<Box<dyn Proposer>>,
}

fn needs_gateway(config: &RunConfig, traces: &[Trace]) -> bool {
    let r = &config.run;
    r.methods.iter().any(|m| match m {
        Method::Direct => false,
        Method::SelfRefine | Method::SelfReflection => true,
        Method::CrsRepair => {
            r.proposer == ProposerKind::Gateway
                || r.force_consensus
                || traces
                    .iter()
                    .any(|t| !t.task.verifier_kind.is_deterministic())
        }
    })
}

fn open_gateway(config: &RunConfig) -> Result<Arc<dyn ChatGateway>, PipelineError> {
    match &config.run.stub_dir {
        Some(dir) => Ok(Arc::new(StubDirGateway::load(dir)?)),
        None => Ok(build_http_gateway(&config.gateway)?),
    }
}

impl<'a> Context<'a> {
    fn new(
        config: &'a RunConfig,
        traces: &[Trace],
        faults: &[FaultRecord],
        gateway: Option<Arc<dyn ChatGateway>>,
    ) -> Result<Self, PipelineError> {
        let prompts = PromptSet::load(&config.prompts)?;
        let sandbox = Arc::new(Sandbox::new(config.sandbox.clone()));
        let base = match gateway {
            Some(g) => Some(g),
            None if needs_gateway(config, traces) => Some(open_gateway(config)?),
            None => None,
        };
        let meter = |g: &Arc<dyn ChatGateway>| Arc::new(Metered::new(Arc::clone(g)));
        let gateway = base.as_ref().map(meter);
        let proposal_gateway = base.as_ref().map(meter);
        let consensus_gateway = base.as_ref().map(meter);
        let mut verifier = Verifier::new(prompts.grader.clone()).with_sandbox(Arc::clone(&sandbox));
        if let Some(g) = &gateway {
            verifier = verifier.with_gateway(g.clone());
        }
        let scoring = config.run.methods.contains(&Method::CrsRepair);
        let proposer: Option<Box<dyn Proposer>> = match config.run.proposer {
            _ if !scoring => None,
            ProposerKind::Mutator => {
                let mut m = MutatorProposer::new();
                for f in faults {
                    m = m.with_hint(&f.trace_id, f.injected_step, &f.true_payload);
                }
                Some(Box::new(m))
            }
            ProposerKind::Gateway => {
                let g = proposal_gateway.clone().ok_or_else(|| {
                    PipelineError::Other(
                        "gateway proposer selected but no gateway is available".into(),
                    )
                })?;
                Some(Box::new(GatewayProposer {
                    gateway: g,
                    template: prompts.intervention.clone(),
                    variant: config.run.prompt_variant,
                    temperature: config.gateway.temperature,
                }))
            }
        };
        Ok(Self {
            config,
            prompts,
            verifier,
            deterministic: DeterministicExecutor::new(Some(sandbox)),
            gateway,
            proposal_gateway,
            consensus_gateway,
            proposer,
        })
    }

    fn predictive_executor(&self) -> Result<PredictiveExecutor, String> {
        let g = self
            .gateway
            .clone()
            .ok_or("predictive trace needs a gateway")?;
        Ok(PredictiveExecutor {
            gateway: g,
            template: self.prompts.continuation.clone(),
            temperature: self.config.gateway.temperature,
        })
    }
}

/// A repair chosen by a worker, written out by the sequential phase.
struct Pending {
    step_pos: usize,
    minimality: MinimalityScore,
    consensus: Option<f64>,
}

fn process(ctx: &Context<'_>, method: Method, t: &Trace) -> (TraceRecord, Option<Pending>) {
    let original = match ctx.verifier.verify_trace(t) {
        Ok(v) => v,
        Err(e) => return (TraceRecord::failed(method, &t.trace_id, e), None),
    };
    if original.success {
        return (TraceRecord::new(method, &t.trace_id, Status::Passed), None);
    }
    match method {
        // the original trace is the direct answer; nothing is re-attempted
        Method::Direct => (
            TraceRecord::new(method, &t.trace_id, Status::Unrepaired),
            None,
        ),
        Method::SelfRefine | Method::SelfReflection => (baseline(ctx, method, t), None),
        Method::CrsRepair => crs_repair(ctx, t, &original.detail),
    }
}

fn baseline(ctx: &Context<'_>, method: Method, t: &Trace) -> TraceRecord {
    let Some(g) = &ctx.gateway else {
        return TraceRecord::failed(method, &t.trace_id, "baseline needs a gateway");
    };
    let temp = ctx.config.gateway.temperature;
    let original_answer = t.final_answer().unwrap_or_default().to_string();
    let outcome = match method {
        Method::SelfRefine => {
            let iters = ctx
                .config
                .run
                .max_iters
                .unwrap_or_else(|| default_max_iters(&t.task));
            self_refine(&t.task, g.as_ref(), &ctx.prompts, iters, temp)
        }
        _ => self_reflection(
            &t.task,
            g.as_ref(),
            &ctx.prompts,
            &original_answer,
            &ctx.verifier,
            temp,
        ),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return TraceRecord::failed(method, &t.trace_id, e),
    };
    let verdict = match ctx.verifier.verify(&outcome.final_answer, &t.task) {
        Ok(v) => v,
        Err(e) => return TraceRecord::failed(method, &t.trace_id, e),
    };
    let status = if verdict.success {
        Status::Repaired
    } else {
        Status::Unrepaired
    };
    let mut r = TraceRecord::new(method, &t.trace_id, status);
    if verdict.success {
        r.answer_minimality =
            Some(MinimalityScore::between(&original_answer, &outcome.final_answer).lexical);
    }
    r.baseline = Some(outcome);
    r
}

fn crs_repair(ctx: &Context<'_>, t: &Trace, feedback: &str) -> (TraceRecord, Option<Pending>) {
    let method = Method::CrsRepair;
    let predictive;
    let executor: &dyn SuffixExecutor = if t.task.verifier_kind.is_deterministic() {
        &ctx.deterministic
    } else {
        match ctx.predictive_executor() {
            Ok(e) => {
                predictive = e;
                &predictive
            }
            Err(e) => return (TraceRecord::failed(method, &t.trace_id, e), None),
        }
    };
    let proposer = ctx
        .proposer
        .as_deref()
        .expect("proposer built for scoring runs");
    let scoring = match score_trace(
        t,
        proposer,
        executor,
        &ctx.verifier,
        &ctx.config.score_options(),
    ) {
        Ok(s) => s,
        Err(e) => return (TraceRecord::failed(method, &t.trace_id, e), None),
    };
    let mut record = TraceRecord::new(method, &t.trace_id, Status::Unrepaired);
    if ctx.config.run.stage == Stage::Score {
        record.status = Status::Scored;
        record.scoring = Some(scoring);
        return (record, None);
    }
    let gate =
        ctx.config.run.force_consensus || ctx.verifier.mode(&t.task) == VerdictMode::Predictive;
    let mut pending = None;
    for (pos, score) in scoring
        .scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_causal())
    {
        let Some((iv, minimality)) = select_repair(score, ctx.config.run.metric) else {
            continue;
        };
        let mut consensus = None;
        if gate {
            let Some(g) = &ctx.consensus_gateway else {
                record.status = Status::Error;
                record.error = Some("consensus gate needs a gateway".into());
                break;
            };
            let templates = CriticTemplates {
                attribution: &ctx.prompts.attribution,
                critic_b: &ctx.prompts.critic_b,
                critic_c: &ctx.prompts.critic_c,
            };
            match validate_attribution(
                t,
                score.step_index,
                score.crs,
                &iv.proposal.payload,
                feedback,
                g.as_ref(),
                &templates,
                ctx.config.run.tau_c,
                ctx.config.gateway.temperature,
            ) {
                Ok(outcome) => {
                    let keep = outcome.retained;
                    consensus = Some(outcome.score);
                    record.consensus.push(outcome);
                    if !keep {
                        continue;
                    }
                }
                Err(e) => {
                    record.status = Status::Error;
                    record.error = Some(format!("consensus at step {}: {e}", score.step_index));
                    break;
                }
            }
        }
        pending = Some(Pending {
            step_pos: pos,
            minimality,
            consensus,
        });
        break;
    }
    record.scoring = Some(scoring);
    (record, pending)
}

/// Read completed records, dropping a torn final line from an interrupted run.
fn load_records(path: &Path) -> Result<Vec<TraceRecord>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut torn = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<TraceRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}: dropping unreadable record: {e}", path.display());
                torn = true;
            }
        }
    }
    if torn {
        let mut clean = String::new();
        for r in &records {
            clean.push_str(&serde_json::to_string(r).expect("record serializes"));
            clean.push('\n');
        }
        std::fs::write(path, clean).map_err(io_err(path))?;
    }
    Ok(records)
}

fn snapshot_config(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let path = out.join(CONFIG_FILE);
    // worker count does not affect results, so resuming with another is fine
    let mut normalized = config.clone();
    normalized.run.workers = 1;
    if path.exists() {
        let prev = RunConfig::load(&path)?;
        let mut prev_norm = prev.clone();
        prev_norm.run.workers = 1;
        if prev_norm != normalized {
            return Err(PipelineError::ConfigMismatch(out.to_path_buf()));
        }
        return Ok(());
    }
    std::fs::write(&path, config.to_toml()).map_err(io_err(&path))
}

/// Aggregate records of one method into a summary row.
pub fn summarize(
    benchmark: &str,
    method: Method,
    records: &[&TraceRecord],
) -> Result<RunSummary, MetricsError> {
    let total = records.len();
    let passed = records
        .iter()
        .filter(|r| r.status == Status::Passed)
        .count();
    let repaired = records
        .iter()
        .filter(|r| r.status == Status::Repaired)
        .count();
    let minimality: Vec<f64> = records
        .iter()
        .filter(|r| r.status == Status::Repaired)
        .filter_map(|r| {
            r.repair
                .as_ref()
                .map(|p| p.minimality_lexical)
                .or(r.answer_minimality)
        })
        .collect();
    let mean = if minimality.is_empty() {
        1.0
    } else {
        minimality.iter().sum::<f64>() / minimality.len() as f64
    };
    let mut s = RunSummary::from_counts(benchmark, method, total, passed, repaired, mean)?;
    if method == Method::CrsRepair {
        let scorings: Vec<TraceScoring> =
            records.iter().filter_map(|r| r.scoring.clone()).collect();
        s.crs_precision = crs_precision(&scorings, FlagSource::Crs).ok();
        let gates: Vec<&ConsensusOutcome> = records.iter().flat_map(|r| &r.consensus).collect();
        if !gates.is_empty() {
            s.consensus_rate =
                Some(gates.iter().filter(|g| g.retained).count() as f64 / gates.len() as f64);
        }
    }
    Ok(s)
}

/// Run every configured method over the corpus; see the module docs for
/// the output layout.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    run_pipeline_with(config, None)
}

/// [`run_pipeline`] with an injected gateway, which takes precedence over
/// the configured one.
pub fn run_pipeline_with(
    config: &RunConfig,
    gateway: Option<Arc<dyn ChatGateway>>,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let out = config.run.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    snapshot_config(config, &out)?;
    let (traces, faults, rejected_inputs) = load_inputs(config, &out)?;
    let ctx = Context::new(config, &traces, &faults, gateway)?;

    let scores_path = out.join(SCORES_FILE);
    let mut records = load_records(&scores_path)?;
    let done: HashSet<(Method, String)> = records
        .iter()
        .map(|r| (r.method, r.trace_id.clone()))
        .collect();
    let writer = PairWriter::open(out.join(PAIRS_FILE))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.workers)
        .build()
        .map_err(|e| PipelineError::Other(format!("worker pool: {e}")))?;
    let mut scores_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&scores_path)
        .map_err(io_err(&scores_path))?;
    let log_path = out.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let mut methods = config.run.methods.clone();
    methods.sort();
    methods.dedup();
    let mut processed = 0;
    let mut resumed = 0;
    let pairs_before = writer.len();
    let mut proposal_budget = 0u64;
    let batch = config.run.workers * 4;
    for &method in &methods {
        let todo: Vec<&Trace> = traces
            .iter()
            .filter(|t| !done.contains(&(method, t.trace_id.clone())))
            .collect();
        resumed += traces.len() - todo.len();
        if method == Method::CrsRepair {
            let proposer = ctx
                .proposer
                .as_deref()
                .expect("proposer built for scoring runs");
            let per_step = proposer.calls_per_step(config.run.k) as u64;
            for t in &todo {
                let steps = t.len().saturating_sub(1) as u64 * per_step;
                proposal_budget += config.run.budget_cap.map_or(steps, |c| steps.min(c as u64));
            }
        }
        for chunk in todo.chunks(batch.max(1)) {
            let results: Vec<(TraceRecord, Option<Pending>)> =
                pool.install(|| chunk.par_iter().map(|t| process(&ctx, method, t)).collect());
            for (mut record, pending) in results {
                if let (Some(p), Some(scoring)) = (pending, &record.scoring) {
                    let score = &scoring.scores[p.step_pos];
                    let (iv, _) =
                        select_repair(score, config.run.metric).expect("pending repair exists");
                    match emit_pair(
                        &writer,
                        &record.trace_id,
                        score,
                        iv,
                        p.minimality,
                        p.consensus,
                    ) {
                        Ok(pair) => {
                            record.status = Status::Repaired;
                            record.repair = Some(pair);
                        }
                        Err(e) => {
                            record.status = Status::Error;
                            record.error = Some(e.to_string());
                        }
                    }
                }
                let mut line = serde_json::to_string(&record).expect("record serializes");
                line.push('\n');
                scores_file
                    .write_all(line.as_bytes())
                    .and_then(|_| scores_file.flush())
                    .map_err(io_err(&scores_path))?;
                let step = record
                    .repair
                    .as_ref()
                    .map_or_else(String::new, |p| format!(" step={}", p.step_index));
                let err = record
                    .error
                    .as_deref()
                    .map_or_else(String::new, |e| format!(" error={e}"));
                writeln!(
                    log_file,
                    "method={} trace={} status={}{step}{err}",
                    method,
                    record.trace_id,
                    serde_json::to_value(record.status)
                        .expect("status serializes")
                        .as_str()
                        .unwrap_or("?"),
                )
                .map_err(io_err(&log_path))?;
                processed += 1;
                records.push(record);
            }
        }
    }

    let order: BTreeMap<&str, usize> = traces
        .iter()
        .enumerate()
        .map(|(n, t)| (t.trace_id.as_str(), n))
        .collect();
    let mut summaries = Vec::new();
    for &method in &methods {
        let mut rows: Vec<&TraceRecord> = records
            .iter()
            .filter(|r| r.method == method && order.contains_key(r.trace_id.as_str()))
            .collect();
        rows.sort_by_key(|r| order[r.trace_id.as_str()]);
        summaries.push(summarize(&config.run.benchmark, method, &rows)?);
    }
    let errors = records.iter().filter(|r| r.status == Status::Error).count();
    let report = render_report(&summaries, &BTreeMap::new());
    let write = |name: &str, body: &str| -> Result<(), PipelineError> {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(io_err(&p))
    };
    write(
        SUMMARY_FILE,
        &serde_json::to_string_pretty(&summaries).expect("summary serializes"),
    )?;
    write(REPORT_CSV, &report.csv)?;
    write(REPORT_MD, &report.markdown)?;

    let calls =
        |g: &Option<Arc<Metered<Arc<dyn ChatGateway>>>>| g.as_ref().map_or(0, |m| m.calls());
    let proposal_calls = calls(&ctx.proposal_gateway);
    if proposal_calls > proposal_budget {
        return Err(PipelineError::Other(format!(
            "proposal calls {proposal_calls} exceed the budget of {proposal_budget}"
        )));
    }
    let consensus_calls = calls(&ctx.consensus_gateway);
    Ok(RunOutcome {
        output_dir: out,
        summaries,
        processed,
        resumed,
        errors,
        rejected_inputs,
        pairs_written: writer.len() - pairs_before,
        proposal_calls,
        proposal_budget,
        consensus_calls,
        gateway_calls: proposal_calls + consensus_calls + calls(&ctx.gateway),
    })
}
