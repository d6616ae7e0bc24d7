//! `tracefix` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 finished with per-trace failures
//! or rejected inputs, 3 fatal error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tracefix_core::harness::pipeline::SUMMARY_FILE;
use tracefix_core::harness::{
    generate_synthetic_suite, ingest_corpus, run_pipeline, write_corpus, FaultKind, ProposerKind,
    RunConfig, RunOutcome, Stage, SynthSpec,
};
use tracefix_core::metrics::{render_report, wilson_interval, Method, RunSummary};
use tracefix_core::proposal::prompts::PromptVariant;
use tracefix_core::repair::MinimalityMetric;

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_FATAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "tracefix",
    version,
    about = "Find and repair the steps that make agent traces fail"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a fault-injected arithmetic corpus.
    Synth(SynthArgs),
    /// Parse and validate every trace in a corpus directory.
    Validate { corpus: PathBuf },
    /// Score every step of each failed trace.
    Score(RunArgs),
    /// Score, select repairs, gate them and export pairs.
    Repair(RunArgs),
    /// Run the refinement baselines.
    Baseline(RunArgs),
    /// Re-render the report of a finished run.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives `traces/` and `faults.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    min_depth: usize,
    #[arg(long, default_value_t = 9)]
    max_depth: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Comma-separated fault kinds to draw from.
    #[arg(long, value_delimiter = ',', value_parser = parse_fault_kind)]
    faults: Vec<FaultKind>,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Generate a synthetic suite of this many traces instead of reading a corpus.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    min_depth: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<String>,
    /// Comma-separated methods to run instead of the subcommand default.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    no_early_break: bool,
    #[arg(long)]
    stop_after_first: bool,
    #[arg(long)]
    budget_cap: Option<usize>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MinimalityMetric>,
    /// Withhold the gold answer from proposal prompts.
    #[arg(long)]
    no_gold: bool,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    force_consensus: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    stub_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_proposer)]
    proposer: Option<ProposerKind>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory holding `summary.json`.
    run: PathBuf,
    /// Judge audit as `benchmark=correct/audited`, repeatable.
    #[arg(long, value_parser = parse_audit)]
    judge_audit: Vec<(String, usize, usize)>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
}

/// Bad flag values caught after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn parse_fault_kind(s: &str) -> Result<FaultKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown fault kind {s:?} (expected wrong_operand, wrong_operator, dropped_constraint, wrong_tool_arg)")
    })
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
        .map_err(|e: tracefix_core::metrics::MetricsError| e.to_string())
}

fn parse_metric(s: &str) -> Result<MinimalityMetric, String> {
    s.parse()
}

fn parse_proposer(s: &str) -> Result<ProposerKind, String> {
    match s {
        "gateway" => Ok(ProposerKind::Gateway),
        "mutator" => Ok(ProposerKind::Mutator),
        other => Err(format!(
            "unknown proposer {other:?} (expected gateway or mutator)"
        )),
    }
}

fn parse_audit(s: &str) -> Result<(String, usize, usize), String> {
    let bad = || format!("expected benchmark=correct/audited, got {s:?}");
    let (name, frac) = s.split_once('=').ok_or_else(bad)?;
    let (k, n) = frac.split_once('/').ok_or_else(bad)?;
    let k: usize = k.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || k > n {
        return Err(bad());
    }
    Ok((name.trim().to_string(), k, n))
}

/// Merge the config file (if any) with flag overrides.
fn build_config(args: &RunArgs, stage: Stage, default_methods: &[Method]) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let r = &mut c.run;
    r.stage = stage;
    if let Some(p) = &args.corpus {
        r.corpus = Some(p.clone());
        r.synthetic = None;
    }
    if let Some(n) = args.synthetic {
        let mut spec = r.synthetic.clone().unwrap_or_default();
        spec.count = n;
        r.synthetic = Some(spec);
        r.corpus = None;
    }
    if let Some(spec) = r.synthetic.as_mut() {
        if let Some(d) = args.min_depth {
            spec.min_depth = d;
        }
        if let Some(d) = args.max_depth {
            spec.max_depth = d;
        }
    }
    r.methods = if args.methods.is_empty() {
        default_methods.to_vec()
    } else {
        args.methods.clone()
    };
    if let Some(v) = &args.out {
        r.output_dir = v.clone();
    }
    if let Some(v) = &args.benchmark {
        r.benchmark = v.clone();
    }
    if let Some(v) = args.k {
        r.k = v;
    }
    if args.no_early_break {
        r.early_break = false;
    }
    if args.stop_after_first {
        r.stop_after_first_causal_step = true;
    }
    if let Some(v) = args.budget_cap {
        r.budget_cap = Some(v);
    }
    if let Some(v) = args.metric {
        r.metric = v;
    }
    if args.no_gold {
        r.prompt_variant = PromptVariant::NoGold;
    }
    if let Some(v) = args.tau_c {
        r.tau_c = v;
    }
    if args.force_consensus {
        r.force_consensus = true;
    }
    if let Some(v) = args.max_iters {
        r.max_iters = Some(v);
    }
    if let Some(v) = args.seed {
        r.seed = v;
    }
    if let Some(v) = args.workers {
        r.workers = v;
    }
    if let Some(v) = &args.stub_dir {
        r.stub_dir = Some(v.clone());
    }
    if let Some(v) = args.proposer {
        r.proposer = v;
    }
    c.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(c)
}

fn print_outcome(out: &RunOutcome) {
    println!(
        "{} processed, {} resumed, {} errors, {} rejected inputs, {} new pairs, {} gateway calls",
        out.processed,
        out.resumed,
        out.errors,
        out.rejected_inputs,
        out.pairs_written,
        out.gateway_calls
    );
    for s in &out.summaries {
        println!(
            "{} {}: {}/{} failed traces repaired ({:.1}%), accuracy {:.3} -> {:.3}",
            s.benchmark,
            s.method,
            s.repaired,
            s.failed,
            s.repair_rate * 100.0,
            s.accuracy_before,
            s.accuracy_after
        );
    }
    println!("results in {}", out.output_dir.display());
}

fn run(config: &RunConfig) -> Result<u8> {
    let out = run_pipeline(config)?;
    print_outcome(&out);
    Ok(if out.is_partial() { EXIT_PARTIAL } else { 0 })
}

fn synth(args: &SynthArgs) -> Result<u8> {
    let spec = SynthSpec {
        count: args.count,
        min_depth: args.min_depth,
        max_depth: args.max_depth,
        fault_mix: if args.faults.is_empty() {
            FaultKind::ALL.to_vec()
        } else {
            args.faults.clone()
        },
        seed: args.seed,
    };
    let (traces, faults) = generate_synthetic_suite(&spec)?;
    write_corpus(&args.out, &traces, &faults)?;
    println!("wrote {} traces to {}", traces.len(), args.out.display());
    Ok(0)
}

fn validate(corpus: &Path) -> Result<u8> {
    let c = ingest_corpus(corpus)?;
    for (kind, idx) in c.by_kind() {
        println!("{kind:?}: {} traces", idx.len());
    }
    for r in &c.rejected {
        println!("invalid {}: {}", r.path.display(), r.reason);
    }
    println!("{} valid, {} invalid", c.len(), c.rejected.len());
    Ok(if c.rejected.is_empty() {
        0
    } else {
        EXIT_PARTIAL
    })
}

fn report(args: &ReportArgs) -> Result<u8> {
    let path = args.run.join(SUMMARY_FILE);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summaries: Vec<RunSummary> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut judge = BTreeMap::new();
    for (bench, k, n) in &args.judge_audit {
        if !summaries.iter().any(|s| &s.benchmark == bench) {
            bail!("no benchmark named {bench:?} in {}", path.display());
        }
        let (lo, hi) = wilson_interval(*k, *n, args.confidence).map_err(|e| anyhow!(e))?;
        println!(
            "{bench} judge precision {k}/{n} = {:.1}% [{:.1}%, {:.1}%] at {:.0}% confidence",
            *k as f64 / *n as f64 * 100.0,
            lo * 100.0,
            hi * 100.0,
            args.confidence * 100.0
        );
        judge.insert(bench.clone(), *k as f64 / *n as f64);
    }
    let r = render_report(&summaries, &judge);
    std::fs::write(args.run.join("report.csv"), &r.csv)?;
    std::fs::write(args.run.join("report.md"), &r.markdown)?;
    print!("{}", r.markdown);
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Validate { corpus } => validate(&corpus),
        Command::Score(a) => run(&build_config(&a, Stage::Score, &[Method::CrsRepair])?),
        Command::Repair(a) => run(&build_config(&a, Stage::Repair, &[Method::CrsRepair])?),
        Command::Baseline(a) => {
            if a.methods.contains(&Method::CrsRepair) {
                return Err(Usage(
                    "crs_repair is not a baseline; use the repair subcommand".into(),
                )
                .into());
            }
            run(&build_config(
                &a,
                Stage::Repair,
                &[Method::Direct, Method::SelfRefine, Method::SelfReflection],
            )?)
        }
        Command::Report(a) => report(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.is::<Usage>() {
                EXIT_USAGE
            } else {
                EXIT_FATAL
            };
            ExitCode::from(code)
        }
    }
}
