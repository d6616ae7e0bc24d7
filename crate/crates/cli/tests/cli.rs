//! Black-box tests of the `tracefix` binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use tracefix_core::harness::{generate_synthetic_suite, SynthSpec};
use tracefix_core::proposal::gateway::{ChatRequest, StubRecord};
use tracefix_core::proposal::prompts::PromptSet;

fn tracefix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracefix"))
        .args(args)
        .env_remove("GATEWAY_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).map_or(0, |t| t.lines().filter(|l| !l.trim().is_empty()).count())
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&tracefix(&["--help"])), 0);
    assert_eq!(code(&tracefix(&["--version"])), 0);
    assert_eq!(code(&tracefix(&[])), 1);
    assert_eq!(
        code(&tracefix(&[
            "repair",
            "--metric",
            "cosine",
            "--synthetic",
            "3"
        ])),
        1
    );
    assert_eq!(
        code(&tracefix(&["repair", "--k", "0", "--synthetic", "3"])),
        1
    );
    assert_eq!(
        code(&tracefix(&[
            "baseline",
            "--methods",
            "crs_repair",
            "--synthetic",
            "3"
        ])),
        1
    );
}

#[test]
fn synth_then_validate() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("c");
    let o = tracefix(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--count",
        "12",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&corpus.join("faults.jsonl")), 12);
    let o = tracefix(&["validate", corpus.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("12 valid, 0 invalid"));

    std::fs::write(corpus.join("traces/zz-broken.json"), "{").unwrap();
    let o = tracefix(&["validate", corpus.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("zz-broken.json"));
}

#[test]
fn missing_corpus_is_fatal() {
    let d = tempfile::tempdir().unwrap();
    let o = tracefix(&[
        "repair",
        "--corpus",
        d.path().join("nope").to_str().unwrap(),
        "--out",
        d.path().join("run").to_str().unwrap(),
        "--proposer",
        "mutator",
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn offline_repair_run_and_resume() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("c");
    let run = d.path().join("run");
    assert_eq!(
        code(&tracefix(&[
            "synth",
            "--out",
            corpus.to_str().unwrap(),
            "--count",
            "8"
        ])),
        0
    );
    let args = [
        "repair",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--proposer",
        "mutator",
        "--workers",
        "2",
    ];
    let o = tracefix(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&run.join("pairs.jsonl")), 8);
    assert_eq!(lines(&run.join("scores.jsonl")), 8);
    assert!(run.join("config.toml").exists());

    let again = tracefix(&args);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).starts_with("0 processed, 8 resumed"));
    assert_eq!(lines(&run.join("pairs.jsonl")), 8);
}

#[test]
fn score_stage_writes_no_pairs() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    let o = tracefix(&[
        "score",
        "--synthetic",
        "5",
        "--out",
        run.to_str().unwrap(),
        "--proposer",
        "mutator",
        "--no-early-break",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&run.join("pairs.jsonl")), 0);
    assert!(std::fs::read_to_string(run.join("scores.jsonl"))
        .unwrap()
        .contains("\"status\":\"scored\""));
}

#[test]
fn direct_baseline_repairs_nothing() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    let o = tracefix(&[
        "baseline",
        "--methods",
        "direct",
        "--synthetic",
        "6",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&run.join("pairs.jsonl")), 0);
    assert!(stdout(&o).contains("direct: 0/6 failed traces repaired (0.0%)"));
}

#[test]
fn self_refine_from_stub_directory() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    let stubs = d.path().join("stubs");
    std::fs::create_dir_all(&stubs).unwrap();
    let (traces, _) = generate_synthetic_suite(&SynthSpec {
        count: 3,
        seed: 7,
        ..SynthSpec::default()
    })
    .unwrap();
    let prompts = PromptSet::default();
    let mut jsonl = String::new();
    let mut record = |template: &tracefix_core::proposal::prompts::Template,
                      vars: &[(&'static str, &str)],
                      reply: &str| {
        let vars: BTreeMap<&str, String> = vars.iter().map(|(k, v)| (*k, v.to_string())).collect();
        let req = ChatRequest::new(template.render(&vars).unwrap(), 0.0, 0);
        let mut rec = StubRecord::for_request(&req, reply);
        rec.sample_index = None;
        jsonl.push_str(&serde_json::to_string(&rec).unwrap());
        jsonl.push('\n');
    };
    // the first two traces get a correct solution, the third stays wrong
    for (n, t) in traces.iter().enumerate() {
        let p = t.task.problem_statement.as_str();
        let answer = if n < 2 {
            t.task.gold_answer.clone().unwrap()
        } else {
            "1".into()
        };
        let solution = format!("Working through the updates gives {answer}.");
        record(&prompts.refine_generate, &[("problem", p)], &solution);
        record(
            &prompts.refine_feedback,
            &[("problem", p), ("solution", &solution)],
            "Looks right.\n[STOP]",
        );
    }
    std::fs::write(stubs.join("refine.jsonl"), jsonl).unwrap();
    let o = tracefix(&[
        "baseline",
        "--methods",
        "self_refine",
        "--synthetic",
        "3",
        "--seed",
        "7",
        "--out",
        run.to_str().unwrap(),
        "--stub-dir",
        stubs.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&o),
        0,
        "{}{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(
        stdout(&o).contains("self_refine: 2/3 failed traces repaired"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn missing_stub_is_a_partial_failure() {
    let d = tempfile::tempdir().unwrap();
    let stubs = d.path().join("stubs");
    std::fs::create_dir_all(&stubs).unwrap();
    let run = d.path().join("run");
    let o = tracefix(&[
        "baseline",
        "--methods",
        "self_refine",
        "--synthetic",
        "2",
        "--out",
        run.to_str().unwrap(),
        "--stub-dir",
        stubs.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(lines(&run.join("scores.jsonl")), 2);
}

#[test]
fn report_with_judge_audit() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    let o = tracefix(&[
        "repair",
        "--synthetic",
        "4",
        "--proposer",
        "mutator",
        "--benchmark",
        "arith",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let o = tracefix(&[
        "report",
        run.to_str().unwrap(),
        "--judge-audit",
        "arith=20/22",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("[72.2%, 97.5%]"), "{out}");
    assert!(out.contains("Adjusted"));
    assert_eq!(
        code(&tracefix(&[
            "report",
            run.to_str().unwrap(),
            "--judge-audit",
            "other=1/2"
        ])),
        3
    );
    assert_eq!(
        code(&tracefix(&[
            "report",
            run.to_str().unwrap(),
            "--judge-audit",
            "arith=3/2"
        ])),
        1
    );
}
