//! Evaluation quantities and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::crs::TraceScoring;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    SelfRefine,
    SelfReflection,
    CrsRepair,
}

impl Method {
    /// Fixed row order in reports.
    pub const ORDER: [Method; 4] = [
        Method::Direct,
        Method::SelfRefine,
        Method::SelfReflection,
        Method::CrsRepair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::SelfRefine => "self_refine",
            Method::SelfReflection => "self_reflection",
            Method::CrsRepair => "crs_repair",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Direct => "Direct",
            Method::SelfRefine => "Self-Refine",
            Method::SelfReflection => "Self-Reflection",
            Method::CrsRepair => "CRS Repair",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, MetricsError> {
        Method::ORDER
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MetricsError::Parse(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("repair rate needs at least one failed trace")]
    NoFailures,
    #[error("accuracy needs a non-empty set")]
    ZeroTotal,
    #[error("inconsistent counts: {0}")]
    Inconsistent(String),
    #[error("no flagged steps")]
    NoFlags,
    #[error("interval needs n >= 1")]
    ZeroTrials,
    #[error("confidence must be in (0, 1)")]
    Confidence,
    #[error("cannot parse report: {0}")]
    Parse(String),
}

/// Share of failed traces that were repaired.
pub fn repair_rate(failed: usize, repaired: usize) -> Result<f64, MetricsError> {
    if failed == 0 {
        return Err(MetricsError::NoFailures);
    }
    if repaired > failed {
        return Err(MetricsError::Inconsistent(format!(
            "repaired {repaired} > failed {failed}"
        )));
    }
    Ok(repaired as f64 / failed as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDelta {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

/// Accuracy before and after counting repaired traces as passing.
pub fn accuracy_delta(
    total: usize,
    passed: usize,
    repaired: usize,
) -> Result<AccuracyDelta, MetricsError> {
    if total == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    if passed + repaired > total {
        return Err(MetricsError::Inconsistent(format!(
            "passed {passed} + repaired {repaired} > total {total}"
        )));
    }
    let before = passed as f64 / total as f64;
    let after = (passed + repaired) as f64 / total as f64;
    Ok(AccuracyDelta {
        before,
        after,
        delta: after - before,
    })
}

/// Where the set of flagged steps comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagSource {
    /// Steps with crs = 1. Every such step has a validated flip, so the
    /// precision is 1 by construction.
    Crs,
    /// Steps named in `TraceScoring::attribution_flags`.
    AttributionPrompt,
}

/// Flagged steps with at least one validated outcome-flipping intervention,
/// over all flagged steps.
pub fn crs_precision(scorings: &[TraceScoring], source: FlagSource) -> Result<f64, MetricsError> {
    let mut flagged = 0usize;
    let mut validated = 0usize;
    for sc in scorings {
        let steps: Vec<usize> = match source {
            FlagSource::Crs => sc.causal_steps(),
            FlagSource::AttributionPrompt => sc.attribution_flags.clone(),
        };
        for i in steps {
            flagged += 1;
            let ok = sc
                .scores
                .iter()
                .find(|s| s.step_index == i)
                .is_some_and(|s| {
                    s.successful_interventions
                        .iter()
                        .any(|iv| iv.verdict.success)
                });
            validated += usize::from(ok);
        }
    }
    if flagged == 0 {
        return Err(MetricsError::NoFlags);
    }
    Ok(validated as f64 / flagged as f64)
}

/// Wilson score interval for `successes` out of `n` at `confidence`.
pub fn wilson_interval(
    successes: usize,
    n: usize,
    confidence: f64,
) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroTrials);
    }
    if successes > n {
        return Err(MetricsError::Inconsistent(format!(
            "successes {successes} > n {n}"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(MetricsError::Confidence);
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let low = if successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let high = if successes == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    Ok((low, high))
}

/// Repair rate discounted by the measured precision of a model judge.
pub fn adjusted_rate(rate: f64, judge_precision: f64) -> f64 {
    rate * judge_precision
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub benchmark: String,
    pub method: Method,
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub repaired: usize,
    pub repair_rate: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub delta: f64,
    /// Mean lexical minimality of emitted repairs; 1 when nothing changed.
    pub minimality_mean: f64,
    pub crs_precision: Option<f64>,
    pub consensus_rate: Option<f64>,
}

impl RunSummary {
    pub fn from_counts(
        benchmark: &str,
        method: Method,
        total: usize,
        passed: usize,
        repaired: usize,
        minimality_mean: f64,
    ) -> Result<Self, MetricsError> {
        if passed > total {
            return Err(MetricsError::Inconsistent(format!(
                "passed {passed} > total {total}"
            )));
        }
        let failed = total - passed;
        let rate = if failed == 0 {
            0.0
        } else {
            repair_rate(failed, repaired)?
        };
        let acc = accuracy_delta(total, passed, repaired)?;
        Ok(Self {
            benchmark: benchmark.to_string(),
            method,
            total,
            passed,
            failed,
            repaired,
            repair_rate: rate,
            accuracy_before: acc.before,
            accuracy_after: acc.after,
            delta: acc.delta,
            minimality_mean,
            crs_precision: None,
            consensus_rate: None,
        })
    }
}

pub const ABSENT: &str = "—";

const CSV_HEADER: [&str; 13] = [
    "benchmark",
    "method",
    "total",
    "passed",
    "failed",
    "repaired",
    "repair_rate",
    "minimality_mean",
    "accuracy_before",
    "accuracy_after",
    "delta",
    "crs_precision",
    "consensus_rate",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub csv: String,
    pub markdown: String,
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| x.to_string())
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{:.1}", x * 100.0))
}

fn sorted(summaries: &[RunSummary]) -> Vec<(String, Vec<&RunSummary>)> {
    let mut benchmarks: Vec<String> = Vec::new();
    for s in summaries {
        if !benchmarks.contains(&s.benchmark) {
            benchmarks.push(s.benchmark.clone());
        }
    }
    benchmarks
        .into_iter()
        .map(|b| {
            let mut rows: Vec<&RunSummary> =
                summaries.iter().filter(|s| s.benchmark == b).collect();
            rows.sort_by_key(|s| s.method);
            (b, rows)
        })
        .collect()
}

/// Render a CSV data table and a markdown table per benchmark.
///
/// `judge_precision` maps benchmark names to a judge precision; benchmarks
/// present there get an extra adjusted-rate column in the markdown.
pub fn render_report(summaries: &[RunSummary], judge_precision: &BTreeMap<String, f64>) -> Report {
    let groups = sorted(summaries);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for (_, rows) in &groups {
        for s in rows {
            w.write_record([
                s.benchmark.clone(),
                s.method.to_string(),
                s.total.to_string(),
                s.passed.to_string(),
                s.failed.to_string(),
                s.repaired.to_string(),
                s.repair_rate.to_string(),
                s.minimality_mean.to_string(),
                s.accuracy_before.to_string(),
                s.accuracy_after.to_string(),
                s.delta.to_string(),
                opt_num(s.crs_precision),
                opt_num(s.consensus_rate),
            ])
            .expect("in-memory write");
        }
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");

    let mut md = String::new();
    for (n, (bench, rows)) in groups.iter().enumerate() {
        if n > 0 {
            md.push('\n');
        }
        let judge = judge_precision.get(bench);
        let _ = writeln!(md, "### {bench}\n");
        md.push_str("| Method | Total | Pass | Fail | Repairs (%) | Min. | Before | After | Δ | CRS Prec. | Consensus |");
        if judge.is_some() {
            md.push_str(" Adjusted (%) |");
        }
        md.push('\n');
        md.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
        if judge.is_some() {
            md.push_str("---:|");
        }
        md.push('\n');
        for s in rows {
            let _ = write!(
                md,
                "| {} | {} | {} | {} | {} ({:.1}) | {:.2} | {:.3} | {:.3} | {:+.3} | {} | {} |",
                s.method.label(),
                s.total,
                s.passed,
                s.failed,
                s.repaired,
                s.repair_rate * 100.0,
                s.minimality_mean,
                s.accuracy_before,
                s.accuracy_after,
                s.delta,
                opt_pct(s.crs_precision),
                opt_pct(s.consensus_rate),
            );
            if let Some(p) = judge {
                let _ = write!(md, " {:.1} |", adjusted_rate(s.repair_rate, *p) * 100.0);
            }
            md.push('\n');
        }
    }
    Report { csv, markdown: md }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, MetricsError> {
    let raw = rec
        .get(i)
        .ok_or_else(|| MetricsError::Parse(format!("missing column {}", CSV_HEADER[i])))?;
    raw.parse()
        .map_err(|_| MetricsError::Parse(format!("bad {} value {raw:?}", CSV_HEADER[i])))
}

fn opt_field(rec: &csv::StringRecord, i: usize) -> Result<Option<f64>, MetricsError> {
    match rec.get(i) {
        Some(ABSENT) => Ok(None),
        _ => field(rec, i).map(Some),
    }
}

/// Parse the CSV produced by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<RunSummary>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| MetricsError::Parse(e.to_string()))?
        .clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(MetricsError::Parse("unexpected header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| MetricsError::Parse(e.to_string()))?;
        out.push(RunSummary {
            benchmark: field(&rec, 0)?,
            method: rec.get(1).unwrap_or_default().parse()?,
            total: field(&rec, 2)?,
            passed: field(&rec, 3)?,
            failed: field(&rec, 4)?,
            repaired: field(&rec, 5)?,
            repair_rate: field(&rec, 6)?,
            minimality_mean: field(&rec, 7)?,
            accuracy_before: field(&rec, 8)?,
            accuracy_after: field(&rec, 9)?,
            delta: field(&rec, 10)?,
            crs_precision: opt_field(&rec, 11)?,
            consensus_rate: opt_field(&rec, 12)?,
        });
    }
    Ok(out)
}

/// A row of published reference results: raw counts and the rates printed
/// next to them.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct PublishedRow {
    pub benchmark: String,
    pub method: Method,
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub repaired: usize,
    pub repair_pct: f64,
    pub minimality: f64,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

/// The bundled reference-results fixture.
pub const PUBLISHED_TABLES: &str = include_str!("../fixtures/published_tables.csv");

/// Parse a reference-results CSV (lines starting with `#` are comments).
pub fn parse_published(text: &str) -> Result<Vec<PublishedRow>, MetricsError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| MetricsError::Parse(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repair_rate_examples() {
        assert!((repair_rate(330, 173).unwrap() - 0.5242).abs() < 1e-4);
        assert!((repair_rate(1299, 555).unwrap() - 0.4272).abs() < 1e-4);
        assert_eq!(repair_rate(10, 0).unwrap(), 0.0);
        assert_eq!(repair_rate(0, 0), Err(MetricsError::NoFailures));
    }

    #[test]
    fn accuracy_examples() {
        let a = accuracy_delta(1319, 989, 173).unwrap();
        assert!((a.before - 0.7498).abs() < 1e-4);
        assert!((a.after - 0.8809).abs() < 1e-4);
        assert!((a.delta - 0.1311).abs() < 1e-4);
        let a = accuracy_delta(484, 149, 149).unwrap();
        assert!((a.delta - 0.3078).abs() < 1e-4);
        assert_eq!(accuracy_delta(10, 4, 0).unwrap().delta, 0.0);
        assert_eq!(accuracy_delta(0, 0, 0), Err(MetricsError::ZeroTotal));
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(20, 22, 0.95).unwrap();
        assert!(
            (lo - 0.722).abs() < 0.002 && (hi - 0.975).abs() < 0.002,
            "{lo} {hi}"
        );
        let (lo, hi) = wilson_interval(25, 29, 0.95).unwrap();
        assert!(
            (lo - 0.694).abs() < 0.002 && (hi - 0.945).abs() < 0.002,
            "{lo} {hi}"
        );
        assert_eq!(wilson_interval(0, 10, 0.95).unwrap().0, 0.0);
        assert_eq!(wilson_interval(10, 10, 0.95).unwrap().1, 1.0);
        assert_eq!(wilson_interval(0, 0, 0.95), Err(MetricsError::ZeroTrials));
    }

    #[test]
    fn adjusted() {
        assert!((adjusted_rate(0.524, 0.909) - 0.476316).abs() < 1e-9);
    }

    fn summary(method: Method) -> RunSummary {
        RunSummary::from_counts("gsm", method, 1319, 989, 173, 0.87).unwrap()
    }

    #[test]
    fn single_row_has_every_column() {
        let r = render_report(&[summary(Method::CrsRepair)], &BTreeMap::new());
        let row = r
            .markdown
            .lines()
            .find(|l| l.starts_with("| CRS Repair"))
            .unwrap();
        assert_eq!(row, "| CRS Repair | 1319 | 989 | 330 | 173 (52.4) | 0.87 | 0.750 | 0.881 | +0.131 | — | — |");
        assert_eq!(r.csv.lines().count(), 2);
    }

    #[test]
    fn absent_precision_renders_dash() {
        let mut s = summary(Method::CrsRepair);
        s.consensus_rate = Some(0.9);
        let r = render_report(&[s], &BTreeMap::new());
        assert!(r.csv.contains(",—,0.9"));
        assert!(r.markdown.contains("| — | 90.0 |"));
    }

    #[test]
    fn rows_follow_method_order() {
        let r = render_report(
            &[
                summary(Method::CrsRepair),
                summary(Method::Direct),
                summary(Method::SelfRefine),
            ],
            &BTreeMap::new(),
        );
        let methods: Vec<&str> = r
            .csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(methods, vec!["direct", "self_refine", "crs_repair"]);
    }

    #[test]
    fn csv_round_trips() {
        let mut a = summary(Method::CrsRepair);
        a.crs_precision = Some(0.72);
        let mut b =
            RunSummary::from_counts("med, browse", Method::Direct, 484, 170, 0, 1.0).unwrap();
        b.consensus_rate = Some(1.0 / 3.0);
        let input = vec![a, b];
        let r = render_report(&input, &BTreeMap::new());
        let back = parse_report_csv(&r.csv).unwrap();
        assert_eq!(back, input);
    }

    #[test]
    fn judge_column() {
        let mut jp = BTreeMap::new();
        jp.insert("gsm".to_string(), 0.5);
        let r = render_report(&[summary(Method::CrsRepair)], &jp);
        assert!(r.markdown.contains("Adjusted (%)"));
        assert!(r.markdown.trim_end().ends_with("| 26.2 |"));
    }

    #[test]
    fn bundled_fixture_parses() {
        let rows = parse_published(PUBLISHED_TABLES).unwrap();
        assert_eq!(rows.len(), 16);
    }
}
