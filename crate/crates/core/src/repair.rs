//! Minimality scoring, repair selection and contrastive-pair export.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::crs::{Intervention, StepScore};
use crate::execution::VerdictMode;

/// NFC-normalize, then split on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    normalized.split_whitespace().map(str::to_string).collect()
}

/// Position-wise match ratio with a length penalty:
/// `(m / L) * (1 - |len(x) - len(y)| / (2L))`, `L = max(len)`, `m` the
/// number of equal tokens at the same index. Two empty sequences score 1.
pub fn minimality_lexical<T: PartialEq>(x: &[T], y: &[T]) -> f64 {
    let l = x.len().max(y.len());
    if l == 0 {
        return 1.0;
    }
    let m = x.iter().zip(y).filter(|(a, b)| a == b).count();
    let l = l as f64;
    let gap = x.len().abs_diff(y.len()) as f64;
    (m as f64 / l) * (1.0 - 0.5 * gap / l)
}

/// Token-level Levenshtein distance.
pub fn levenshtein<T: PartialEq>(x: &[T], y: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=y.len()).collect();
    let mut cur = vec![0; y.len() + 1];
    for (i, a) in x.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in y.iter().enumerate() {
            let sub = prev[j] + usize::from(a != b);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

/// `1 - levenshtein / max(len)`; two empty sequences score 1.
pub fn minimality_edit<T: PartialEq>(x: &[T], y: &[T]) -> f64 {
    let l = x.len().max(y.len());
    if l == 0 {
        return 1.0;
    }
    1.0 - levenshtein(x, y) as f64 / l as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimalityMetric {
    #[default]
    Lexical,
    Edit,
}

impl std::str::FromStr for MinimalityMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lexical" => Ok(Self::Lexical),
            "edit" => Ok(Self::Edit),
            other => Err(format!(
                "unknown minimality metric {other:?} (expected lexical or edit)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalityScore {
    pub lexical: f64,
    pub edit: f64,
    pub tokens_original: usize,
    pub tokens_repair: usize,
}

impl MinimalityScore {
    pub fn between(original: &str, repair: &str) -> Self {
        let x = tokenize(original);
        let y = tokenize(repair);
        Self {
            lexical: minimality_lexical(&x, &y),
            edit: minimality_edit(&x, &y),
            tokens_original: x.len(),
            tokens_repair: y.len(),
        }
    }

    pub fn get(&self, metric: MinimalityMetric) -> f64 {
        match metric {
            MinimalityMetric::Lexical => self.lexical,
            MinimalityMetric::Edit => self.edit,
        }
    }
}

/// Argmax of `key(primary)` over candidates, ties broken by the other
/// metric, then by lower sample index.
pub fn select_by<'a, F>(
    candidates: &'a [Intervention],
    original: &str,
    metric: MinimalityMetric,
    key: F,
) -> Option<(&'a Intervention, MinimalityScore)>
where
    F: Fn(f64) -> f64,
{
    let other = match metric {
        MinimalityMetric::Lexical => MinimalityMetric::Edit,
        MinimalityMetric::Edit => MinimalityMetric::Lexical,
    };
    let mut best: Option<(&Intervention, MinimalityScore)> = None;
    for c in candidates {
        let s = MinimalityScore::between(original, &c.proposal.payload);
        let better = match &best {
            None => true,
            Some((b, bs)) => {
                let (kp, bp) = (key(s.get(metric)), key(bs.get(metric)));
                let (ko, bo) = (s.get(other), bs.get(other));
                kp > bp
                    || (kp == bp && ko > bo)
                    || (kp == bp && ko == bo && c.proposal.sample_index < b.proposal.sample_index)
            }
        };
        if better {
            best = Some((c, s));
        }
    }
    best
}

/// The successful intervention closest to the original step.
pub fn select_repair(
    score: &StepScore,
    metric: MinimalityMetric,
) -> Option<(&Intervention, MinimalityScore)> {
    select_by(
        &score.successful_interventions,
        &score.original_payload,
        metric,
        |v| v,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub trace_id: String,
    pub step_index: usize,
    pub wrong: String,
    pub repaired: String,
    pub minimality_lexical: f64,
    pub minimality_edit: f64,
    pub consensus: Option<f64>,
    pub verifier_mode: VerdictMode,
}

impl ContrastivePair {
    pub fn new(
        trace_id: &str,
        step_index: usize,
        wrong: &str,
        repaired: &str,
        minimality: MinimalityScore,
        consensus: Option<f64>,
        verifier_mode: VerdictMode,
    ) -> Self {
        Self {
            trace_id: trace_id.to_string(),
            step_index,
            wrong: wrong.to_string(),
            repaired: repaired.to_string(),
            minimality_lexical: minimality.lexical,
            minimality_edit: minimality.edit,
            consensus,
            verifier_mode,
        }
    }

    fn key(&self) -> (String, usize, String) {
        (
            self.trace_id.clone(),
            self.step_index,
            self.repaired.clone(),
        )
    }
}

#[derive(Debug, Error)]
pub enum PairError {
    #[error("pairs file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("pairs file {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("refusing to emit a pair whose repaired trace did not pass")]
    NotVerified,
}

struct WriterState {
    file: File,
    seen: HashSet<(String, usize, String)>,
}

/// Append-only JSONL writer, idempotent per (trace, step, repaired payload).
pub struct PairWriter {
    path: PathBuf,
    state: Mutex<WriterState>,
}

impl PairWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PairError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| PairError::Io {
            path: path.clone(),
            source,
        };
        let mut seen = HashSet::new();
        if path.exists() {
            let f = File::open(&path).map_err(io)?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let p: ContrastivePair =
                    serde_json::from_str(&line).map_err(|source| PairError::Corrupt {
                        path: path.clone(),
                        line: n + 1,
                        source,
                    })?;
                seen.insert(p.key());
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        Ok(Self {
            path,
            state: Mutex::new(WriterState { file, seen }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Distinct pairs in the file, including ones from earlier runs.
    pub fn len(&self) -> usize {
        self.state.lock().unwrap().seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append `pair` unless an identical record exists; returns whether it
    /// was written.
    pub fn append(&self, pair: &ContrastivePair) -> Result<bool, PairError> {
        let mut st = self.state.lock().unwrap();
        if st.seen.contains(&pair.key()) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(pair).expect("pair serializes");
        line.push('\n');
        // one write call per record keeps lines whole
        st.file
            .write_all(line.as_bytes())
            .map_err(|source| PairError::Io {
                path: self.path.clone(),
                source,
            })?;
        st.file.flush().map_err(|source| PairError::Io {
            path: self.path.clone(),
            source,
        })?;
        st.seen.insert(pair.key());
        Ok(true)
    }
}

/// Build the pair for a selected repair and append it.
pub fn emit_pair(
    writer: &PairWriter,
    trace_id: &str,
    score: &StepScore,
    repair: &Intervention,
    minimality: MinimalityScore,
    consensus: Option<f64>,
) -> Result<ContrastivePair, PairError> {
    if !repair.verdict.success {
        return Err(PairError::NotVerified);
    }
    let pair = ContrastivePair::new(
        trace_id,
        score.step_index,
        &score.original_payload,
        &repair.proposal.payload,
        minimality,
        consensus,
        repair.verdict.mode,
    );
    writer.append(&pair)?;
    Ok(pair)
}

/// Read every pair from a JSONL file.
pub fn read_pairs(path: &Path) -> Result<Vec<ContrastivePair>, PairError> {
    let text = std::fs::read_to_string(path).map_err(|source| PairError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|source| PairError::Corrupt {
                path: path.to_path_buf(),
                line: n + 1,
                source,
            })
        })
        .collect()
}
