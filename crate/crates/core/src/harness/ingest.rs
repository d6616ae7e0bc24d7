//! Loading a directory of trace documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trace::{parse_trace, validate_trace, Trace, VerifierKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Rejected {
    pub path: PathBuf,
    pub reason: String,
}

/// Valid traces in file-name order, plus every rejected file.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub traces: Vec<(PathBuf, Trace)>,
    pub rejected: Vec<Rejected>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Trace indices grouped by verifier kind, for routing to executors.
    pub fn by_kind(&self) -> BTreeMap<VerifierKind, Vec<usize>> {
        let mut groups: BTreeMap<VerifierKind, Vec<usize>> = BTreeMap::new();
        for (n, (_, t)) in self.traces.iter().enumerate() {
            groups.entry(t.task.verifier_kind).or_default().push(n);
        }
        groups
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corpus {0} contains no trace documents")]
    Empty(PathBuf),
}

/// Parse and validate every `*.json` file directly under `dir`.
///
/// A `traces/` subdirectory is used instead when present, which is the
/// layout written by the synthetic generator.
pub fn ingest_corpus(dir: &Path) -> Result<Corpus, IngestError> {
    let root = if dir.join("traces").is_dir() {
        dir.join("traces")
    } else {
        dir.to_path_buf()
    };
    let io = |source| IngestError::Io {
        path: root.clone(),
        source,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    if files.is_empty() {
        return Err(IngestError::Empty(root));
    }
    files.sort();
    let mut corpus = Corpus::default();
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in files {
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                corpus.rejected.push(Rejected {
                    path,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let reason = match parse_trace(&bytes) {
            Err(e) => Some(e.to_string()),
            Ok(t) => {
                let violations = validate_trace(&t);
                if !violations.is_empty() {
                    let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                    Some(list.join("; "))
                } else if let Some(first) = seen.get(&t.trace_id) {
                    Some(format!(
                        "duplicate trace_id {} (first in {})",
                        t.trace_id,
                        first.display()
                    ))
                } else {
                    seen.insert(t.trace_id.clone(), path.clone());
                    corpus.traces.push((path.clone(), t));
                    None
                }
            }
        };
        if let Some(reason) = reason {
            log::warn!("skipping {}: {reason}", path.display());
            corpus.rejected.push(Rejected { path, reason });
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{serialize_trace, Step, StepType, TaskSpec, VerifierConfig};

    fn trace(id: &str, kind: VerifierKind) -> Trace {
        Trace {
            trace_id: id.into(),
            task: TaskSpec {
                problem_statement: "p".into(),
                gold_answer: Some("1".into()),
                verifier_kind: kind,
                verifier_config: VerifierConfig::default(),
            },
            steps: vec![
                Step::new(0, StepType::Reasoning, "think"),
                Step::new(1, StepType::FinalAnswer, "1").with_deps([0]),
            ],
        }
    }

    fn write(dir: &Path, t: &Trace) {
        std::fs::write(dir.join(format!("{}.json", t.trace_id)), serialize_trace(t)).unwrap();
    }

    #[test]
    fn ten_valid() {
        let d = tempfile::tempdir().unwrap();
        for n in 0..10 {
            write(d.path(), &trace(&format!("t{n}"), VerifierKind::Numeric));
        }
        let c = ingest_corpus(d.path()).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.rejected.is_empty());
    }

    #[test]
    fn malformed_file_is_reported() {
        let d = tempfile::tempdir().unwrap();
        for n in 0..9 {
            write(d.path(), &trace(&format!("t{n}"), VerifierKind::Numeric));
        }
        std::fs::write(d.path().join("broken.json"), "{\"trace_id\": ").unwrap();
        std::fs::write(d.path().join("notes.txt"), "ignored").unwrap();
        let c = ingest_corpus(d.path()).unwrap();
        assert_eq!(c.len(), 9);
        assert_eq!(c.rejected.len(), 1);
        assert!(c.rejected[0].path.ends_with("broken.json"));
    }

    #[test]
    fn invalid_and_duplicate_traces_are_excluded() {
        let d = tempfile::tempdir().unwrap();
        let mut bad = trace("bad", VerifierKind::Numeric);
        bad.steps[1].deps = vec![5];
        write(d.path(), &bad);
        write(d.path(), &trace("a", VerifierKind::Numeric));
        std::fs::write(
            d.path().join("z.json"),
            serialize_trace(&trace("a", VerifierKind::Numeric)),
        )
        .unwrap();
        let c = ingest_corpus(d.path()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.rejected.len(), 2);
        assert!(c.rejected.iter().any(|r| r.reason.contains("duplicate")));
    }

    #[test]
    fn grouped_by_kind() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), &trace("a", VerifierKind::Numeric));
        write(d.path(), &trace("b", VerifierKind::Predictive));
        write(d.path(), &trace("c", VerifierKind::Numeric));
        let c = ingest_corpus(d.path()).unwrap();
        let g = c.by_kind();
        assert_eq!(g[&VerifierKind::Numeric], vec![0, 2]);
        assert_eq!(g[&VerifierKind::Predictive], vec![1]);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_corpus(d.path()),
            Err(IngestError::Empty(_))
        ));
        assert!(ingest_corpus(&d.path().join("missing")).is_err());
    }
}
