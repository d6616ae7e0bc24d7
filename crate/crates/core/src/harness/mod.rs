//! Run configuration, synthetic suites, corpus loading and orchestration.

pub mod config;
pub mod ingest;
pub mod pipeline;
pub mod synth;

pub use config::{ConfigError, ProposerKind, RunConfig, RunSection, Stage};
pub use ingest::{ingest_corpus, Corpus, IngestError, Rejected};
pub use pipeline::{
    run_pipeline, run_pipeline_with, PipelineError, RunOutcome, Status, TraceRecord,
};
pub use synth::{
    generate_synthetic_suite, read_faults, write_corpus, FaultKind, FaultRecord, SynthError,
    SynthSpec,
};
