//! Counterfactual debugging of failed agent traces.
//!
//! A failed trace is scored step by step: each candidate step is replaced by
//! proposed alternatives, the rest of the trace is re-executed, and the step
//! is responsible when some replacement makes the verifier pass. The most
//! conservative successful replacement becomes a repair and is exported as a
//! (wrong, repaired) pair.

pub mod baselines;
pub mod consensus;
pub mod crs;
pub mod execution;
pub mod harness;
pub mod metrics;
pub mod proposal;
pub mod repair;
pub mod trace;
