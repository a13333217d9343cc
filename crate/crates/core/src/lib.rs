//! Self-debugging code generation harness.
//!
//! A programmer agent (any [`backend::CompletionBackend`]) writes a solution,
//! an executor agent (any [`sandbox::ExecBackend`]) runs it against the
//! problem's tests, and failures are refined into short feedback for the
//! next fix-mode attempt. The [`analytics`] module turns run logs into
//! per-attempt influence tables and exponential decay fits.

pub mod analytics;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod digest;
pub mod orchestrator;
pub mod protocol;
pub mod refine;
pub mod sandbox;
pub mod sanitizer;
mod scan;
pub mod signature;

pub use analytics::{AttemptCounts, DecayFit, InfluencePoint};
pub use backend::{CompletionBackend, CompletionRequest, CompletionResult};
pub use config::RunConfig;
pub use dataset::{Problem, SourceFormat, TestHarnessText};
pub use orchestrator::{AttemptRecord, RunLog, SolveOutcome};
pub use protocol::{ModelResponse, PromptBundle};
pub use refine::{ErrorCategory, RefinedError};
pub use sandbox::{ExecBackend, ExecStatus, ExecutionResult, Workspace};
pub use sanitizer::SanitizedCode;
pub use signature::{CallShape, SignatureHint};
