//! Executor agent: materializes a workspace (main file, requirements file,
//! entry script) and runs it under a hard timeout through one of the
//! registered execution backends.

mod capture;
mod container;
mod process;
mod subprocess;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TestHarnessText;
use crate::digest::sha256_hex;
use crate::sanitizer::SanitizedCode;

pub use capture::{Captured, STREAM_CAP};
pub use container::ContainerBackend;
pub use subprocess::SubprocessBackend;

pub const MAIN_FILE: &str = "main.py";
pub const REQUIREMENTS_FILE: &str = "requirements.txt";
pub const ENTRY_SCRIPT: &str = "entry.sh";
pub const ENTRY_SCRIPT_TEXT: &str = include_str!("../../assets/entry.sh");

/// Environment variable selecting the execution backend.
pub const EXEC_BACKEND_ENV: &str = "CAPSULE_EXEC_BACKEND";

/// Slack allowed past the timeout for killing and reaping.
pub const KILL_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Passed,
    Failed,
    Timeout,
    SetupError,
}

impl fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecStatus::Passed => "passed",
            ExecStatus::Failed => "failed",
            ExecStatus::Timeout => "timeout",
            ExecStatus::SetupError => "setup_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    /// Process exit code; 128+N for a signal, -1 when killed at the timeout.
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_secs: f64,
    /// Bytes produced on each stream before capping.
    #[serde(default)]
    pub stdout_bytes: u64,
    #[serde(default)]
    pub stderr_bytes: u64,
    /// Timeout the run was held to.
    #[serde(default)]
    pub timeout_secs: f64,
}

impl ExecutionResult {
    pub fn passed(&self) -> bool {
        self.status == ExecStatus::Passed
    }

    pub fn streams_truncated(&self) -> bool {
        self.stderr_bytes > self.stderr.len() as u64 || self.stdout_bytes > self.stdout.len() as u64
    }

    pub(crate) fn setup_failure(stderr: String, exit_code: i32, timeout: Duration) -> Self {
        let len = stderr.len() as u64;
        Self {
            status: ExecStatus::SetupError,
            exit_code,
            stdout: String::new(),
            stderr,
            duration_secs: 0.0,
            stdout_bytes: 0,
            stderr_bytes: len,
            timeout_secs: timeout.as_secs_f64(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    /// Infrastructure is missing: engine daemon, interpreter, or workspace
    /// filesystem. Never charged to the generated code.
    #[error("execution engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error("workspace error: {0}")]
    Workspace(#[from] std::io::Error),
    #[error("execution cancelled")]
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
    pub main_file: PathBuf,
    pub requirements_file: PathBuf,
    pub problem_id: String,
    pub attempt_index: usize,
    pub requirements: Vec<String>,
}

/// Main file contents: sanitized code, a blank line, the test harness.
pub fn main_file_text(code: &str, harness: &TestHarnessText) -> String {
    format!("{}\n\n{}\n", code.trim_end_matches(['\n', '\r']), harness.body.trim_end_matches(['\n', '\r']))
}

pub fn requirements_text(requirements: &[String]) -> String {
    requirements.iter().map(|r| format!("{r}\n")).collect()
}

fn safe_component(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect()
}

pub fn prepare_workspace(
    base: &Path,
    code: &SanitizedCode,
    harness: &TestHarnessText,
    requirements: &[String],
    problem_id: &str,
    attempt_index: usize,
) -> Result<Workspace, ExecError> {
    std::fs::create_dir_all(base)?;
    let root = tempfile::Builder::new()
        .prefix(&format!("{}-a{attempt_index}-", safe_component(problem_id)))
        .tempdir_in(base)?
        .keep();
    let main_file = root.join(MAIN_FILE);
    let requirements_file = root.join(REQUIREMENTS_FILE);
    std::fs::write(&main_file, main_file_text(&code.code, harness))?;
    std::fs::write(&requirements_file, requirements_text(requirements))?;
    std::fs::write(root.join(ENTRY_SCRIPT), ENTRY_SCRIPT_TEXT)?;
    Ok(Workspace {
        root,
        main_file,
        requirements_file,
        problem_id: problem_id.to_string(),
        attempt_index,
        requirements: requirements.to_vec(),
    })
}

/// Removes the workspace unless `keep` is set. Missing directories are fine.
pub fn cleanup(ws: &Workspace, keep: bool) {
    if keep {
        return;
    }
    match std::fs::remove_dir_all(&ws.root) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => log::warn!("failed to remove workspace {}: {e}", ws.root.display()),
    }
}

/// Rewrites absolute workspace paths so tracebacks read `main.py` on every
/// backend and every run.
pub(crate) fn relativize(text: &str, prefixes: &[String]) -> String {
    let mut out = text.to_string();
    for p in prefixes {
        if !p.is_empty() {
            out = out.replace(p.as_str(), "");
        }
    }
    out
}

pub(crate) fn workspace_prefixes(root: &Path) -> Vec<String> {
    let mut v = vec![format!("{}/", root.display())];
    if let Ok(c) = root.canonicalize() {
        let c = format!("{}/", c.display());
        if !v.contains(&c) {
            v.push(c);
        }
    }
    v
}

pub(crate) fn status_for(exit_code: Option<i32>, timed_out: bool) -> ExecStatus {
    match (timed_out, exit_code) {
        (true, _) => ExecStatus::Timeout,
        (false, Some(0)) => ExecStatus::Passed,
        _ => ExecStatus::Failed,
    }
}

/// Installed-requirements directories keyed by the digest of the sorted
/// requirement set. Concurrent requests for the same set install once.
#[derive(Debug)]
pub struct DepsCache {
    dir: PathBuf,
    entries: Mutex<HashMap<String, Arc<OnceLock<Result<PathBuf, (String, i32)>>>>>,
}

impl DepsCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, entries: Mutex::new(HashMap::new()) }
    }

    pub fn key(requirements: &[String]) -> String {
        let mut sorted = requirements.to_vec();
        sorted.sort();
        sorted.dedup();
        sha256_hex(sorted.join("\n").as_bytes())[..16].to_string()
    }

    /// Returns the installed directory, running `install(target)` the first
    /// time a set is seen. Failures are cached too.
    pub(crate) fn get_or_install(
        &self,
        requirements: &[String],
        install: impl FnOnce(&Path) -> Result<(), (String, i32)>,
    ) -> Result<PathBuf, (String, i32)> {
        let key = Self::key(requirements);
        let cell = {
            let mut map = self.entries.lock().expect("deps cache poisoned");
            map.entry(key.clone()).or_default().clone()
        };
        cell.get_or_init(|| {
            let target = self.dir.join(&key);
            std::fs::create_dir_all(&target).map_err(|e| (e.to_string(), -1))?;
            install(&target).map(|_| target)
        })
        .clone()
    }
}

#[derive(Debug, Clone)]
pub struct ExecSettings {
    pub python: String,
    pub engine: String,
    pub image: String,
    pub memory_limit: Option<String>,
    pub deps_cache_dir: PathBuf,
    pub install_timeout: Duration,
    pub cancel: CancelToken,
}

impl Default for ExecSettings {
    fn default() -> Self {
        Self {
            python: "python3".into(),
            engine: "docker".into(),
            image: "python:3.11-slim".into(),
            memory_limit: None,
            deps_cache_dir: std::env::temp_dir().join("capsule-deps"),
            install_timeout: Duration::from_secs(300),
            cancel: CancelToken::default(),
        }
    }
}

pub trait ExecBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn execute(&self, ws: &Workspace, timeout: Duration) -> Result<ExecutionResult, ExecError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    Subprocess,
    Container,
}

impl FromStr for ExecKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subprocess" => Ok(ExecKind::Subprocess),
            "container" | "docker" => Ok(ExecKind::Container),
            other => Err(format!("unknown execution backend '{other}' (expected subprocess or container)")),
        }
    }
}

impl ExecKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecKind::Subprocess => "subprocess",
            ExecKind::Container => "container",
        }
    }
}

type ExecConstructor = fn(&ExecSettings) -> Box<dyn ExecBackend>;

/// Execution backends by name.
pub struct ExecRegistry {
    entries: Vec<(&'static str, ExecConstructor)>,
}

impl Default for ExecRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("subprocess", |s| Box::new(SubprocessBackend::new(s.clone())));
        r.register("container", |s| Box::new(ContainerBackend::new(s.clone())));
        r
    }
}

impl ExecRegistry {
    pub fn register(&mut self, name: &'static str, ctor: ExecConstructor) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, ctor));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, settings: &ExecSettings) -> Result<Box<dyn ExecBackend>, String> {
        let name = name.parse::<ExecKind>().map(ExecKind::as_str).unwrap_or(name);
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor(settings))
            .ok_or_else(|| format!("unknown execution backend '{name}' (known: {})", self.names().join(", ")))
    }
}
