//! The solve loop: one generation attempt, then up to `max_attempts` fix
//! attempts, each carrying only the latest code and its refined error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendRegistry, BackendSettings, CompletionBackend, CompletionRequest, RecordingBackend, RetryPolicy};
use crate::config::{HintMode, RunConfig};
use crate::dataset::{assemble_test_harness, Problem};
use crate::digest::code_digest;
use crate::protocol::{parse_response, PromptBundle, PromptTemplates};
use crate::refine::{ErrorCategory, ErrorRefiner, GuidanceTable, RefinedError};
use crate::sandbox::{
    cleanup, prepare_workspace, CancelToken, ExecBackend, ExecError, ExecRegistry, ExecSettings, ExecStatus, ExecutionResult,
};
use crate::sanitizer::strip_example_calls;
use crate::signature::infer_signature;

pub const MISSING_CODE_GUIDANCE: &str = "Your response contained no code block. Please answer with the required sections and put the complete solution in a ```python fenced block under '### Code'.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    /// 0 is the initial generation.
    pub index: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub code_digest: String,
    #[serde(default)]
    pub requirements: Vec<String>,
    pub execution: ExecutionResult,
    /// Feedback sent to the next attempt; absent on the last attempt.
    pub refined: Option<RefinedError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub problem_id: String,
    pub solved: bool,
    pub attempts: Vec<AttemptRecord>,
    pub llm_calls: usize,
    pub wall_time: f64,
    /// Code of the last attempt (the passing one when solved).
    #[serde(default)]
    pub final_code: Option<String>,
    /// Infrastructure failure that ended the problem early.
    #[serde(default)]
    pub setup_error: Option<String>,
}

impl SolveOutcome {
    /// Index of the passing attempt.
    pub fn solved_at(&self) -> Option<usize> {
        if self.solved {
            self.attempts.last().map(|a| a.index)
        } else {
            None
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.attempts.iter().map(|a| a.prompt_tokens + a.completion_tokens).sum()
    }

    /// Zeroes wall-clock fields so two runs can be compared.
    pub fn without_timing(&self) -> SolveOutcome {
        let mut o = self.clone();
        o.wall_time = 0.0;
        for a in &mut o.attempts {
            a.execution.duration_secs = 0.0;
        }
        o
    }
}

/// Settings of the loop itself.
#[derive(Debug, Clone)]
pub struct SolveSettings {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_attempts: usize,
    pub timeout: Duration,
    pub hint_mode: HintMode,
    pub work_dir: PathBuf,
    pub keep_artifacts: bool,
}

impl Default for SolveSettings {
    fn default() -> Self {
        let c = RunConfig::default();
        Self::from_config(&c)
    }
}

impl SolveSettings {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            model_name: c.model_name.clone(),
            temperature: c.temperature,
            max_output_tokens: c.max_output_tokens,
            max_attempts: c.max_attempts,
            timeout: Duration::from_secs_f64(c.timeout_secs),
            hint_mode: c.hint_mode,
            work_dir: c.work_dir.clone().unwrap_or_else(|| std::env::temp_dir().join("capsule-work")),
            keep_artifacts: c.keep_artifacts,
        }
    }
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Exec(String),
    #[error("{0}")]
    Io(String),
}

pub struct Orchestrator {
    pub backend: Arc<dyn CompletionBackend>,
    pub executor: Arc<dyn ExecBackend>,
    pub templates: PromptTemplates,
    pub refiner: ErrorRefiner,
    pub settings: SolveSettings,
    pub cancel: CancelToken,
}

impl Orchestrator {
    pub fn new(backend: Arc<dyn CompletionBackend>, executor: Arc<dyn ExecBackend>, settings: SolveSettings) -> Self {
        Self {
            backend,
            executor,
            templates: PromptTemplates::default(),
            refiner: ErrorRefiner::default(),
            settings,
            cancel: CancelToken::default(),
        }
    }

    /// Builds backends, templates and refiner from a resolved configuration.
    pub fn from_config(c: &RunConfig, cancel: CancelToken) -> Result<Self, SetupError> {
        let backend_settings = BackendSettings {
            mock_script: c.mock_script.clone(),
            transcript: c.replay_transcript.clone(),
            api_base: None,
            api_key: None,
            max_concurrent: c.max_concurrent_requests,
            request_timeout: None,
            retry: RetryPolicy::default(),
        };
        let mut backend = BackendRegistry::default().build(c.backend.as_str(), &backend_settings)?;
        if let Some(path) = &c.record_transcript {
            backend = Box::new(
                RecordingBackend::create(backend, path)
                    .map_err(|e| SetupError::Io(format!("cannot create transcript {}: {e}", path.display())))?,
            );
        }
        let exec_settings = ExecSettings {
            python: c.python.clone(),
            engine: c.engine.clone(),
            image: c.image.clone(),
            memory_limit: c.memory_limit.clone(),
            cancel: cancel.clone(),
            ..ExecSettings::default()
        };
        let executor = ExecRegistry::default().build(c.exec_backend.as_str(), &exec_settings).map_err(SetupError::Exec)?;
        let templates = match &c.prompts_dir {
            Some(d) => PromptTemplates::load_dir(d).map_err(|e| SetupError::Io(format!("cannot read prompts in {}: {e}", d.display())))?,
            None => PromptTemplates::default(),
        };
        let guidance = match &c.guidance_file {
            Some(p) => GuidanceTable::load(p).map_err(SetupError::Io)?,
            None => GuidanceTable::default(),
        };
        let refiner = ErrorRefiner { guidance, ..ErrorRefiner::new(c.error_budget) };
        Ok(Self {
            backend: Arc::from(backend),
            executor: Arc::from(executor),
            templates,
            refiner,
            settings: SolveSettings::from_config(c),
            cancel,
        })
    }

    fn request(&self, problem: &Problem, prompt: &PromptBundle) -> CompletionRequest {
        CompletionRequest {
            system_text: prompt.system_text.clone(),
            user_text: prompt.user_text.clone(),
            model_name: self.settings.model_name.clone(),
            temperature: self.settings.temperature,
            max_output_tokens: self.settings.max_output_tokens,
            problem_id: problem.id.clone(),
        }
    }

    pub fn solve(&self, problem: &Problem) -> SolveOutcome {
        let start = Instant::now();
        let hint = if self.settings.hint_mode.applies_to(problem.source_format) {
            match infer_signature(problem) {
                Ok(h) => Some(h),
                Err(e) => {
                    log::debug!("{}: no signature hint ({e})", problem.id);
                    None
                }
            }
        } else {
            None
        };
        let harness = assemble_test_harness(problem);
        let mut prompt = self.templates.generation_prompt(problem, hint.as_ref());
        let mut out = SolveOutcome {
            problem_id: problem.id.clone(),
            solved: false,
            attempts: Vec::new(),
            llm_calls: 0,
            wall_time: 0.0,
            final_code: None,
            setup_error: None,
        };

        for index in 0..=self.settings.max_attempts {
            if self.cancel.is_cancelled() {
                out.setup_error = Some("cancelled".into());
                break;
            }
            let completion = match self.backend.complete(&self.request(problem, &prompt)) {
                Ok(c) => c,
                Err(e) => {
                    out.setup_error = Some(e.to_string());
                    break;
                }
            };
            out.llm_calls += 1;

            let (code, requirements, execution, parse_failed) = match parse_response(&completion.text) {
                Ok(resp) => {
                    let sanitized = strip_example_calls(&resp.code);
                    let run = prepare_workspace(&self.settings.work_dir, &sanitized, &harness, &resp.requirements, &problem.id, index)
                        .and_then(|ws| {
                            let r = self.executor.execute(&ws, self.settings.timeout);
                            cleanup(&ws, self.settings.keep_artifacts);
                            r
                        });
                    match run {
                        Ok(r) => (sanitized.code, resp.requirements, r, false),
                        Err(e) => {
                            let marker = match e {
                                ExecError::Cancelled => "cancelled".to_string(),
                                other => other.to_string(),
                            };
                            out.attempts.push(AttemptRecord {
                                index,
                                prompt_tokens: completion.prompt_tokens,
                                completion_tokens: completion.completion_tokens,
                                code_digest: code_digest(&sanitized.code),
                                requirements: resp.requirements,
                                execution: ExecutionResult::setup_failure(marker.clone(), -1, self.settings.timeout),
                                refined: None,
                            });
                            out.final_code = Some(sanitized.code);
                            out.setup_error = Some(marker);
                            break;
                        }
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    let exec = ExecutionResult {
                        status: ExecStatus::Failed,
                        exit_code: -1,
                        stdout: String::new(),
                        stderr_bytes: msg.len() as u64,
                        stderr: msg,
                        duration_secs: 0.0,
                        stdout_bytes: 0,
                        timeout_secs: self.settings.timeout.as_secs_f64(),
                    };
                    (completion.text.clone(), Vec::new(), exec, true)
                }
            };

            let passed = execution.passed();
            let more = !passed && index < self.settings.max_attempts;
            let refined = more.then(|| {
                if parse_failed {
                    RefinedError {
                        category: ErrorCategory::Other,
                        filtered_traceback: String::new(),
                        guidance: MISSING_CODE_GUIDANCE.to_string(),
                        truncated: false,
                        original_length: execution.stderr.len(),
                    }
                } else {
                    self.refiner.refine(&execution)
                }
            });
            if let Some(r) = &refined {
                prompt = self.templates.fix_prompt(problem, &code, r);
            }
            out.attempts.push(AttemptRecord {
                index,
                prompt_tokens: completion.prompt_tokens,
                completion_tokens: completion.completion_tokens,
                code_digest: code_digest(&code),
                requirements,
                execution,
                refined,
            });
            out.final_code = Some(code);
            if passed {
                out.solved = true;
                break;
            }
        }
        out.wall_time = start.elapsed().as_secs_f64();
        out
    }

    /// Solves every problem with `workers` threads. Outcomes reach `sink` in
    /// input order as soon as each prefix is complete.
    pub fn run_suite(&self, problems: &[Problem], workers: usize, mut sink: impl FnMut(&SolveOutcome)) -> Vec<SolveOutcome> {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, SolveOutcome)>();
        let mut done: Vec<SolveOutcome> = Vec::with_capacity(problems.len());
        std::thread::scope(|s| {
            for _ in 0..workers.max(1).min(problems.len().max(1)) {
                let tx = tx.clone();
                let next = &next;
                s.spawn(move || loop {
                    if self.cancel.is_cancelled() {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(p) = problems.get(i) else { break };
                    let outcome = self.solve(p);
                    if tx.send((i, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut pending: BTreeMap<usize, SolveOutcome> = BTreeMap::new();
            let mut want = 0;
            for (i, o) in rx {
                pending.insert(i, o);
                while let Some(o) = pending.remove(&want) {
                    sink(&o);
                    done.push(o);
                    want += 1;
                }
            }
            // Problems skipped after cancellation leave gaps; keep the rest.
            for (_, o) in pending {
                sink(&o);
                done.push(o);
            }
        });
        done
    }
}

/// First line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: RunConfig,
    pub started_at: u64,
    pub tool_version: String,
}

impl RunHeader {
    pub fn new(config: RunConfig) -> Self {
        let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { config, started_at, tool_version: env!("CARGO_PKG_VERSION").to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub outcomes: Vec<SolveOutcome>,
}

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("cannot read run log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run log {path} line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("run log {0} is empty")]
    Empty(PathBuf),
}

impl RunLog {
    /// Reads a log. A malformed final line (an interrupted write) is skipped
    /// with a warning; malformed lines elsewhere are errors.
    pub fn read(path: &Path) -> Result<RunLog, RunLogError> {
        let io = |source| RunLogError::Io { path: path.to_path_buf(), source };
        let file = File::open(path).map_err(io)?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io)?;
        let lines: Vec<(usize, &String)> = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
        let Some(((_, first), rest)) = lines.split_first() else {
            return Err(RunLogError::Empty(path.to_path_buf()));
        };
        let fmt = |line: usize, e: serde_json::Error| RunLogError::Format { path: path.to_path_buf(), line: line + 1, message: e.to_string() };
        let header: RunHeader = serde_json::from_str(first).map_err(|e| fmt(0, e))?;
        let mut outcomes = Vec::with_capacity(rest.len());
        for (k, (n, line)) in rest.iter().enumerate() {
            match serde_json::from_str(line) {
                Ok(o) => outcomes.push(o),
                Err(e) if k + 1 == rest.len() => log::warn!("{}: ignoring truncated last line {}: {e}", path.display(), n + 1),
                Err(e) => return Err(fmt(*n, e)),
            }
        }
        Ok(RunLog { header, outcomes })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = RunLogWriter::create(path, &self.header)?;
        for o in &self.outcomes {
            w.append(o)?;
        }
        Ok(())
    }

    pub fn solved(&self) -> usize {
        self.outcomes.iter().filter(|o| o.solved).count()
    }
}

/// Append-only log writer; every line is flushed as it is written.
pub struct RunLogWriter {
    out: BufWriter<File>,
}

impl RunLogWriter {
    pub fn create(path: &Path, header: &RunHeader) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = Self { out: BufWriter::new(File::create(path)?) };
        w.line(&serde_json::to_string(header).expect("header serializes"))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> std::io::Result<()> {
        writeln!(self.out, "{s}")?;
        self.out.flush()
    }

    pub fn append(&mut self, outcome: &SolveOutcome) -> std::io::Result<()> {
        self.line(&serde_json::to_string(outcome).expect("outcome serializes"))
    }
}
