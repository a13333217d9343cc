//! Error refinement: turns a failed execution into short, categorized
//! feedback for fix mode.
//!
//! Steps, in order:
//! 1. classify from the execution status, then from the last exception line;
//! 2. drop traceback frames outside the main file;
//! 3. collapse runs of repeated frames (deep recursion) into one copy plus a
//!    repeat count;
//! 4. append the category's guidance sentence;
//! 5. if still over budget, keep the head and tail of the traceback around an
//!    elision marker.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sandbox::{ExecStatus, ExecutionResult, MAIN_FILE};

pub const DEFAULT_BUDGET: usize = 2000;
pub const MIN_BUDGET: usize = 256;

/// Longest frame cycle recognised when collapsing repeats (mutual recursion).
const MAX_CYCLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Assertion,
    Syntax,
    Name,
    Type,
    Value,
    IndexKey,
    ImportMissing,
    Recursion,
    Timeout,
    Setup,
    Other,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 11] = [
        ErrorCategory::Assertion,
        ErrorCategory::Syntax,
        ErrorCategory::Name,
        ErrorCategory::Type,
        ErrorCategory::Value,
        ErrorCategory::IndexKey,
        ErrorCategory::ImportMissing,
        ErrorCategory::Recursion,
        ErrorCategory::Timeout,
        ErrorCategory::Setup,
        ErrorCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Assertion => "assertion",
            ErrorCategory::Syntax => "syntax",
            ErrorCategory::Name => "name",
            ErrorCategory::Type => "type",
            ErrorCategory::Value => "value",
            ErrorCategory::IndexKey => "index_key",
            ErrorCategory::ImportMissing => "import_missing",
            ErrorCategory::Recursion => "recursion",
            ErrorCategory::Timeout => "timeout",
            ErrorCategory::Setup => "setup",
            ErrorCategory::Other => "other",
        }
    }

    fn from_exception(name: &str) -> Self {
        let short = name.rsplit('.').next().unwrap_or(name);
        match short {
            "AssertionError" => ErrorCategory::Assertion,
            "SyntaxError" | "IndentationError" | "TabError" => ErrorCategory::Syntax,
            "NameError" | "UnboundLocalError" => ErrorCategory::Name,
            "TypeError" => ErrorCategory::Type,
            "ValueError" => ErrorCategory::Value,
            "IndexError" | "KeyError" => ErrorCategory::IndexKey,
            "ModuleNotFoundError" | "ImportError" => ErrorCategory::ImportMissing,
            "RecursionError" => ErrorCategory::Recursion,
            _ => ErrorCategory::Other,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error category '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedError {
    pub category: ErrorCategory,
    pub filtered_traceback: String,
    pub guidance: String,
    pub truncated: bool,
    pub original_length: usize,
}

impl RefinedError {
    /// Text placed in the fix prompt.
    pub fn render(&self) -> String {
        if self.filtered_traceback.is_empty() {
            self.guidance.clone()
        } else {
            format!("{}\n\n{}", self.filtered_traceback, self.guidance)
        }
    }

    pub fn char_len(&self) -> usize {
        self.filtered_traceback.chars().count() + self.guidance.chars().count()
    }
}

/// Category to one-sentence guidance. `{timeout}` in the timeout entry is
/// replaced by the configured limit in seconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidanceTable(HashMap<ErrorCategory, String>);

impl Default for GuidanceTable {
    fn default() -> Self {
        use ErrorCategory::*;
        let entries = [
            (Assertion, "Your generated solution failed a test case. Please improve the logic of your solution."),
            (Syntax, "Your generated solution is not valid Python. Please fix the syntax of your solution."),
            (Name, "Your generated solution uses a name that is not defined. Please define or import every name it uses."),
            (Type, "Your generated solution applied an operation to a value of the wrong type. Please check the types your solution handles."),
            (Value, "Your generated solution received or produced an invalid value. Please check how your solution handles its inputs."),
            (IndexKey, "Your generated solution accessed a missing index or key. Please check the bounds and keys your solution uses."),
            (ImportMissing, "Your generated solution imports a module that is not installed. Please list it in the '### Requirements' section or use the standard library."),
            (Recursion, "Your generated solution exceeded the maximum recursion depth. Please add a reachable base case or use an iterative approach."),
            (Timeout, "Your solution exceeded the {timeout}-second time limit; check for infinite loops or inefficiency."),
            (Setup, "The environment for your solution could not be set up. Please check the packages listed in the '### Requirements' section."),
            (Other, "Your generated solution raised an error. Please fix the error shown above."),
        ];
        Self(entries.into_iter().map(|(k, v)| (k, v.to_string())).collect())
    }
}

impl GuidanceTable {
    /// Overrides defaults from a TOML file of `category = "sentence"` pairs.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let raw: HashMap<String, String> = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut table = Self::default();
        for (k, v) in raw {
            table.0.insert(k.parse()?, v);
        }
        Ok(table)
    }

    pub fn sentence(&self, category: ErrorCategory, timeout_secs: f64) -> String {
        let s = self.0.get(&category).cloned().unwrap_or_default();
        s.replace("{timeout}", &format_secs(timeout_secs))
    }
}

fn format_secs(secs: f64) -> String {
    if secs.fract() == 0.0 {
        format!("{}", secs as u64)
    } else {
        format!("{secs}")
    }
}

/// Last line of `stderr` that names an exception, e.g.
/// `ValueError: bad` or a bare `AssertionError`.
pub fn final_exception_name(stderr: &str) -> Option<&str> {
    stderr.lines().rev().find_map(exception_name)
}

fn exception_name(line: &str) -> Option<&str> {
    if line.starts_with([' ', '\t']) {
        return None;
    }
    let head = line.split(':').next()?.trim_end();
    let valid = !head.is_empty()
        && head.split('.').all(|part| {
            let mut cs = part.chars();
            cs.next().is_some_and(|c| c.is_ascii_uppercase() || c == '_') && cs.all(|c| c.is_ascii_alphanumeric() || c == '_')
        });
    let short = head.rsplit('.').next()?;
    let looks_like = ["Error", "Exception", "Exit", "Interrupt", "Warning", "Iteration"]
        .iter()
        .any(|suffix| short.ends_with(suffix));
    (valid && looks_like && (line.len() == head.len() || line[head.len()..].starts_with(':'))).then_some(head)
}

pub fn classify(result: &ExecutionResult) -> ErrorCategory {
    match result.status {
        ExecStatus::Timeout => ErrorCategory::Timeout,
        ExecStatus::SetupError => ErrorCategory::Setup,
        _ => final_exception_name(&result.stderr)
            .map(ErrorCategory::from_exception)
            .unwrap_or(ErrorCategory::Other),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    /// `  File "path", line N, in f` plus its indented source lines.
    Frame { path: String, text: String },
    Line(String),
}

fn frame_path(line: &str) -> Option<&str> {
    let rest = line.strip_prefix("  File \"")?;
    let end = rest.find('"')?;
    Some(&rest[..end])
}

fn segments(text: &str) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for line in text.lines() {
        if let Some(path) = frame_path(line) {
            out.push(Segment::Frame { path: path.to_string(), text: line.to_string() });
            continue;
        }
        if line.starts_with("    ") {
            if let Some(Segment::Frame { text, .. }) = out.last_mut() {
                text.push('\n');
                text.push_str(line);
                continue;
            }
        }
        out.push(Segment::Line(line.to_string()));
    }
    out
}

fn is_main_path(path: &str, main_file: &str) -> bool {
    path == main_file || path.ends_with(&format!("/{main_file}"))
}

/// Python's own `[Previous line repeated N more times]` marker.
fn python_repeat_count(line: &str) -> Option<u64> {
    let rest = line.trim().strip_prefix("[Previous line repeated ")?;
    rest.split(' ').next()?.parse().ok()
}

/// Collapses consecutive repeats of frame cycles (length 1..=MAX_CYCLE).
fn collapse_repeats(segs: Vec<Segment>) -> (Vec<Segment>, bool) {
    let mut out: Vec<Segment> = Vec::with_capacity(segs.len());
    let mut collapsed = false;
    let mut i = 0;
    while i < segs.len() {
        let mut best: Option<(usize, usize)> = None;
        for period in 1..=MAX_CYCLE {
            if i + 2 * period > segs.len() {
                break;
            }
            let block = &segs[i..i + period];
            if !block.iter().all(|s| matches!(s, Segment::Frame { .. })) {
                continue;
            }
            let mut reps = 1;
            while i + (reps + 1) * period <= segs.len() && segs[i + reps * period..i + (reps + 1) * period] == *block {
                reps += 1;
            }
            if reps > 1 && best.is_none_or(|(_, r)| reps * period > r * best.unwrap().0) {
                best = Some((period, reps));
            }
        }
        match best {
            Some((period, reps)) => {
                out.extend_from_slice(&segs[i..i + period]);
                let what = if period == 1 { "frame".to_string() } else { format!("{period} frames") };
                out.push(Segment::Line(format!("  [Previous {what} repeated {} more times]", reps - 1)));
                collapsed = true;
                i += period * reps;
            }
            None => {
                out.push(segs[i].clone());
                i += 1;
            }
        }
    }
    (out, collapsed)
}

fn render(segs: &[Segment]) -> String {
    segs.iter()
        .map(|s| match s {
            Segment::Frame { text, .. } => text.as_str(),
            Segment::Line(l) => l.as_str(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn take_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn take_last_chars(s: &str, n: usize) -> &str {
    let count = s.chars().count();
    if n >= count {
        return s;
    }
    let (i, _) = s.char_indices().nth(count - n).expect("in range");
    &s[i..]
}

/// Keeps a head and a tail of `text` so the result is at most `limit` chars.
fn elide_middle(text: &str, limit: usize) -> String {
    let total = text.chars().count();
    if total <= limit {
        return text.to_string();
    }
    // The marker's digit count is bounded by that of `total`.
    let marker_len = format!("\n... [{total} characters omitted] ...\n").chars().count();
    if limit <= marker_len {
        return take_last_chars(text, limit).to_string();
    }
    let room = limit - marker_len;
    let head_n = room / 3;
    let tail_n = room - head_n;
    let omitted = total - head_n - tail_n;
    format!(
        "{}\n... [{omitted} characters omitted] ...\n{}",
        take_chars(text, head_n),
        take_last_chars(text, tail_n)
    )
}

#[derive(Debug, Clone)]
pub struct ErrorRefiner {
    pub budget: usize,
    pub guidance: GuidanceTable,
    pub main_file: String,
}

impl Default for ErrorRefiner {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, guidance: GuidanceTable::default(), main_file: MAIN_FILE.to_string() }
    }
}

impl ErrorRefiner {
    pub fn new(budget: usize) -> Self {
        Self { budget: budget.max(MIN_BUDGET), ..Self::default() }
    }

    pub fn refine(&self, result: &ExecutionResult) -> RefinedError {
        let category = classify(result);
        let raw = if result.stderr.trim().is_empty() { &result.stdout } else { &result.stderr };
        let original_length = (result.stderr_bytes as usize).max(result.stderr.len()).max(raw.len());

        let mut truncated = result.streams_truncated();
        let body = match result.status {
            ExecStatus::Timeout => format!("Execution was stopped after {} seconds.", format_secs(result.timeout_secs)),
            _ => {
                let segs: Vec<Segment> = segments(raw)
                    .into_iter()
                    .filter(|s| match s {
                        Segment::Frame { path, .. } => is_main_path(path, &self.main_file),
                        Segment::Line(_) => true,
                    })
                    .collect();
                // Python's repeat marker refers to a frame that may have been
                // dropped; keep it only when it follows a kept frame.
                let mut kept: Vec<Segment> = Vec::with_capacity(segs.len());
                for s in segs {
                    if let Segment::Line(l) = &s {
                        if python_repeat_count(l).is_some() && !matches!(kept.last(), Some(Segment::Frame { .. })) {
                            continue;
                        }
                    }
                    kept.push(s);
                }
                let (collapsed, _) = collapse_repeats(kept);
                let text = render(&collapsed);
                if text.trim().is_empty() {
                    format!("The program exited with code {} and produced no error output.", result.exit_code)
                } else {
                    text
                }
            }
        };

        let mut guidance = self.guidance.sentence(category, result.timeout_secs);
        let budget = self.budget.max(MIN_BUDGET);
        if guidance.chars().count() > budget / 2 {
            guidance = take_chars(&guidance, budget / 2).to_string();
        }
        let room = budget - guidance.chars().count();
        let filtered_traceback = if body.chars().count() > room {
            truncated = true;
            elide_middle(&body, room)
        } else {
            body
        };

        RefinedError { category, filtered_traceback, guidance, truncated, original_length }
    }
}

pub fn refine(result: &ExecutionResult, budget: usize) -> RefinedError {
    ErrorRefiner::new(budget).refine(result)
}
