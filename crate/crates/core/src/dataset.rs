//! Benchmark problem loading.
//!
//! Each supported file is JSONL: one standalone record per line. Field names
//! follow the published dataset files:
//!
//! | format              | id        | description                         | tests          | entry point   |
//! |---------------------|-----------|-------------------------------------|----------------|---------------|
//! | `humaneval`         | `task_id` | `prompt`                            | `test`         | `entry_point` |
//! | `mbpp`              | `task_id` | `text`                              | `test_list[]`  | -             |
//! | `bigcodebench_lite` | `task_id` | `complete_prompt`/`instruct_prompt` | `test`         | `entry_point` |
//! | `custom`            | `id`      | `description`                       | `tests[]`      | `entry_point` |
//!
//! The ET variants of HumanEval and MBPP share these schemas.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Humaneval,
    Mbpp,
    BigcodebenchLite,
    Custom,
}

impl SourceFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceFormat::Humaneval => "humaneval",
            SourceFormat::Mbpp => "mbpp",
            SourceFormat::BigcodebenchLite => "bigcodebench_lite",
            SourceFormat::Custom => "custom",
        }
    }

    /// Whether problem descriptions in this format already carry a function
    /// signature for the model to follow.
    pub fn provides_signature(self) -> bool {
        matches!(self, SourceFormat::Humaneval | SourceFormat::BigcodebenchLite)
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "humaneval" | "humaneval-et" | "humaneval_et" => Ok(SourceFormat::Humaneval),
            "mbpp" | "mbpp-et" | "mbpp_et" => Ok(SourceFormat::Mbpp),
            "bigcodebench_lite" | "bigcodebench" => Ok(SourceFormat::BigcodebenchLite),
            "custom" => Ok(SourceFormat::Custom),
            other => Err(format!(
                "unknown dataset format '{other}' (expected humaneval, mbpp, bigcodebench_lite or custom)"
            )),
        }
    }
}

/// Which BigCodeBench prompt becomes the problem description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BigCodeBenchSplit {
    #[default]
    Complete,
    Instruct,
}

impl FromStr for BigCodeBenchSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "complete" => Ok(BigCodeBenchSplit::Complete),
            "instruct" => Ok(BigCodeBenchSplit::Instruct),
            other => Err(format!("unknown split '{other}' (expected complete or instruct)")),
        }
    }
}

/// One benchmark task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub description: String,
    pub tests: Vec<String>,
    pub entry_point: Option<String>,
    pub source_format: SourceFormat,
}

impl Problem {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("problem id is empty".into());
        }
        if self.tests.is_empty() || self.tests.iter().all(|t| t.trim().is_empty()) {
            return Err(format!("problem '{}' has no tests", self.id));
        }
        if matches!(self.source_format, SourceFormat::Humaneval) && self.entry_point.is_none() {
            return Err(format!("humaneval problem '{}' has no entry_point", self.id));
        }
        Ok(())
    }
}

/// Test statements appended to the main file after the generated code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestHarnessText {
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} invalid record(s) in {path}: {}", issues.len(), join_issues(issues))]
    Records { path: PathBuf, issues: Vec<RecordIssue> },
}

fn join_issues(issues: &[RecordIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub split: BigCodeBenchSplit,
}

pub fn load_problems(path: &Path, format: SourceFormat) -> Result<Vec<Problem>, LoadError> {
    load_problems_with(path, format, LoadOptions::default())
}

pub fn load_problems_with(
    path: &Path,
    format: SourceFormat,
    opts: LoadOptions,
) -> Result<Vec<Problem>, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let problems = parse_problems(&text, format, opts).map_err(|issues| LoadError::Records {
        path: path.to_path_buf(),
        issues,
    })?;
    if problems.is_empty() {
        log::warn!("dataset {} contains no records", path.display());
    }
    Ok(problems)
}

/// Parses JSONL text. Every malformed line is reported; none are skipped.
pub fn parse_problems(
    text: &str,
    format: SourceFormat,
    opts: LoadOptions,
) -> Result<Vec<Problem>, Vec<RecordIssue>> {
    let mut problems = Vec::new();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                issues.push(RecordIssue { line, message: format!("invalid JSON: {e}") });
                continue;
            }
        };
        match from_record(&value, format, opts).and_then(|p| p.validate().map(|_| p)) {
            Ok(problem) => {
                if !seen.insert(problem.id.clone()) {
                    issues.push(RecordIssue {
                        line,
                        message: format!("duplicate id '{}'", problem.id),
                    });
                } else {
                    problems.push(problem);
                }
            }
            Err(message) => issues.push(RecordIssue { line, message }),
        }
    }

    if issues.is_empty() {
        Ok(problems)
    } else {
        Err(issues)
    }
}

fn str_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, String> {
    match v.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("field '{key}' is not a string")),
        None => Err(format!("missing required field '{key}'")),
    }
}

fn id_field(v: &Value, key: &str) -> Result<String, String> {
    match v.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(format!("field '{key}' is not a string or number")),
        None => Err(format!("missing required field '{key}'")),
    }
}

fn str_list_field(v: &Value, key: &str) -> Result<Vec<String>, String> {
    let arr = v
        .get(key)
        .ok_or_else(|| format!("missing required field '{key}'"))?
        .as_array()
        .ok_or_else(|| format!("field '{key}' is not a list"))?;
    arr.iter()
        .map(|t| {
            t.as_str()
                .map(str::to_string)
                .ok_or_else(|| format!("field '{key}' contains a non-string entry"))
        })
        .collect()
}

fn optional_str(v: &Value, key: &str) -> Result<Option<String>, String> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("field '{key}' is not a string")),
    }
}

fn from_record(v: &Value, format: SourceFormat, opts: LoadOptions) -> Result<Problem, String> {
    if !v.is_object() {
        return Err("record is not a JSON object".into());
    }
    let problem = match format {
        SourceFormat::Humaneval => Problem {
            id: id_field(v, "task_id")?,
            description: str_field(v, "prompt")?.to_string(),
            tests: vec![str_field(v, "test")?.to_string()],
            entry_point: Some(str_field(v, "entry_point")?.to_string()),
            source_format: format,
        },
        SourceFormat::Mbpp => {
            // The sanitized MBPP release names the description "prompt".
            let description = match v.get("text") {
                Some(_) => str_field(v, "text")?,
                None => str_field(v, "prompt").map_err(|_| "missing required field 'text'".to_string())?,
            };
            Problem {
                id: id_field(v, "task_id")?,
                description: description.to_string(),
                tests: str_list_field(v, "test_list")?,
                entry_point: None,
                source_format: format,
            }
        }
        SourceFormat::BigcodebenchLite => {
            let key = match opts.split {
                BigCodeBenchSplit::Complete => "complete_prompt",
                BigCodeBenchSplit::Instruct => "instruct_prompt",
            };
            Problem {
                id: id_field(v, "task_id")?,
                description: str_field(v, key)?.to_string(),
                tests: vec![str_field(v, "test")?.to_string()],
                entry_point: optional_str(v, "entry_point")?,
                source_format: format,
            }
        }
        SourceFormat::Custom => Problem {
            id: id_field(v, "id")?,
            description: str_field(v, "description")?.to_string(),
            tests: str_list_field(v, "tests")?,
            entry_point: optional_str(v, "entry_point")?,
            source_format: format,
        },
    };
    Ok(problem)
}

/// Serializes a problem back into a record of its own source format.
pub fn to_record(problem: &Problem, opts: LoadOptions) -> Value {
    match problem.source_format {
        SourceFormat::Humaneval => json!({
            "task_id": problem.id,
            "prompt": problem.description,
            "test": problem.tests.join("\n"),
            "entry_point": problem.entry_point,
        }),
        SourceFormat::Mbpp => json!({
            "task_id": problem.id,
            "text": problem.description,
            "test_list": problem.tests,
        }),
        SourceFormat::BigcodebenchLite => {
            let key = match opts.split {
                BigCodeBenchSplit::Complete => "complete_prompt",
                BigCodeBenchSplit::Instruct => "instruct_prompt",
            };
            json!({
                "task_id": problem.id,
                key: problem.description,
                "test": problem.tests.join("\n"),
                "entry_point": problem.entry_point,
            })
        }
        SourceFormat::Custom => json!({
            "id": problem.id,
            "description": problem.description,
            "tests": problem.tests,
            "entry_point": problem.entry_point,
        }),
    }
}

pub fn write_problems(path: &Path, problems: &[Problem], opts: LoadOptions) -> std::io::Result<()> {
    let mut out = String::new();
    for p in problems {
        out.push_str(&to_record(p, opts).to_string());
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Builds the test code appended to the main file.
///
/// HumanEval ships a `check(candidate)` function that must be invoked on the
/// entry point; BigCodeBench ships a `unittest` suite; everything else is a
/// list of bare assert statements.
pub fn assemble_test_harness(problem: &Problem) -> TestHarnessText {
    let joined = problem.tests.join("\n");
    let body = match (problem.source_format, problem.entry_point.as_deref()) {
        (SourceFormat::Humaneval, Some(entry)) => {
            format!("{}\n\n\ncheck({entry})", joined.trim_matches('\n'))
        }
        (SourceFormat::BigcodebenchLite, _) => format!(
            "{}\n\n\nimport unittest as _capsule_unittest\n_capsule_unittest.main(argv=[\"main\"], verbosity=1)",
            joined.trim_matches('\n')
        ),
        _ => joined,
    };
    TestHarnessText { body }
}
