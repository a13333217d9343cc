//! Prompt construction for generation and fix modes, and parsing of the
//! structured completions they ask for.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Problem;
use crate::digest::code_digest;
use crate::refine::RefinedError;
use crate::signature::SignatureHint;

pub const GENERATION_SYSTEM: &str = include_str!("../assets/generation_system.txt");
pub const FIX_SYSTEM: &str = include_str!("../assets/fix_system.txt");

pub const GENERATION_TEMPLATE_FILE: &str = "generation_system.txt";
pub const FIX_TEMPLATE_FILE: &str = "fix_system.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Generation,
    Fix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub mode: PromptMode,
    pub system_text: String,
    pub user_text: String,
}

/// System prompt texts. Defaults are compiled in; a directory holding
/// `generation_system.txt` and/or `fix_system.txt` overrides them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub generation: String,
    pub fix: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self { generation: GENERATION_SYSTEM.to_string(), fix: FIX_SYSTEM.to_string() }
    }
}

impl PromptTemplates {
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        let read = |name: &str| -> std::io::Result<Option<String>> {
            let path = dir.join(name);
            if path.exists() {
                std::fs::read_to_string(path).map(Some)
            } else {
                Ok(None)
            }
        };
        if let Some(g) = read(GENERATION_TEMPLATE_FILE)? {
            t.generation = g;
        }
        if let Some(f) = read(FIX_TEMPLATE_FILE)? {
            t.fix = f;
        }
        Ok(t)
    }

    pub fn generation_prompt(&self, problem: &Problem, hint: Option<&SignatureHint>) -> PromptBundle {
        let user_text = match hint {
            None => problem.description.clone(),
            Some(h) => format!("{}\n\n{}", problem.description.trim_end_matches('\n'), h.rendered_hint),
        };
        PromptBundle { mode: PromptMode::Generation, system_text: self.generation.clone(), user_text }
    }

    /// Fix-mode prompt. Only the most recent code and its refined error are
    /// included; earlier attempts never reach the model.
    pub fn fix_prompt(&self, problem: &Problem, last_code: &str, refined: &RefinedError) -> PromptBundle {
        let user_text = format!(
            "{}\n\n### Previous solution (code digest {})\n```python\n{}\n```\n\n### Error message\n{}",
            problem.description.trim_end_matches('\n'),
            code_digest(last_code),
            last_code.trim_end_matches('\n'),
            refined.render(),
        );
        PromptBundle { mode: PromptMode::Fix, system_text: self.fix.clone(), user_text }
    }
}

pub fn build_generation_prompt(problem: &Problem, hint: Option<&SignatureHint>) -> PromptBundle {
    PromptTemplates::default().generation_prompt(problem, hint)
}

pub fn build_fix_prompt(problem: &Problem, last_code: &str, refined: &RefinedError) -> PromptBundle {
    PromptTemplates::default().fix_prompt(problem, last_code, refined)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw: String,
    pub reasoning: Option<String>,
    pub requirements: Vec<String>,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("completion contains no fenced code block")]
    MissingCodeSection,
}

struct Heading<'a> {
    line: usize,
    title: &'a str,
}

fn headings<'a>(lines: &[&'a str]) -> Vec<Heading<'a>> {
    let mut in_fence = false;
    let mut out = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        let t = l.trim_start();
        if t.starts_with("```") {
            in_fence = !in_fence;
            continue;
        }
        if !in_fence {
            if let Some(rest) = t.strip_prefix("###") {
                out.push(Heading { line: i, title: rest.trim().trim_end_matches(':').trim() });
            }
        }
    }
    out
}

fn section_body(lines: &[&str], heads: &[Heading], title_matches: impl Fn(&str) -> bool) -> Option<String> {
    let pos = heads.iter().position(|h| title_matches(&h.title.to_ascii_lowercase()))?;
    let start = heads[pos].line + 1;
    let end = heads.get(pos + 1).map(|h| h.line).unwrap_or(lines.len());
    Some(lines[start..end].join("\n").trim().to_string())
}

/// First fenced block starting at or after line `from`. An unclosed fence
/// runs to the end of the text.
fn fenced_block(lines: &[&str], from: usize) -> Option<String> {
    let open = (from..lines.len()).find(|&i| lines[i].trim_start().starts_with("```"))?;
    let close = (open + 1..lines.len())
        .find(|&i| lines[i].trim_start().starts_with("```"))
        .unwrap_or(lines.len());
    Some(lines[open + 1..close].join("\n"))
}

fn is_package_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn parse_requirements(section: &str) -> Vec<String> {
    let mut out = Vec::new();
    for token in section.split([',', '\n']) {
        let token = token
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .trim_matches('`')
            .trim();
        if token.is_empty() || token.eq_ignore_ascii_case("none") || token.eq_ignore_ascii_case("none.") {
            continue;
        }
        // Drop version specifiers and extras: `pandas>=2` -> `pandas`.
        let name = token
            .split(|c: char| matches!(c, '<' | '>' | '=' | '!' | '~' | '[' | ';' | ' ' | '('))
            .next()
            .unwrap_or("")
            .trim();
        if is_package_name(name) {
            if !out.iter().any(|n: &String| n == name) {
                out.push(name.to_string());
            }
        } else {
            log::warn!("dropping invalid requirement token {token:?}");
        }
    }
    out
}

pub fn parse_response(raw: &str) -> Result<ModelResponse, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let heads = headings(&lines);

    let code_from = heads
        .iter()
        .find(|h| h.title.to_ascii_lowercase().starts_with("code"))
        .map(|h| h.line + 1);
    let code = code_from
        .and_then(|from| fenced_block(&lines, from))
        .or_else(|| fenced_block(&lines, 0))
        .ok_or(ParseError::MissingCodeSection)?;
    if code.trim().is_empty() {
        return Err(ParseError::MissingCodeSection);
    }

    let requirements = section_body(&lines, &heads, |t| t.starts_with("requirements"))
        .map(|s| parse_requirements(&s))
        .unwrap_or_default();
    let reasoning = section_body(&lines, &heads, |t| t.contains("reasoning")).filter(|s| !s.is_empty());

    Ok(ModelResponse { raw: raw.to_string(), reasoning, requirements, code })
}
