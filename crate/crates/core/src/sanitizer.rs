//! Example-call detection.
//!
//! Generated solutions often end with a demonstration such as `foo(4)` or
//! `print(foo(4))`, or an `if __name__ == "__main__":` block. The main file
//! is executed directly, so those would run before (and outside) the tests.
//! This module removes them with a line scanner that understands
//! indentation, bracket continuation, comments and (triple-quoted) strings,
//! without building a syntax tree.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::scan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedStatement {
    /// 1-based inclusive physical line span in the input.
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizedCode {
    pub code: String,
    pub removed: Vec<RemovedStatement>,
    pub defined_names: BTreeSet<String>,
    /// Assignments whose right side calls a defined name. Kept, but noted.
    #[serde(default)]
    pub suspicious: Vec<RemovedStatement>,
    /// Set when the input could not be scanned and was returned unchanged.
    #[serde(default)]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineKind {
    Blank,
    Comment,
    Code,
}

/// One logical line: physical lines joined by bracket, backslash or
/// triple-quote continuation.
#[derive(Debug, Clone)]
struct LogicalLine {
    first: usize,
    last: usize,
    indent: usize,
    kind: LineKind,
    /// Source text with comments stripped, physical lines joined by '\n'.
    code: String,
}

fn split_physical(code: &str) -> Vec<&str> {
    code.split_inclusive('\n').collect()
}

fn logical_lines(lines: &[&str]) -> Result<Vec<LogicalLine>, String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let first = i;
        let line = lines[i].trim_end_matches(['\n', '\r']);
        let stripped = line.trim_start();
        let indent = line.len() - stripped.len();
        if stripped.is_empty() {
            out.push(LogicalLine { first, last: i, indent, kind: LineKind::Blank, code: String::new() });
            i += 1;
            continue;
        }
        if stripped.starts_with('#') {
            out.push(LogicalLine { first, last: i, indent, kind: LineKind::Comment, code: String::new() });
            i += 1;
            continue;
        }

        let mut code = String::new();
        let mut depth: Vec<u8> = Vec::new();
        let mut triple: Option<u8> = None;
        loop {
            let phys = lines[i].trim_end_matches(['\n', '\r']);
            let b = phys.as_bytes();
            let mut j = 0;
            let mut cut = b.len();
            let mut continued = false;
            while j < b.len() {
                if let Some(q) = triple {
                    if b[j] == b'\\' {
                        j += 2;
                        continue;
                    }
                    if b[j] == q && b.get(j + 1) == Some(&q) && b.get(j + 2) == Some(&q) {
                        triple = None;
                        j += 3;
                        continue;
                    }
                    j += 1;
                    continue;
                }
                match b[j] {
                    b'#' => {
                        cut = j;
                        break;
                    }
                    q @ (b'\'' | b'"') => {
                        if b.get(j + 1) == Some(&q) && b.get(j + 2) == Some(&q) {
                            match scan::skip_string(b, j) {
                                Some(end) => j = end,
                                None => {
                                    triple = Some(q);
                                    j += 3;
                                }
                            }
                        } else {
                            match scan::skip_string(b, j) {
                                Some(end) => j = end,
                                None if phys.ends_with('\\') => {
                                    return Err(format!("line {}: string continued with backslash", i + 1));
                                }
                                None => return Err(format!("line {}: unterminated string literal", i + 1)),
                            }
                        }
                        continue;
                    }
                    c @ (b'(' | b'[' | b'{') => depth.push(scan::closing(c)),
                    c @ (b')' | b']' | b'}') => {
                        if depth.pop() != Some(c) {
                            return Err(format!("line {}: unbalanced '{}'", i + 1, c as char));
                        }
                    }
                    _ => {}
                }
                j += 1;
            }
            let kept = &phys[..cut.min(phys.len())];
            if triple.is_none() && cut == b.len() && kept.ends_with('\\') {
                continued = true;
            }
            if !code.is_empty() {
                code.push('\n');
            }
            code.push_str(kept);
            if triple.is_some() || !depth.is_empty() || continued {
                i += 1;
                if i >= lines.len() {
                    return Err("unexpected end of input inside a bracket, string or continuation".into());
                }
                continue;
            }
            break;
        }
        out.push(LogicalLine { first, last: i, indent, kind: LineKind::Code, code: code.trim().to_string() });
        i += 1;
    }
    Ok(out)
}

/// A top-level statement together with its indented body and clauses.
#[derive(Debug)]
struct TopStatement {
    /// Index into the logical lines of the header.
    header: usize,
    first_line: usize,
    last_line: usize,
}

fn starts_with_keyword(s: &str, kw: &str) -> bool {
    s.strip_prefix(kw)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with(|c: char| c == ':' || c == '(' || c.is_whitespace()))
}

fn is_clause(s: &str) -> bool {
    ["else", "elif", "except", "finally"].iter().any(|k| starts_with_keyword(s, k))
}

fn top_statements(logical: &[LogicalLine]) -> Vec<TopStatement> {
    let mut out: Vec<TopStatement> = Vec::new();
    let mut pending_decorator: Option<usize> = None;
    for (idx, l) in logical.iter().enumerate() {
        if l.kind != LineKind::Code {
            continue;
        }
        let extends_previous = l.indent > 0 || is_clause(&l.code);
        if extends_previous {
            if let Some(last) = out.last_mut() {
                last.last_line = l.last;
                continue;
            }
        }
        if l.code.starts_with('@') {
            pending_decorator.get_or_insert(l.first);
            continue;
        }
        let first_line = pending_decorator.take().unwrap_or(l.first);
        out.push(TopStatement { header: idx, first_line, last_line: l.last });
    }
    out
}

fn definition_name(code: &str) -> Option<&str> {
    let rest = code
        .strip_prefix("async")
        .map(str::trim_start)
        .filter(|r| starts_with_keyword(r, "def"))
        .unwrap_or(code);
    let rest = if starts_with_keyword(rest, "def") {
        &rest[3..]
    } else if starts_with_keyword(rest, "class") {
        &rest[5..]
    } else {
        return None;
    };
    let rest = rest.trim_start();
    let end = rest.find(|c: char| !(c == '_' || c.is_alphanumeric())).unwrap_or(rest.len());
    let name = &rest[..end];
    scan::is_identifier(name).then_some(name)
}

/// Names bound by top-level `def`, `async def` and `class` statements.
pub fn scan_definitions(code: &str) -> BTreeSet<String> {
    let lines = split_physical(code);
    let Ok(logical) = logical_lines(&lines) else {
        return BTreeSet::new();
    };
    definitions(&logical)
}

fn definitions(logical: &[LogicalLine]) -> BTreeSet<String> {
    top_statements(logical)
        .iter()
        .filter_map(|s| definition_name(&logical[s.header].code))
        .map(str::to_string)
        .collect()
}

fn is_main_guard(code: &str) -> bool {
    let Some(cond) = code.strip_prefix("if") else {
        return false;
    };
    if !cond.starts_with([' ', '\t', '(']) {
        return false;
    }
    let cond = cond.split(':').next().unwrap_or("");
    let compact: String = cond.chars().filter(|c| !c.is_whitespace() && *c != '(' && *c != ')').collect();
    let compact = compact.replace('\'', "\"");
    compact == "__name__==\"__main__\"" || compact == "\"__main__\"==__name__"
}

/// `name(...)` exactly, returning the callee.
fn whole_call(expr: &str) -> Option<&str> {
    let expr = expr.trim();
    let open = expr.find('(')?;
    let callee = expr[..open].trim_end();
    if !scan::is_identifier(callee) {
        return None;
    }
    let close = scan::matching_close(expr.as_bytes(), open).ok()?;
    (close == expr.len() - 1).then_some(callee)
}

fn leading_callee(expr: &str) -> Option<&str> {
    let expr = expr.trim();
    let open = expr.find('(')?;
    let callee = expr[..open].trim_end();
    scan::is_identifier(callee).then_some(callee)
}

/// Whether a simple statement is an example call to one of `names`.
fn is_example_call(stmt: &str, names: &BTreeSet<String>) -> bool {
    let parts = match scan::split_top_level(stmt, b';') {
        Ok(p) => p,
        Err(_) => return false,
    };
    let parts: Vec<&str> = parts.into_iter().map(str::trim).filter(|p| !p.is_empty()).collect();
    !parts.is_empty() && parts.iter().all(|p| single_example_call(p, names))
}

fn single_example_call(stmt: &str, names: &BTreeSet<String>) -> bool {
    let stmt = stmt.strip_prefix("await ").unwrap_or(stmt);
    match whole_call(stmt) {
        Some(callee) if names.contains(callee) => true,
        Some("print") => {
            let open = stmt.find('(').unwrap_or(0);
            let inner = &stmt[open + 1..stmt.len() - 1];
            scan::split_top_level(inner, b',')
                .ok()
                .and_then(|args| args.into_iter().find(|a| !a.trim().is_empty()))
                .and_then(leading_callee)
                .is_some_and(|c| names.contains(c))
        }
        _ => false,
    }
}

fn assignment_rhs(stmt: &str) -> Option<&str> {
    let b = stmt.as_bytes();
    let mut eq = None;
    let _ = scan::walk_top_level(stmt, |i, c| {
        if c == b'=' {
            let prev = if i > 0 { b[i - 1] } else { b' ' };
            let next = b.get(i + 1).copied().unwrap_or(b' ');
            if next != b'=' && !matches!(prev, b'=' | b'!' | b'<' | b'>') {
                eq = Some(i);
                return false;
            }
        }
        true
    });
    eq.map(|i| &stmt[i + 1..])
}

const COMPOUND: &[&str] = &["if", "for", "while", "with", "try", "match", "async", "def", "class"];

pub fn strip_example_calls(code: &str) -> SanitizedCode {
    let lines = split_physical(code);
    let logical = match logical_lines(&lines) {
        Ok(l) => l,
        Err(e) => {
            log::warn!("example-call scan skipped: {e}");
            return SanitizedCode { code: code.to_string(), warning: Some(e), ..Default::default() };
        }
    };
    let names = definitions(&logical);
    let mut removed = Vec::new();
    let mut suspicious = Vec::new();

    for stmt in top_statements(&logical) {
        let header = &logical[stmt.header].code;
        let span_text = || lines[stmt.first_line..=stmt.last_line].concat();
        let record = || RemovedStatement {
            start_line: stmt.first_line + 1,
            end_line: stmt.last_line + 1,
            text: span_text(),
        };
        if is_main_guard(header) {
            removed.push(record());
            continue;
        }
        if COMPOUND.iter().any(|k| starts_with_keyword(header, k)) {
            continue;
        }
        if is_example_call(header, &names) {
            removed.push(record());
        } else if let Some(rhs) = assignment_rhs(header) {
            if leading_callee(rhs).is_some_and(|c| names.contains(c)) {
                log::warn!("keeping top-level assignment that calls a defined function: {}", header);
                suspicious.push(record());
            }
        }
    }

    let mut keep = vec![true; lines.len()];
    for r in &removed {
        for k in &mut keep[r.start_line - 1..r.end_line] {
            *k = false;
        }
    }
    let code = lines.iter().zip(&keep).filter(|(_, k)| **k).map(|(l, _)| *l).collect();
    SanitizedCode { code, removed, defined_names: names, suspicious, warning: None }
}
