//! Signature inference from the first test case.
//!
//! Given `assert foo(4) == 16` this produces a hint naming `foo`, a typed
//! signature `foo(arg_int: int)` and the example call `foo(4)`. Only the
//! left side of the comparison is ever looked at, so the expected output
//! cannot leak into the prompt.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Problem;
use crate::scan::{self, ScanError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiteralKind {
    Int,
    Float,
    Str,
    Bool,
    List,
    Dict,
    Tuple,
    Set,
    None,
    Other,
}

impl LiteralKind {
    pub fn name(self) -> &'static str {
        match self {
            LiteralKind::Int => "int",
            LiteralKind::Float => "float",
            LiteralKind::Str => "str",
            LiteralKind::Bool => "bool",
            LiteralKind::List => "list",
            LiteralKind::Dict => "dict",
            LiteralKind::Tuple => "tuple",
            LiteralKind::Set => "set",
            LiteralKind::None => "none",
            LiteralKind::Other => "other",
        }
    }

    pub fn annotation(self) -> &'static str {
        match self {
            LiteralKind::None => "None",
            LiteralKind::Other => "Any",
            k => k.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallArg {
    /// Source text of the argument, keyword prefix included.
    pub literal_text: String,
    pub literal_kind: LiteralKind,
    pub keyword: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallShape {
    pub function_name: String,
    pub args: Vec<CallArg>,
}

impl CallShape {
    pub fn call_text(&self) -> String {
        let args: Vec<&str> = self.args.iter().map(|a| a.literal_text.as_str()).collect();
        format!("{}({})", self.function_name, args.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureHint {
    pub function_name: String,
    pub signature_text: String,
    pub example_call: String,
    pub rendered_hint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("problem has no tests")]
    NoTests,
    #[error("test does not start with an assert statement")]
    NotAnAssert,
    #[error("no call expression found in assert")]
    NoCall,
    #[error("callee '{0}' is not a plain function name")]
    InvalidCallee(String),
    #[error("unbalanced brackets in assert")]
    Unbalanced,
    #[error("unterminated string literal in assert")]
    UnterminatedString,
}

impl From<ScanError> for SignatureError {
    fn from(e: ScanError) -> Self {
        match e {
            ScanError::Unbalanced => SignatureError::Unbalanced,
            ScanError::UnterminatedString => SignatureError::UnterminatedString,
        }
    }
}

/// Builtins that commonly wrap the call under test, e.g.
/// `assert set(foo(x)) == {...}` or `assert math.isclose(foo(2), 0.5)`.
const WRAPPERS: &[&str] = &[
    "set", "frozenset", "sorted", "list", "tuple", "round", "abs", "len", "str", "int", "float",
    "bool", "sum", "isclose", "math.isclose", "math.fabs",
];

pub fn parse_assert(test_text: &str) -> Result<CallShape, SignatureError> {
    let text = test_text.trim();
    let rest = text.strip_prefix("assert").ok_or(SignatureError::NotAnAssert)?;
    if !rest.starts_with(|c: char| c.is_whitespace() || c == '(') {
        return Err(SignatureError::NotAnAssert);
    }
    let rest = strip_comment(rest)?;
    // `assert cond, "message"`
    let condition = scan::split_top_level(rest, b',')?[0];
    let lhs = left_of_comparison(condition)?;
    let lhs = unwrap_parens(strip_not(lhs.trim()));

    let (callee, args) = leading_call(lhs)?.ok_or(SignatureError::NoCall)?;
    let (callee, args) = descend_wrappers(callee, args)?;
    if !scan::is_identifier(callee) {
        return Err(SignatureError::InvalidCallee(callee.to_string()));
    }

    let args = scan::split_top_level(args, b',')?
        .into_iter()
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| {
            let (keyword, value) = split_keyword(a);
            CallArg {
                literal_text: a.to_string(),
                literal_kind: classify_literal(value),
                keyword: keyword.map(str::to_string),
            }
        })
        .collect();

    Ok(CallShape { function_name: callee.to_string(), args })
}

fn strip_comment(s: &str) -> Result<&str, SignatureError> {
    let mut cut = None;
    scan::walk_top_level(s, |i, c| {
        if c == b'#' {
            cut = Some(i);
            false
        } else {
            true
        }
    })?;
    Ok(match cut {
        Some(i) => &s[..i],
        None => s,
    })
}

fn strip_not(s: &str) -> &str {
    match s.strip_prefix("not") {
        Some(rest) if rest.starts_with(|c: char| c.is_whitespace() || c == '(') => rest.trim_start(),
        _ => s,
    }
}

fn unwrap_parens(mut s: &str) -> &str {
    while scan::is_wrapped(s, b'(') {
        let inner = s[1..s.len() - 1].trim();
        match scan::split_top_level(inner, b',') {
            Ok(parts) if parts.len() == 1 => s = inner,
            _ => break,
        }
    }
    s
}

/// Text before the first depth-zero comparison operator.
fn left_of_comparison(s: &str) -> Result<&str, SignatureError> {
    let b = s.as_bytes();
    let mut cut = None;
    scan::walk_top_level(s, |i, c| {
        let next = b.get(i + 1).copied();
        let prev = if i > 0 { Some(b[i - 1]) } else { None };
        let hit = match c {
            b'=' => next == Some(b'=') && !matches!(prev, Some(b'=' | b'!' | b'<' | b'>')),
            b'!' => next == Some(b'='),
            b'<' | b'>' => next != Some(c) && prev != Some(c) && prev != Some(b'-'),
            b' ' | b'\t' => {
                let tail = &s[i + 1..];
                ["is ", "in ", "not in ", "is not "]
                    .iter()
                    .any(|kw| tail.starts_with(kw))
            }
            _ => false,
        };
        if hit {
            cut = Some(i);
        }
        !hit
    })?;
    Ok(match cut {
        Some(i) => &s[..i],
        None => s,
    })
}

/// Splits `name(args)...` into the dotted callee and the argument text.
fn leading_call(s: &str) -> Result<Option<(&str, &str)>, SignatureError> {
    let s = s.trim_start();
    let name_len = s
        .char_indices()
        .find(|&(_, c)| !(c == '_' || c == '.' || c.is_alphanumeric()))
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let callee = &s[..name_len];
    if callee.is_empty() || callee.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
        return Ok(None);
    }
    let after = &s[name_len..];
    let open = name_len + (after.len() - after.trim_start().len());
    if s.as_bytes().get(open) != Some(&b'(') {
        return Ok(None);
    }
    let close = scan::matching_close(s.as_bytes(), open)?;
    Ok(Some((callee, &s[open + 1..close])))
}

fn descend_wrappers<'a>(
    mut callee: &'a str,
    mut args: &'a str,
) -> Result<(&'a str, &'a str), SignatureError> {
    while WRAPPERS.contains(&callee) {
        let first = unwrap_parens(scan::split_top_level(args, b',')?[0].trim());
        match leading_call(first)? {
            Some((inner, inner_args)) => {
                callee = inner;
                args = inner_args;
            }
            None => break,
        }
    }
    Ok((callee, args))
}

fn split_keyword(arg: &str) -> (Option<&str>, &str) {
    if let Some(eq) = arg.find('=') {
        let (name, rest) = (arg[..eq].trim(), &arg[eq + 1..]);
        if scan::is_identifier(name) && !rest.starts_with('=') {
            return (Some(name), rest.trim());
        }
    }
    (None, arg)
}

/// Classifies an argument by its surface syntax. Total: anything not
/// recognised is [`LiteralKind::Other`].
pub fn classify_literal(text: &str) -> LiteralKind {
    let t = text.trim();
    match t {
        "None" => return LiteralKind::None,
        "True" | "False" => return LiteralKind::Bool,
        "" => return LiteralKind::Other,
        _ => {}
    }
    if let Some(kind) = classify_string(t) {
        return kind;
    }
    if let Some(kind) = classify_number(t) {
        return kind;
    }
    match t.as_bytes()[0] {
        b'[' if scan::is_wrapped(t, b'[') => return LiteralKind::List,
        b'(' if scan::is_wrapped(t, b'(') => {
            let inner = t[1..t.len() - 1].trim();
            if inner.is_empty() {
                return LiteralKind::Tuple;
            }
            return match scan::split_top_level(inner, b',') {
                Ok(parts) if parts.len() > 1 => LiteralKind::Tuple,
                Ok(_) => classify_literal(inner),
                Err(_) => LiteralKind::Other,
            };
        }
        b'{' if scan::is_wrapped(t, b'{') => {
            let inner = t[1..t.len() - 1].trim();
            if inner.is_empty() || inner.starts_with("**") {
                return LiteralKind::Dict;
            }
            let mut colon = false;
            let _ = scan::walk_top_level(inner, |_, c| {
                colon |= c == b':';
                !colon
            });
            return if colon { LiteralKind::Dict } else { LiteralKind::Set };
        }
        _ => {}
    }
    // Constructor calls such as float('inf') or set().
    if let Ok(Some((callee, _))) = leading_call(t) {
        let whole = t.ends_with(')') && scan::is_wrapped(&t[callee.len()..], b'(');
        if whole {
            return match callee {
                "int" => LiteralKind::Int,
                "float" => LiteralKind::Float,
                "str" => LiteralKind::Str,
                "bool" => LiteralKind::Bool,
                "list" => LiteralKind::List,
                "dict" => LiteralKind::Dict,
                "tuple" => LiteralKind::Tuple,
                "set" => LiteralKind::Set,
                _ => LiteralKind::Other,
            };
        }
    }
    LiteralKind::Other
}

/// One string literal or implicit concatenation of several.
fn classify_string(t: &str) -> Option<LiteralKind> {
    let b = t.as_bytes();
    let mut i = 0;
    let mut kind = None;
    while i < b.len() {
        let prefix_len = b[i..].iter().take_while(|c| c.is_ascii_alphabetic()).count();
        let prefix = &t[i..i + prefix_len];
        if prefix_len > 2 || !prefix.chars().all(|c| "rRbBuUfF".contains(c)) {
            return None;
        }
        let q = i + prefix_len;
        if q >= b.len() || !(b[q] == b'\'' || b[q] == b'"') {
            return None;
        }
        let end = scan::skip_string(b, q)?;
        let this = if prefix.contains(['b', 'B']) { LiteralKind::Other } else { LiteralKind::Str };
        kind = match kind {
            None => Some(this),
            Some(k) if k == this => Some(k),
            Some(_) => Some(LiteralKind::Other),
        };
        i = end;
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
    }
    kind
}

fn classify_number(t: &str) -> Option<LiteralKind> {
    let body = t.strip_prefix(['-', '+']).unwrap_or(t).trim_start();
    if body.is_empty() {
        return None;
    }
    let lower = body.to_ascii_lowercase();
    let digits = |s: &str, radix: u32| !s.is_empty() && s.chars().all(|c| c == '_' || c.is_digit(radix));
    if let Some(rest) = lower.strip_prefix("0x") {
        return digits(rest, 16).then_some(LiteralKind::Int);
    }
    if let Some(rest) = lower.strip_prefix("0o") {
        return digits(rest, 8).then_some(LiteralKind::Int);
    }
    if let Some(rest) = lower.strip_prefix("0b") {
        return digits(rest, 2).then_some(LiteralKind::Int);
    }
    if digits(&lower, 10) {
        return Some(LiteralKind::Int);
    }
    if lower.ends_with('j') {
        return None;
    }
    let (mantissa, exponent) = match lower.split_once('e') {
        Some((m, e)) => (m, Some(e)),
        None => (lower.as_str(), None),
    };
    let mantissa_ok = match mantissa.split_once('.') {
        Some((a, b)) => (!a.is_empty() || !b.is_empty()) && (a.is_empty() || digits(a, 10)) && (b.is_empty() || digits(b, 10)),
        None => exponent.is_some() && digits(mantissa, 10),
    };
    let exponent_ok = exponent.is_none_or(|e| digits(e.strip_prefix(['-', '+']).unwrap_or(e), 10));
    (mantissa_ok && exponent_ok).then_some(LiteralKind::Float)
}

/// Parameter names: `arg_<kind>`, with 1-based positional suffixes when a
/// kind repeats. Keyword arguments keep their keyword.
fn parameter_names(shape: &CallShape) -> Vec<String> {
    let mut totals: HashMap<LiteralKind, usize> = HashMap::new();
    for a in shape.args.iter().filter(|a| a.keyword.is_none()) {
        *totals.entry(a.literal_kind).or_default() += 1;
    }
    let mut seen: HashMap<LiteralKind, usize> = HashMap::new();
    shape
        .args
        .iter()
        .map(|a| match &a.keyword {
            Some(k) => k.clone(),
            None => {
                let n = seen.entry(a.literal_kind).or_default();
                *n += 1;
                if totals[&a.literal_kind] > 1 {
                    format!("arg_{}{}", a.literal_kind.name(), n)
                } else {
                    format!("arg_{}", a.literal_kind.name())
                }
            }
        })
        .collect()
}

pub fn signature_from_shape(shape: &CallShape) -> SignatureHint {
    let params: Vec<String> = parameter_names(shape)
        .into_iter()
        .zip(&shape.args)
        .map(|(name, a)| format!("{name}: {}", a.literal_kind.annotation()))
        .collect();
    let mut hint = SignatureHint {
        function_name: shape.function_name.clone(),
        signature_text: format!("{}({})", shape.function_name, params.join(", ")),
        example_call: shape.call_text(),
        rendered_hint: String::new(),
    };
    hint.rendered_hint = render_hint(&hint);
    hint
}

pub fn infer_signature(problem: &Problem) -> Result<SignatureHint, SignatureError> {
    let first = problem
        .tests
        .iter()
        .flat_map(|t| t.lines())
        .find(|l| !l.trim().is_empty())
        .ok_or(SignatureError::NoTests)?;
    Ok(signature_from_shape(&parse_assert(first)?))
}

pub fn render_hint(hint: &SignatureHint) -> String {
    format!(
        "### Required function name for your reference '{}()'\n\
         ### Function signature for your reference - {}\n\
         ### An example function call from private test cases - {}",
        hint.function_name, hint.signature_text, hint.example_call
    )
}

impl fmt::Display for SignatureHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered_hint)
    }
}
