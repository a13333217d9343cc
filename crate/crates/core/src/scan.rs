//! Byte-level helpers for scanning subject-language expressions: string
//! literal skipping and bracket matching. Multi-byte UTF-8 sequences never
//! contain ASCII bytes, so scanning bytes is safe for the structural
//! characters looked at here.

/// Returns the index just past the string literal whose opening quote is at
/// `start`, or `None` if the literal is unterminated.
pub(crate) fn skip_string(b: &[u8], start: usize) -> Option<usize> {
    let q = b[start];
    debug_assert!(q == b'\'' || q == b'"');
    let triple = b.len() >= start + 3 && b[start + 1] == q && b[start + 2] == q;
    let mut i = if triple { start + 3 } else { start + 1 };
    while i < b.len() {
        match b[i] {
            b'\\' => i += 2,
            c if c == q => {
                if !triple {
                    return Some(i + 1);
                }
                if i + 2 < b.len() && b[i + 1] == q && b[i + 2] == q {
                    return Some(i + 3);
                }
                i += 1;
            }
            b'\n' if !triple => return None,
            _ => i += 1,
        }
    }
    None
}

pub(crate) fn closing(open: u8) -> u8 {
    match open {
        b'(' => b')',
        b'[' => b']',
        b'{' => b'}',
        _ => unreachable!("not an opening bracket"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ScanError {
    Unbalanced,
    UnterminatedString,
}

/// Index of the bracket closing the one at `open_idx`.
pub(crate) fn matching_close(b: &[u8], open_idx: usize) -> Result<usize, ScanError> {
    let mut stack = vec![closing(b[open_idx])];
    let mut i = open_idx + 1;
    while i < b.len() {
        match b[i] {
            b'\'' | b'"' => {
                i = skip_string(b, i).ok_or(ScanError::UnterminatedString)?;
                continue;
            }
            c @ (b'(' | b'[' | b'{') => stack.push(closing(c)),
            c @ (b')' | b']' | b'}') => {
                if stack.pop() != Some(c) {
                    return Err(ScanError::Unbalanced);
                }
                if stack.is_empty() {
                    return Ok(i);
                }
            }
            _ => {}
        }
        i += 1;
    }
    Err(ScanError::Unbalanced)
}

/// Visits every byte that sits at bracket depth zero outside string
/// literals. The visitor returns `false` to stop early. Errors on unbalanced
/// brackets or unterminated strings.
pub(crate) fn walk_top_level(
    s: &str,
    mut visit: impl FnMut(usize, u8) -> bool,
) -> Result<(), ScanError> {
    let b = s.as_bytes();
    let mut stack: Vec<u8> = Vec::new();
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'\'' | b'"' => {
                i = skip_string(b, i).ok_or(ScanError::UnterminatedString)?;
                continue;
            }
            c @ (b'(' | b'[' | b'{') => stack.push(closing(c)),
            c @ (b')' | b']' | b'}') => {
                if stack.pop() != Some(c) {
                    return Err(ScanError::Unbalanced);
                }
            }
            c if stack.is_empty() => {
                if !visit(i, c) {
                    return Ok(());
                }
            }
            _ => {}
        }
        i += 1;
    }
    if stack.is_empty() {
        Ok(())
    } else {
        Err(ScanError::Unbalanced)
    }
}

/// Splits on depth-zero occurrences of `sep`.
pub(crate) fn split_top_level(s: &str, sep: u8) -> Result<Vec<&str>, ScanError> {
    let mut cuts = Vec::new();
    walk_top_level(s, |i, c| {
        if c == sep {
            cuts.push(i);
        }
        true
    })?;
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for c in cuts {
        out.push(&s[start..c]);
        start = c + 1;
    }
    out.push(&s[start..]);
    Ok(out)
}

/// True when the first byte of `s` opens a bracket whose partner is the last byte.
pub(crate) fn is_wrapped(s: &str, open: u8) -> bool {
    let b = s.as_bytes();
    !b.is_empty() && b[0] == open && matching_close(b, 0) == Ok(b.len() - 1)
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_alphanumeric())
}
