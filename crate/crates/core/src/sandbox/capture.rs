use std::collections::VecDeque;
use std::io::Read;

/// Per-stream capture cap.
pub const STREAM_CAP: usize = 64 * 1024;

const MARKER_ROOM: usize = 64;

/// Output of one stream, trimmed to [`STREAM_CAP`] by keeping the head and
/// the tail. Tracebacks end with the exception line, so the tail matters as
/// much as the head.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Captured {
    pub text: String,
    pub total_bytes: u64,
    pub truncated: bool,
}

pub(crate) struct CapBuffer {
    head: Vec<u8>,
    tail: VecDeque<u8>,
    half: usize,
    total: u64,
}

impl CapBuffer {
    pub(crate) fn new(cap: usize) -> Self {
        let half = cap.saturating_sub(MARKER_ROOM) / 2;
        Self { head: Vec::new(), tail: VecDeque::new(), half, total: 0 }
    }

    pub(crate) fn push(&mut self, mut chunk: &[u8]) {
        self.total += chunk.len() as u64;
        if self.head.len() < self.half {
            let take = (self.half - self.head.len()).min(chunk.len());
            self.head.extend_from_slice(&chunk[..take]);
            chunk = &chunk[take..];
        }
        self.tail.extend(chunk);
        while self.tail.len() > self.half {
            self.tail.pop_front();
        }
    }

    pub(crate) fn finish(self) -> Captured {
        let kept = (self.head.len() + self.tail.len()) as u64;
        let tail: Vec<u8> = self.tail.into_iter().collect();
        if kept == self.total {
            let mut all = self.head;
            all.extend_from_slice(&tail);
            return Captured {
                text: String::from_utf8_lossy(&all).into_owned(),
                total_bytes: self.total,
                truncated: false,
            };
        }
        // Cut on line boundaries so no partial lines survive.
        let head_end = self.head.iter().rposition(|&b| b == b'\n').map(|i| i + 1).unwrap_or(0);
        let tail_start = tail.iter().position(|&b| b == b'\n').map(|i| i + 1).unwrap_or(tail.len());
        let head = &self.head[..head_end];
        let tail = &tail[tail_start..];
        let omitted = self.total - (head.len() + tail.len()) as u64;
        let mut text = String::from_utf8_lossy(head).into_owned();
        text.push_str(&format!("... [{omitted} bytes omitted] ...\n"));
        text.push_str(&String::from_utf8_lossy(tail));
        Captured { text, total_bytes: self.total, truncated: true }
    }
}

pub(crate) fn capture_stream(mut r: impl Read, cap: usize) -> Captured {
    let mut buf = CapBuffer::new(cap);
    let mut chunk = [0u8; 8192];
    loop {
        match r.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => buf.push(&chunk[..n]),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    buf.finish()
}
