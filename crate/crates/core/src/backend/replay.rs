use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{request_digest, BackendError, CompletionBackend, CompletionRequest, CompletionResult, TokenSource};

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_digest: String,
    pub response_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Serves completions from a transcript. Entries are matched by request
/// digest and consumed in recorded order, so concurrent workers replay
/// correctly regardless of scheduling.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    entries: Mutex<HashMap<String, VecDeque<TranscriptEntry>>>,
}

impl ReplayBackend {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut map: HashMap<String, VecDeque<TranscriptEntry>> = HashMap::new();
        for e in entries {
            map.entry(e.request_digest.clone()).or_default().push_back(e);
        }
        Self { entries: Mutex::new(map) }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let cfg = |m: String| BackendError::Config(format!("transcript {}: {m}", path.display()));
        let file = File::open(path).map_err(|e| cfg(e.to_string()))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| cfg(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| cfg(format!("line {}: {e}", n + 1)))?);
        }
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().expect("replay poisoned").values().map(VecDeque::len).sum()
    }
}

impl CompletionBackend for ReplayBackend {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let digest = request_digest(request);
        let entry = self.entries.lock().expect("replay poisoned").get_mut(&digest).and_then(VecDeque::pop_front);
        match entry {
            Some(e) => Ok(CompletionResult {
                text: e.response_text,
                prompt_tokens: e.prompt_tokens,
                completion_tokens: e.completion_tokens,
                token_source: TokenSource::BackendReported,
            }),
            None => Err(BackendError::ReplayExhausted { digest, problem_id: request.problem_id.clone() }),
        }
    }
}

/// Wraps a backend and appends every successful call to a transcript file.
pub struct RecordingBackend {
    inner: Box<dyn CompletionBackend>,
    out: Mutex<BufWriter<File>>,
}

impl RecordingBackend {
    pub fn create(inner: Box<dyn CompletionBackend>, path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = File::create(path)?;
        Ok(Self { inner, out: Mutex::new(BufWriter::new(file)) })
    }
}

impl CompletionBackend for RecordingBackend {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let result = self.inner.complete(request)?;
        let entry = TranscriptEntry {
            request_digest: request_digest(request),
            response_text: result.text.clone(),
            prompt_tokens: result.prompt_tokens,
            completion_tokens: result.completion_tokens,
        };
        let line = serde_json::to_string(&entry).expect("transcript entry serializes");
        let mut out = self.out.lock().expect("transcript writer poisoned");
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(|e| BackendError::BackendUnavailable(format!("cannot write transcript: {e}")))?;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::request;
    use super::super::{MockBackend, MockScript};
    use super::*;

    fn recorded(n: usize) -> (tempfile::TempDir, std::path::PathBuf, Vec<String>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mock = MockBackend::new(MockScript { default: vec!["one".into(), "two".into(), "three".into()], ..Default::default() });
        let rec = RecordingBackend::create(Box::new(mock), &path).unwrap();
        let texts = (0..n).map(|i| rec.complete(&request("p", &format!("u{i}"))).unwrap().text).collect();
        (dir, path, texts)
    }

    #[test]
    fn three_calls_three_entries() {
        let (_d, path, _) = recorded(3);
        assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 3);
    }

    #[test]
    fn transcript_fields_exact() {
        let (_d, path, _) = recorded(1);
        let v: serde_json::Value = serde_json::from_str(std::fs::read_to_string(path).unwrap().lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["completion_tokens", "prompt_tokens", "request_digest", "response_text"]);
    }

    #[test]
    fn replay_round_trip_then_exhaustion() {
        let (_d, path, texts) = recorded(2);
        let replay = ReplayBackend::load(&path).unwrap();
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(&replay.complete(&request("p", &format!("u{i}"))).unwrap().text, t);
        }
        assert!(matches!(replay.complete(&request("p", "u2")), Err(BackendError::ReplayExhausted { .. })));
    }

    #[test]
    fn identical_requests_replay_in_order() {
        let e = |t: &str| TranscriptEntry {
            request_digest: request_digest(&request("p", "u")),
            response_text: t.into(),
            prompt_tokens: 1,
            completion_tokens: 1,
        };
        let r = ReplayBackend::new([e("a"), e("b")]);
        assert_eq!(r.complete(&request("p", "u")).unwrap().text, "a");
        assert_eq!(r.complete(&request("p", "u")).unwrap().text, "b");
        assert_eq!(r.remaining(), 0);
    }
}
