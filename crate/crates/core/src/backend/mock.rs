use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult};

/// Canned responses per problem id, with a fallback sequence.
///
/// ```json
/// {"problems": {"toy/1": ["bad", "good"]}, "default": ["good"]}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub problems: HashMap<String, Vec<String>>,
    #[serde(default)]
    pub default: Vec<String>,
}

/// Returns scripted texts in order. Each problem has its own cursor; once a
/// sequence runs out its last entry repeats.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    cursors: Mutex<HashMap<String, usize>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script, cursors: Mutex::new(HashMap::new()) }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("invalid mock script {}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    fn sequence(&self, problem_id: &str) -> &[String] {
        self.script.problems.get(problem_id).map(Vec::as_slice).unwrap_or(&self.script.default)
    }
}

impl CompletionBackend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let seq = self.sequence(&request.problem_id);
        if seq.is_empty() {
            return Err(BackendError::BackendUnavailable(format!("mock script has no responses for '{}'", request.problem_id)));
        }
        let index = {
            let mut cursors = self.cursors.lock().expect("mock cursor poisoned");
            let c = cursors.entry(request.problem_id.clone()).or_insert(0);
            let i = *c;
            *c += 1;
            i
        };
        let text = seq[index.min(seq.len() - 1)].clone();
        Ok(CompletionResult::heuristic(request, text))
    }
}
