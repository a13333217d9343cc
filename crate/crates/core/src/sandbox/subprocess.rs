use std::path::Path;
use std::process::Command;
use std::time::Duration;

use super::process::run_with_timeout;
use super::{
    relativize, status_for, workspace_prefixes, DepsCache, ExecBackend, ExecError, ExecSettings,
    ExecutionResult, Workspace, MAIN_FILE,
};

/// Runs the main file with a local interpreter in a scrubbed environment.
/// No network isolation; meant for CI and desk-scale runs.
#[derive(Debug)]
pub struct SubprocessBackend {
    settings: ExecSettings,
    deps: DepsCache,
}

impl SubprocessBackend {
    pub fn new(settings: ExecSettings) -> Self {
        let deps = DepsCache::new(settings.deps_cache_dir.join("subprocess"));
        Self { settings, deps }
    }

    fn base_command(&self, cwd: &Path) -> Command {
        let mut cmd = Command::new(&self.settings.python);
        cmd.current_dir(cwd)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
            .env("HOME", cwd)
            .env("LANG", "C.UTF-8")
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONUNBUFFERED", "1");
        cmd
    }

    fn install(&self, ws: &Workspace) -> Result<Option<std::path::PathBuf>, ExecutionResult> {
        if ws.requirements.is_empty() {
            return Ok(None);
        }
        let timeout = self.settings.install_timeout;
        let result = self.deps.get_or_install(&ws.requirements, |target| {
            let mut cmd = self.base_command(&ws.root);
            cmd.args(["-m", "pip", "install", "--quiet", "--disable-pip-version-check", "--target"])
                .arg(target)
                .args(["-r", super::REQUIREMENTS_FILE]);
            match run_with_timeout(cmd, timeout, &self.settings.cancel, || {}) {
                Ok(run) if run.exit_code == Some(0) => Ok(()),
                Ok(run) if run.timed_out => Err((format!("requirements installation timed out\n{}", run.stderr.text), -1)),
                Ok(run) => Err((run.stderr.text, run.exit_code.unwrap_or(-1))),
                Err(e) => Err((format!("cannot start installer: {e}"), -1)),
            }
        });
        result.map(Some).map_err(|(stderr, code)| ExecutionResult::setup_failure(stderr, code, timeout))
    }
}

impl ExecBackend for SubprocessBackend {
    fn name(&self) -> &'static str {
        "subprocess"
    }

    fn execute(&self, ws: &Workspace, timeout: Duration) -> Result<ExecutionResult, ExecError> {
        let deps = match self.install(ws) {
            Ok(d) => d,
            Err(mut setup) => {
                setup.timeout_secs = timeout.as_secs_f64();
                return Ok(setup);
            }
        };
        let mut cmd = self.base_command(&ws.root);
        cmd.args(["-s", "-B", MAIN_FILE]);
        if let Some(d) = deps {
            cmd.env("PYTHONPATH", d);
        }
        let run = run_with_timeout(cmd, timeout, &self.settings.cancel, || {}).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                ExecError::EngineUnavailable(format!("interpreter '{}' not found", self.settings.python))
            } else {
                ExecError::Workspace(e)
            }
        })?;
        if run.cancelled {
            return Err(ExecError::Cancelled);
        }
        let prefixes = workspace_prefixes(&ws.root);
        Ok(ExecutionResult {
            status: status_for(run.exit_code, run.timed_out),
            exit_code: run.exit_code.unwrap_or(-1),
            stdout: relativize(&run.stdout.text, &prefixes),
            stderr: relativize(&run.stderr.text, &prefixes),
            duration_secs: run.duration.as_secs_f64(),
            stdout_bytes: run.stdout.total_bytes,
            stderr_bytes: run.stderr.total_bytes,
            timeout_secs: timeout.as_secs_f64(),
        })
    }
}
