use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::process::run_with_timeout;
use super::{
    relativize, status_for, DepsCache, ExecBackend, ExecError, ExecSettings, ExecutionResult, Workspace,
    ENTRY_SCRIPT,
};

const CONTAINER_ROOT: &str = "/workspace";
const CONTAINER_DEPS: &str = "/deps";
/// `docker run` exits 125 when the engine itself fails.
const ENGINE_FAILURE_EXIT: i32 = 125;

static NEXT_NAME: AtomicU64 = AtomicU64::new(0);

/// Runs the workspace in an OCI container through the engine CLI (`docker`
/// or `podman`). Requirements install in a networked container into a
/// shared cache; the solution itself runs with networking disabled.
#[derive(Debug)]
pub struct ContainerBackend {
    settings: ExecSettings,
    deps: DepsCache,
}

impl ContainerBackend {
    pub fn new(settings: ExecSettings) -> Self {
        let deps = DepsCache::new(settings.deps_cache_dir.join("container"));
        Self { settings, deps }
    }

    fn container_name(&self) -> String {
        format!("capsule-{}-{}", std::process::id(), NEXT_NAME.fetch_add(1, Ordering::Relaxed))
    }

    /// Engine arguments for one run. `deps` is mounted read-only and put on
    /// `PYTHONPATH` when present.
    pub fn run_args(&self, name: &str, root: &Path, deps: Option<&Path>, network: bool, mode: &str) -> Vec<String> {
        let mut args = vec!["run".to_string(), "--rm".into(), "--name".into(), name.to_string()];
        if !network {
            args.extend(["--network".into(), "none".into()]);
        }
        if let Some(mem) = &self.settings.memory_limit {
            args.extend(["--memory".into(), mem.clone()]);
        }
        args.extend(["-v".into(), format!("{}:{CONTAINER_ROOT}", root.display())]);
        if let Some(d) = deps {
            let flag = if network { "" } else { ":ro" };
            args.extend(["-v".into(), format!("{}:{CONTAINER_DEPS}{flag}", d.display())]);
            args.extend(["-e".into(), format!("PYTHONPATH={CONTAINER_DEPS}")]);
        }
        args.extend([
            "-e".into(),
            "PYTHONHASHSEED=0".into(),
            "-w".into(),
            CONTAINER_ROOT.into(),
            self.settings.image.clone(),
            "sh".into(),
            format!("{CONTAINER_ROOT}/{ENTRY_SCRIPT}"),
            mode.into(),
        ]);
        args
    }

    fn engine_run(
        &self,
        root: &Path,
        deps: Option<&Path>,
        network: bool,
        mode: &str,
        timeout: Duration,
    ) -> Result<super::process::RawRun, ExecError> {
        let name = self.container_name();
        let mut cmd = Command::new(&self.settings.engine);
        cmd.args(self.run_args(&name, root, deps, network, mode));
        let engine = self.settings.engine.clone();
        let kill = move || {
            let _ = Command::new(&engine)
                .args(["kill", &name])
                .stdout(std::process::Stdio::null())
                .stderr(std::process::Stdio::null())
                .status();
        };
        let run = run_with_timeout(cmd, timeout, &self.settings.cancel, kill)
            .map_err(|e| ExecError::EngineUnavailable(format!("cannot start '{}': {e}", self.settings.engine)))?;
        if run.cancelled {
            return Err(ExecError::Cancelled);
        }
        if run.exit_code == Some(ENGINE_FAILURE_EXIT) {
            return Err(ExecError::EngineUnavailable(run.stderr.text.trim().to_string()));
        }
        Ok(run)
    }
}

impl ExecBackend for ContainerBackend {
    fn name(&self) -> &'static str {
        "container"
    }

    fn execute(&self, ws: &Workspace, timeout: Duration) -> Result<ExecutionResult, ExecError> {
        let mut deps_dir = None;
        if !ws.requirements.is_empty() {
            let mut engine_err = None;
            let installed = self.deps.get_or_install(&ws.requirements, |target| {
                match self.engine_run(&ws.root, Some(target), true, "install", self.settings.install_timeout) {
                    Ok(run) if run.exit_code == Some(0) => Ok(()),
                    Ok(run) => Err((run.stderr.text, run.exit_code.unwrap_or(-1))),
                    Err(e) => {
                        let msg = e.to_string();
                        engine_err = Some(e);
                        Err((msg, -1))
                    }
                }
            });
            if let Some(e) = engine_err {
                return Err(e);
            }
            match installed {
                Ok(d) => deps_dir = Some(d),
                Err((stderr, code)) => return Ok(ExecutionResult::setup_failure(stderr, code, timeout)),
            }
        }

        let run = self.engine_run(&ws.root, deps_dir.as_deref(), false, "run", timeout)?;
        let prefixes = [format!("{CONTAINER_ROOT}/")];
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

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn backend(engine: &str) -> ContainerBackend {
        ContainerBackend::new(ExecSettings { engine: engine.into(), ..Default::default() })
    }

    #[test]
    fn run_args_disable_network() {
        let b = backend("docker");
        let args = b.run_args("c1", Path::new("/tmp/ws"), Some(Path::new("/cache/ab")), false, "run");
        let joined = args.join(" ");
        assert!(joined.starts_with("run --rm --name c1 --network none"));
        assert!(joined.contains("-v /tmp/ws:/workspace"));
        assert!(joined.contains("-v /cache/ab:/deps:ro -e PYTHONPATH=/deps"));
        assert!(joined.ends_with("python:3.11-slim sh /workspace/entry.sh run"));
    }

    #[test]
    fn install_args_keep_network() {
        let args = backend("podman").run_args("c2", Path::new("/w"), Some(Path::new("/d")), true, "install");
        assert!(!args.contains(&"none".to_string()));
        assert!(args.contains(&"/d:/deps".to_string()));
    }

    #[test]
    fn missing_engine_is_unavailable() {
        let b = backend("/nonexistent/engine-binary");
        let ws = Workspace {
            root: PathBuf::from("/tmp"),
            main_file: PathBuf::from("/tmp/main.py"),
            requirements_file: PathBuf::from("/tmp/requirements.txt"),
            problem_id: "p".into(),
            attempt_index: 0,
            requirements: vec![],
        };
        assert!(matches!(b.execute(&ws, Duration::from_secs(1)), Err(ExecError::EngineUnavailable(_))));
    }
}
