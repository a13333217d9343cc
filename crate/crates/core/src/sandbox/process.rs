use std::os::unix::process::CommandExt;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::capture::{capture_stream, Captured, STREAM_CAP};
use super::CancelToken;

const POLL: Duration = Duration::from_millis(5);
const READER_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug)]
pub(crate) struct RawRun {
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub cancelled: bool,
    pub stdout: Captured,
    pub stderr: Captured,
    pub duration: Duration,
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().or_else(|| status.signal().map(|s| 128 + s)).unwrap_or(-1)
}

/// Runs `cmd` in its own process group and kills the whole group when
/// `timeout` elapses or `cancel` fires. `on_kill` runs first, for backends
/// that must stop something outside the group (a container).
pub(crate) fn run_with_timeout(
    mut cmd: Command,
    timeout: Duration,
    cancel: &CancelToken,
    on_kill: impl FnOnce(),
) -> std::io::Result<RawRun> {
    cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped()).process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pgid = child.id() as libc::pid_t;

    let spawn_reader = |stream: Box<dyn std::io::Read + Send>| {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let _ = tx.send(capture_stream(stream, STREAM_CAP));
        });
        rx
    };
    let out_rx = spawn_reader(Box::new(child.stdout.take().expect("piped stdout")));
    let err_rx = spawn_reader(Box::new(child.stderr.take().expect("piped stderr")));

    let deadline = start + timeout;
    let mut timed_out = false;
    let mut cancelled = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            timed_out = true;
        } else if cancel.is_cancelled() {
            cancelled = true;
        }
        if timed_out || cancelled {
            on_kill();
            // SAFETY: killpg only sends a signal; pgid is the child's own group.
            unsafe {
                libc::killpg(pgid, libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        thread::sleep(POLL);
    };
    let duration = start.elapsed();

    let collect = |rx: mpsc::Receiver<Captured>| rx.recv_timeout(READER_GRACE).unwrap_or_default();
    let stdout = collect(out_rx);
    let stderr = collect(err_rx);

    Ok(RawRun {
        exit_code: status.map(exit_code),
        timed_out,
        cancelled,
        stdout,
        stderr,
        duration,
    })
}
