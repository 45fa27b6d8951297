use std::io::Read;
use std::process::{Command, Stdio};
use std::time::Instant;

use chrono::Utc;

use super::root::{ExecutionRoot, Mode};
use crate::protocol::{error_class, ActionOutcome, ErrorPayload};

/// Per-stream capture limit.
pub const OUTPUT_CAP: usize = 1024 * 1024;

const SANDBOX_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

/// Reads a stream to the end, keeping the first `cap` bytes.
fn capture(mut r: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut chunk = [0u8; 64 * 1024];
    loop {
        match r.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap - kept.len();
                if n > room {
                    truncated = true;
                }
                kept.extend_from_slice(&chunk[..n.min(room)]);
            }
        }
    }
    (kept, truncated)
}

/// Cuts at the last char boundary so the text stays valid UTF-8.
fn to_text(bytes: Vec<u8>) -> String {
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => {
            let valid = e.utf8_error().valid_up_to();
            let bytes = e.into_bytes();
            if bytes.len() - valid < 4 && std::str::from_utf8(&bytes[valid..]).is_err() {
                String::from_utf8_lossy(&bytes[..valid]).into_owned()
            } else {
                String::from_utf8_lossy(&bytes).into_owned()
            }
        }
    }
}

/// Runs a command. In sandbox mode the working directory is the root and the
/// environment is reduced to PATH, HOME, LANG and TZ. A nonzero exit is
/// reported, not treated as an error.
pub fn run_command(command: &str, shell: bool, root: &ExecutionRoot) -> Result<ActionOutcome, ErrorPayload> {
    let argv: Vec<String> = if shell {
        vec!["/bin/sh".into(), "-c".into(), command.into()]
    } else {
        shlex::split(command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| ErrorPayload::new(error_class::BAD_REQUEST, format!("cannot split command `{command}`")))?
    };
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if root.mode == Mode::Sandbox {
        let home = root
            .sys_vars
            .get("adare_user_home")
            .cloned()
            .or_else(|| root.root_path.as_ref().map(|p| p.to_string_lossy().into_owned()))
            .unwrap_or_default();
        cmd.env_clear()
            .env("PATH", SANDBOX_PATH)
            .env("HOME", home)
            .env("LANG", "C.UTF-8")
            .env("TZ", std::env::var("TZ").unwrap_or_else(|_| "UTC".into()));
        if let Some(r) = &root.root_path {
            cmd.current_dir(r);
        }
    }
    let started_at = Utc::now();
    let clock = Instant::now();
    let mut child = cmd.spawn().map_err(|e| {
        ErrorPayload::new(error_class::SPAWN_FAILED, format!("cannot start `{}`: {e}", argv[0]))
    })?;
    let out = child.stdout.take().expect("stdout is piped");
    let err = child.stderr.take().expect("stderr is piped");
    let out_t = std::thread::spawn(move || capture(out, OUTPUT_CAP));
    let err_t = std::thread::spawn(move || capture(err, OUTPUT_CAP));
    let status = child
        .wait()
        .map_err(|e| ErrorPayload::new(error_class::IO, format!("waiting for `{}`: {e}", argv[0])))?;
    let (stdout, stdout_truncated) = out_t.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err_t.join().unwrap_or_default();
    Ok(ActionOutcome::Command {
        exit_code: status.code(),
        stdout: to_text(stdout),
        stderr: to_text(stderr),
        stdout_truncated,
        stderr_truncated,
        started_at,
        duration_ms: clock.elapsed().as_millis() as u64,
    })
}
