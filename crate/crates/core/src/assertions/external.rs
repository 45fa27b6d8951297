use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ErrorClass, EvalContext, Outcome, Params, TestStatus};

const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Deserialize)]
struct WireOutcome {
    status: TestStatus,
    #[serde(default)]
    observed: Option<Value>,
    #[serde(default)]
    expected: Option<Value>,
    #[serde(default)]
    message: String,
    #[serde(default)]
    error_class: Option<ErrorClass>,
}

/// Runs an external library function. The program gets
/// `{"function": .., "params": ..}` on stdin and must print one outcome object
/// (`status`, optional `observed`, `expected`, `message`) on stdout.
pub(super) fn run(program: &[String], base_dir: &Path, function: &str, params: &Params, ctx: &EvalContext<'_>) -> Outcome {
    let cwd = ctx.paths.working_dir().unwrap_or(base_dir);
    let mut child = match Command::new(&program[0])
        .args(&program[1..])
        .current_dir(cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return Outcome::error(ErrorClass::External, format!("cannot start `{}`: {e}", program[0])),
    };
    let input = json!({"function": function, "params": params.as_map()}).to_string();
    let mut stdin = child.stdin.take().expect("stdin is piped");
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(input.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("stdout is piped");
    let mut stderr = child.stderr.take().expect("stderr is piped");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break s,
            Ok(None) if start.elapsed() > EXTERNAL_TIMEOUT => {
                let _ = child.kill();
                let _ = child.wait();
                return Outcome::error(
                    ErrorClass::External,
                    format!("`{}` did not finish within {} s", program[0], EXTERNAL_TIMEOUT.as_secs()),
                );
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Outcome::error(ErrorClass::External, e),
        }
    };
    let _ = writer.join();
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Outcome::error(
            ErrorClass::External,
            format!(
                "`{}` exited with {status}: {}",
                program[0],
                String::from_utf8_lossy(&err).trim()
            ),
        );
    }
    let wire: WireOutcome = match serde_json::from_slice(&out) {
        Ok(w) => w,
        Err(e) => return Outcome::error(ErrorClass::External, format!("`{}` printed an invalid outcome: {e}", program[0])),
    };
    match wire.status {
        TestStatus::Error => {
            let class = wire.error_class.unwrap_or(ErrorClass::External);
            Outcome::error(class, wire.message)
        }
        status => Outcome {
            status,
            observed: wire.observed,
            expected: wire.expected,
            message: wire.message,
            error_class: None,
        },
    }
}
