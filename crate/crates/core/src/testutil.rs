//! Helpers shared by unit tests.

use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::process::Command;

const CHILD_MARKER: &str = "TDF_UNPRIVILEGED_CHILD";
const NOBODY: u32 = 65534;

pub fn is_root() -> bool {
    // SAFETY: geteuid has no preconditions and cannot fail.
    unsafe { libc::geteuid() == 0 }
}

/// Permission-denied fixtures cannot be built as root, because root bypasses
/// mode bits. When running as root this re-runs the named test in a copy of the
/// test binary as `nobody` and returns true once that child has passed; the
/// caller then returns immediately. Otherwise it returns false and the caller
/// runs the test body itself.
pub fn rerun_unprivileged(test_path: &str) -> bool {
    if !is_root() || std::env::var_os(CHILD_MARKER).is_some() {
        return false;
    }
    let scratch = tempfile::Builder::new()
        .prefix("tdf-unpriv-")
        .tempdir()
        .expect("scratch dir");
    std::fs::set_permissions(scratch.path(), std::fs::Permissions::from_mode(0o777)).unwrap();
    let exe = std::env::current_exe().expect("current test binary");
    let copy = scratch.path().join("test-bin");
    std::fs::copy(&exe, &copy).expect("copy test binary");
    std::fs::set_permissions(&copy, std::fs::Permissions::from_mode(0o755)).unwrap();
    let out = Command::new(&copy)
        .args([test_path, "--exact", "--nocapture", "--test-threads=1"])
        .env(CHILD_MARKER, "1")
        .env("TMPDIR", scratch.path())
        .current_dir(scratch.path())
        .uid(NOBODY)
        .gid(NOBODY)
        .output()
        .expect("spawn unprivileged test child");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success() && stdout.contains("1 passed"),
        "unprivileged rerun of {test_path} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    true
}
