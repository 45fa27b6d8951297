//! Host-side experiment runner: provisions an environment, drives the step
//! loop over a protocol session and produces run reports.

mod env;
mod matrix;
mod repro;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assertions::AssertionRegistry;
use crate::protocol::Handshake;

pub use env::{copy_tree, tree_hash};
pub use matrix::{run_matrix, MatrixCell, MatrixResult};
pub use repro::{reproduce_check, ReproVerdict, StepDifference};
pub use run::{build_scope, playbook_digest, run_experiment};

pub const REPORT_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SandboxParams {
    /// Directory copied into every fresh sandbox root.
    #[serde(default)]
    pub template_tree: Option<PathBuf>,
    /// Screen model backing GUI actions; without one GUI actions are unsupported.
    #[serde(default)]
    pub screen_model: Option<PathBuf>,
    /// Extra assertion library manifests loaded into the agent.
    #[serde(default)]
    pub libraries: Vec<PathBuf>,
}

/// Shell commands run on the host to drive a hypervisor. `{{ machine }}` and
/// `{{ snapshot }}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmSnapshotParams {
    pub machine_name: String,
    pub snapshot_name: String,
    pub connect_addr: String,
    /// Reverts the machine to the snapshot.
    #[serde(default)]
    pub revert_command: Option<String>,
    #[serde(default)]
    pub start_command: Option<String>,
    #[serde(default)]
    pub stop_command: Option<String>,
    #[serde(default = "default_connect_timeout_ms")]
    pub connect_timeout_ms: u64,
}

fn default_connect_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", content = "params", rename_all = "snake_case")]
pub enum Backend {
    Sandbox(SandboxParams),
    VmSnapshot(VmSnapshotParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub id: String,
    #[serde(flatten)]
    pub backend: Backend,
    /// System variables. Sandbox values are relative to the sandbox root;
    /// VM values are guest paths.
    #[serde(default)]
    pub sys_var_map: BTreeMap<String, String>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("duplicate environment id `{0}`")]
    Duplicate(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    environments: Vec<EnvironmentSpec>,
}

/// Environments by id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvironmentRegistry {
    pub environments: Vec<EnvironmentSpec>,
}

impl EnvironmentRegistry {
    pub fn new(environments: Vec<EnvironmentSpec>) -> Result<Self, RegistryError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &environments {
            if !seen.insert(e.id.as_str()) {
                return Err(RegistryError::Duplicate(e.id.clone()));
            }
        }
        Ok(EnvironmentRegistry { environments })
    }

    /// Loads a registry file. Relative sandbox paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|e| RegistryError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            RegistryError::Parse { reason, .. } => RegistryError::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, RegistryError> {
        let file: RegistryFile = crate::yaml::from_str(text).map_err(|e| RegistryError::Parse {
            path: PathBuf::new(),
            reason: e.to_string(),
        })?;
        let mut envs = file.environments;
        for e in &mut envs {
            if let Backend::Sandbox(p) = &mut e.backend {
                let fix = |x: &mut PathBuf| {
                    if x.is_relative() {
                        *x = base_dir.join(&*x);
                    }
                };
                p.template_tree.as_mut().map(fix);
                p.screen_model.as_mut().map(fix);
                p.libraries.iter_mut().for_each(fix);
            }
        }
        Self::new(envs)
    }

    pub fn get(&self, id: &str) -> Option<&EnvironmentSpec> {
        self.environments.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OnTestFail {
    #[default]
    Continue,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OnNonzeroExit {
    #[default]
    Continue,
    Abort,
}

/// What to do when a step does not go as planned. Action errors always abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FailurePolicy {
    #[serde(default)]
    pub on_test_fail: OnTestFail,
    #[serde(default)]
    pub on_nonzero_exit: OnNonzeroExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AllPass,
    TestFailures,
    AbortedError,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::AllPass => "all_pass",
            Verdict::TestFailures => "test_failures",
            Verdict::AbortedError => "aborted_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// An action or capture completed.
    Ok,
    Pass,
    Fail,
    Error,
}

/// Tree hashes taken around a test evaluation in a sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchdogRecord {
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub description: String,
    pub kind: String,
    pub status: StepStatus,
    /// Action outcome, test result, captured value or error payload.
    pub outcome: Value,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_clock: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watchdog: Option<WatchdogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub run_id: String,
    pub author: String,
    pub submitted_at: DateTime<Utc>,
    pub engine_version: String,
    pub playbook_digest: String,
    pub environment: EnvironmentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<Handshake>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox_root: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_run_tree_hash: Option<String>,
    pub steps: Vec<StepRecord>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub captured_variables: BTreeMap<String, String>,
    /// Guest paths written by the harness itself (file transfers). Recorded
    /// only; nothing is filtered.
    pub agent_touched_paths: Vec<String>,
    pub finished_at: DateTime<Utc>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Step counts of tests that did not pass.
    pub fn failed_tests(&self) -> Vec<&StepRecord> {
        self.steps
            .iter()
            .filter(|s| s.kind == "test" && s.status != StepStatus::Pass)
            .collect()
    }

    pub fn watchdog_mutations(&self) -> usize {
        self.steps
            .iter()
            .filter_map(|s| s.watchdog.as_ref())
            .filter(|w| w.before != w.after)
            .count()
    }
}

pub type StepObserver = Arc<dyn Fn(&StepRecord) + Send + Sync>;

#[derive(Clone)]
pub struct RunOptions {
    pub author: String,
    /// Host paths in file transfers are relative to this directory.
    pub base_dir: PathBuf,
    /// Host registry. Sandbox agents evaluate with a copy of it.
    pub registry: AssertionRegistry,
    pub handshake_timeout: Duration,
    /// Per-request deadline; `None` waits indefinitely.
    pub step_deadline: Option<Duration>,
    /// Hash the sandbox tree before and after every test evaluation.
    pub watchdog: bool,
    pub observer: Option<StepObserver>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            author: std::env::var("USER").unwrap_or_else(|_| "unknown".into()),
            base_dir: PathBuf::from("."),
            registry: AssertionRegistry::core(),
            handshake_timeout: Duration::from_secs(10),
            step_deadline: Some(Duration::from_secs(300)),
            watchdog: false,
            observer: None,
        }
    }
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("author", &self.author)
            .field("base_dir", &self.base_dir)
            .field("step_deadline", &self.step_deadline)
            .field("watchdog", &self.watchdog)
            .finish_non_exhaustive()
    }
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parses_both_backends() {
        let text = r#"
environments:
  - id: trash
    backend: sandbox
    params:
      template_tree: tree
      screen_model: files.screen.yaml
    sys_var_map:
      adare_user_home: home/user
    description: Files on a scripted desktop
  - id: ubuntu-2404
    backend: vm_snapshot
    params:
      machine_name: ubuntu
      snapshot_name: clean
      connect_addr: "10.0.2.15:48620"
      revert_command: "VBoxManage snapshot {{ machine }} restore {{ snapshot }}"
"#;
        let reg = EnvironmentRegistry::parse(text, Path::new("/fx")).unwrap();
        let trash = reg.get("trash").unwrap();
        match &trash.backend {
            Backend::Sandbox(p) => {
                assert_eq!(p.template_tree.as_deref(), Some(Path::new("/fx/tree")));
                assert_eq!(p.screen_model.as_deref(), Some(Path::new("/fx/files.screen.yaml")));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(trash.sys_var_map["adare_user_home"], "home/user");
        match &reg.get("ubuntu-2404").unwrap().backend {
            Backend::VmSnapshot(p) => assert_eq!(p.connect_timeout_ms, 60_000),
            other => panic!("{other:?}"),
        }
        // Round trip through JSON keeps the tagging.
        let v = serde_json::to_value(trash).unwrap();
        assert_eq!(v["backend"], "sandbox");
        let back: EnvironmentSpec = serde_json::from_value(v).unwrap();
        assert_eq!(&back, trash);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "environments:\n  - {id: a, backend: sandbox, params: {template_tree: t}}\n  - {id: a, backend: sandbox, params: {template_tree: u}}\n";
        assert!(matches!(EnvironmentRegistry::parse(text, Path::new(".")), Err(RegistryError::Duplicate(_))));
    }

    #[test]
    fn unknown_backend_is_a_parse_error() {
        let text = "environments:\n  - {id: a, backend: docker}\n";
        assert!(matches!(EnvironmentRegistry::parse(text, Path::new(".")), Err(RegistryError::Parse { .. })));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/report.json");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
