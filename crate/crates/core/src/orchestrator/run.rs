use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::env::{provision, tree_hash, Provisioned};
use super::{
    EnvironmentSpec, FailurePolicy, OnNonzeroExit, OnTestFail, RunOptions, RunReport, StepRecord, StepStatus, Verdict,
    WatchdogRecord, ENGINE_VERSION, REPORT_VERSION,
};
use crate::assertions::TestResult;
use crate::playbook::{
    to_canonical_yaml, Action, ExecutionCursor, Playbook, Scope, ScopeValue, ShareDirection, StepKind, TargetSpec,
    VarKind,
};
use crate::protocol::{
    fetch_file, push_file, ActionOutcome, ActionRequest, Kind, Response, Session, Status, TcpTransport, TestRequest,
};
use crate::resolver::Target;

/// Binds system variables, then playbook variables in declaration order.
/// Dynamic variables start unset.
pub fn build_scope<K: Into<String>, V: Into<String>>(
    pb: &Playbook,
    sys_vars: impl IntoIterator<Item = (K, V)>,
) -> Result<Scope, String> {
    let mut scope: Scope = sys_vars.into_iter().collect();
    for v in &pb.variables {
        if v.kind == VarKind::Dynamic {
            scope.set(v.name.clone(), ScopeValue::Unset);
            continue;
        }
        let Some(tpl) = &v.value else {
            return Err(format!("variable `{}` has no value", v.name));
        };
        let text = tpl.render(&scope).map_err(|e| format!("variable `{}`: {e}", v.name))?;
        let value = match v.kind {
            VarKind::Number => ScopeValue::Number(
                text.trim()
                    .parse()
                    .map_err(|_| format!("variable `{}`: `{text}` is not a number", v.name))?,
            ),
            VarKind::Boolean => match text.trim() {
                "true" => ScopeValue::Bool(true),
                "false" => ScopeValue::Bool(false),
                _ => return Err(format!("variable `{}`: `{text}` is not a boolean", v.name)),
            },
            _ => ScopeValue::Text(text),
        };
        scope.set(v.name.clone(), value);
    }
    Ok(scope)
}

pub fn playbook_digest(pb: &Playbook) -> String {
    hex::encode(Sha256::digest(to_canonical_yaml(pb).as_bytes()))
}

fn run_id(digest: &str, env_id: &str, started: DateTime<Utc>) -> String {
    let mut h = Sha256::new();
    for part in [digest, env_id, ENGINE_VERSION, &started.to_rfc3339_opts(SecondsFormat::Nanos, true)] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Why the step loop stopped early.
enum Stop {
    /// A test failed under the abort-on-failure policy.
    TestPolicy,
    Error(String),
}

struct Executed {
    description: String,
    kind: &'static str,
    status: StepStatus,
    outcome: Value,
    agent_clock: Option<DateTime<Utc>>,
    watchdog: Option<WatchdogRecord>,
    stop: Option<Stop>,
}

impl Executed {
    fn error(kind: &'static str, description: String, message: String) -> Self {
        Executed {
            description,
            kind,
            status: StepStatus::Error,
            outcome: json!({"class": "step_error", "message": message}),
            agent_clock: None,
            watchdog: None,
            stop: Some(Stop::Error(message)),
        }
    }
}

struct Runner<'a> {
    session: Session<TcpTransport>,
    pb: &'a Playbook,
    policy: FailurePolicy,
    opts: &'a RunOptions,
    sandbox_root: Option<std::path::PathBuf>,
    /// Host instant at which the latest terminal response was processed.
    last_response_at: DateTime<Utc>,
    touched: Vec<String>,
}

fn target_of(t: &TargetSpec, scope: &Scope) -> Result<Target, String> {
    Ok(match t {
        TargetSpec::Image { reference } => Target::Image(reference.clone()),
        TargetSpec::Text { value } => Target::Text(value.render(scope).map_err(|e| e.to_string())?),
        TargetSpec::Coordinates { x, y } => Target::Coordinates { x: *x, y: *y },
    })
}

fn describe_target(t: &Target) -> String {
    match t {
        Target::Image(r) => format!("image {r}"),
        Target::Text(s) => format!("text \"{s}\""),
        Target::Coordinates { x, y } => format!("({x}, {y})"),
    }
}

fn describe_action(a: &ActionRequest) -> String {
    match a {
        ActionRequest::Command { command, .. } => format!("command: {command}"),
        ActionRequest::Click { button, target } => format!("{} click on {}", button.as_str(), describe_target(target)),
        ActionRequest::TypeText { text } => format!("type {} characters", text.chars().count()),
        ActionRequest::Scroll { direction, amount } => format!("scroll {} by {amount}", direction.as_str()),
        ActionRequest::DragDrop { from, to } => {
            format!("drag {} onto {}", describe_target(from), describe_target(to))
        }
    }
}

impl Runner<'_> {
    fn request(&mut self, kind: Kind, payload: Value) -> Result<Response, String> {
        let r = self
            .session
            .request(kind, payload, self.opts.step_deadline)
            .map_err(|e| e.to_string());
        self.last_response_at = Utc::now();
        r
    }

    fn action_request(&mut self, action: &Action, scope: &Scope) -> Result<ActionRequest, String> {
        let render = |t: &crate::playbook::TemplateString| t.render(scope).map_err(|e| e.to_string());
        Ok(match action {
            Action::Command { command, shell } => ActionRequest::Command {
                command: render(command)?,
                shell: *shell,
            },
            Action::Click { button, target } => ActionRequest::Click {
                button: *button,
                target: target_of(target, scope)?,
            },
            Action::TypeText { text } => ActionRequest::TypeText { text: render(text)? },
            Action::Scroll { direction, amount } => ActionRequest::Scroll {
                direction: *direction,
                amount: *amount,
            },
            Action::DragDrop { from, to } => ActionRequest::DragDrop {
                from: target_of(from, scope)?,
                to: target_of(to, scope)?,
            },
            Action::ShareFile { .. } | Action::Wait { .. } | Action::CaptureTime { .. } => {
                unreachable!("handled on the host")
            }
        })
    }

    fn exec(&mut self, step: &crate::playbook::Step, scope: &mut Scope) -> Executed {
        match &step.kind {
            StepKind::Test { name } => self.exec_test(name, scope),
            StepKind::Action(Action::CaptureTime { into }) => {
                let at = self.last_response_at;
                let text = at.to_rfc3339_opts(SecondsFormat::Micros, true);
                let previous = scope.set(into.clone(), ScopeValue::Text(text.clone()));
                if matches!(previous, Some(ScopeValue::Text(_))) {
                    log::info!("dynamic variable `{into}` re-captured");
                }
                Executed {
                    description: format!("capture time into {into}"),
                    kind: "capture_time",
                    status: StepStatus::Ok,
                    outcome: json!({"variable": into, "value": text}),
                    agent_clock: None,
                    watchdog: None,
                    stop: None,
                }
            }
            StepKind::Action(Action::Wait { duration_ms }) => {
                std::thread::sleep(Duration::from_millis(*duration_ms));
                Executed {
                    description: format!("wait {duration_ms} ms"),
                    kind: "wait",
                    status: StepStatus::Ok,
                    outcome: json!({"duration_ms": duration_ms}),
                    agent_clock: None,
                    watchdog: None,
                    stop: None,
                }
            }
            StepKind::Action(Action::ShareFile { direction, src, dst }) => {
                let (src, dst) = match (src.render(scope), dst.render(scope)) {
                    (Ok(s), Ok(d)) => (s, d),
                    (Err(e), _) | (_, Err(e)) => {
                        return Executed::error("share_file", format!("share {} -> {}", src.raw(), dst.raw()), e.to_string())
                    }
                };
                self.exec_share(*direction, &src, &dst)
            }
            StepKind::Action(a) => {
                let kind = a.kind_name();
                let req = match self.action_request(a, scope) {
                    Ok(r) => r,
                    Err(e) => return Executed::error(kind, kind.to_string(), e),
                };
                self.exec_action(kind, req)
            }
            StepKind::Loop(_) | StepKind::Conditional(_) => unreachable!("the cursor yields leaf steps only"),
        }
    }

    fn exec_action(&mut self, kind: &'static str, req: ActionRequest) -> Executed {
        let description = describe_action(&req);
        let resp = match self.request(Kind::Action, serde_json::to_value(&req).expect("action serializes")) {
            Ok(r) => r,
            Err(e) => return Executed::error(kind, description, e),
        };
        let agent_clock = resp.agent_clock;
        if resp.status != Status::Ok {
            let message = resp
                .error_payload()
                .map(|p| format!("{}: {}", p.class, p.message))
                .unwrap_or_else(|| format!("unexpected status {:?}", resp.status));
            return Executed {
                description,
                kind,
                status: StepStatus::Error,
                outcome: resp.payload,
                agent_clock,
                watchdog: None,
                stop: Some(Stop::Error(message)),
            };
        }
        let mut stop = None;
        let mut status = StepStatus::Ok;
        if let Ok(ActionOutcome::Command { exit_code, .. }) = serde_json::from_value::<ActionOutcome>(resp.payload.clone()) {
            if exit_code != Some(0) && self.policy.on_nonzero_exit == OnNonzeroExit::Abort {
                status = StepStatus::Error;
                stop = Some(Stop::Error(format!("command exited with {exit_code:?}")));
            }
        }
        Executed {
            description,
            kind,
            status,
            outcome: resp.payload,
            agent_clock,
            watchdog: None,
            stop,
        }
    }

    fn exec_share(&mut self, direction: ShareDirection, src: &str, dst: &str) -> Executed {
        let description = format!("share {} {src} -> {dst}", direction.as_str());
        let host = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.opts.base_dir.join(p)
            }
        };
        let deadline = self.opts.step_deadline;
        let result = match direction {
            ShareDirection::HostToGuest => {
                let path = host(src);
                match std::fs::read(&path) {
                    Err(e) => Err(format!("{}: {e}", path.display())),
                    Ok(bytes) => {
                        self.touched.push(dst.to_string());
                        push_file(&mut self.session, dst, &bytes, deadline).map_err(|e| e.to_string())
                    }
                }
            }
            ShareDirection::GuestToHost => {
                let path = host(dst);
                fetch_file(&mut self.session, src, deadline)
                    .map_err(|e| e.to_string())
                    .and_then(|(bytes, receipt)| {
                        super::write_atomic(&path, &bytes)
                            .map(|_| receipt)
                            .map_err(|e| format!("{}: {e}", path.display()))
                    })
            }
        };
        self.last_response_at = Utc::now();
        match result {
            Ok(receipt) => Executed {
                description,
                kind: "share_file",
                status: StepStatus::Ok,
                outcome: serde_json::to_value(receipt).expect("receipt serializes"),
                agent_clock: None,
                watchdog: None,
                stop: None,
            },
            Err(e) => Executed::error("share_file", description, e),
        }
    }

    fn exec_test(&mut self, name: &str, scope: &Scope) -> Executed {
        let description = format!("test {name}");
        let Some(def) = self.pb.test(name) else {
            return Executed::error("test", description, format!("no test named `{name}`"));
        };
        let params = match def.render_parameters(scope) {
            Ok(p) => p,
            Err(e) => return Executed::error("test", description, format!("test `{name}`: {e}")),
        };
        let req = TestRequest {
            test_name: def.name.clone(),
            function: def.function.clone(),
            params,
        };
        let hash = |root: &Option<std::path::PathBuf>| root.as_deref().and_then(|r| tree_hash(r).ok());
        let before = if self.opts.watchdog { hash(&self.sandbox_root) } else { None };
        let resp = match self.request(Kind::Test, serde_json::to_value(&req).expect("test request serializes")) {
            Ok(r) => r,
            Err(e) => return Executed::error("test", description, e),
        };
        let watchdog = before.and_then(|b| hash(&self.sandbox_root).map(|a| WatchdogRecord { before: b, after: a }));
        let agent_clock = resp.agent_clock;
        let status = match resp.status {
            Status::TestPass => StepStatus::Pass,
            Status::TestFail => StepStatus::Fail,
            Status::Error if serde_json::from_value::<TestResult>(resp.payload.clone()).is_ok() => StepStatus::Error,
            other => {
                let message = resp
                    .error_payload()
                    .map(|p| format!("{}: {}", p.class, p.message))
                    .unwrap_or_else(|| format!("unexpected status {other:?}"));
                return Executed {
                    description,
                    kind: "test",
                    status: StepStatus::Error,
                    outcome: resp.payload,
                    agent_clock,
                    watchdog,
                    stop: Some(Stop::Error(message)),
                };
            }
        };
        let stop = (status != StepStatus::Pass && self.policy.on_test_fail == OnTestFail::Abort).then_some(Stop::TestPolicy);
        Executed {
            description,
            kind: "test",
            status,
            outcome: resp.payload,
            agent_clock,
            watchdog,
            stop,
        }
    }
}

/// A report with no steps and an aborted verdict, filled in as the run
/// progresses.
pub(super) fn skeleton(pb: &Playbook, env: &EnvironmentSpec, opts: &RunOptions) -> RunReport {
    let submitted_at = Utc::now();
    let digest = playbook_digest(pb);
    RunReport {
        report_version: REPORT_VERSION,
        run_id: run_id(&digest, &env.id, submitted_at),
        author: opts.author.clone(),
        submitted_at,
        engine_version: ENGINE_VERSION.to_string(),
        playbook_digest: digest,
        environment: env.clone(),
        agent: None,
        sandbox_root: None,
        pre_run_tree_hash: None,
        steps: Vec::new(),
        verdict: Verdict::AbortedError,
        abort_reason: None,
        captured_variables: BTreeMap::new(),
        agent_touched_paths: Vec::new(),
        finished_at: submitted_at,
    }
}

/// Runs one playbook in one freshly provisioned environment. Failures of any
/// kind end up in the report; the environment is torn down in every case.
pub fn run_experiment(pb: &Playbook, env: &EnvironmentSpec, policy: FailurePolicy, opts: &RunOptions) -> RunReport {
    let mut report = skeleton(pb, env, opts);

    let provisioned = match provision(env, opts) {
        Ok(p) => p,
        Err(e) => {
            log::error!("environment `{}`: {e}", env.id);
            report.abort_reason = Some(format!("provisioning failed: {e}"));
            report.finished_at = Utc::now();
            return report;
        }
    };
    let Provisioned {
        session,
        scope_vars,
        sandbox_root,
        pre_run_tree_hash,
        teardown,
    } = provisioned;
    report.agent = Some(session.peer().clone());
    report.sandbox_root = sandbox_root.as_ref().map(|p| p.to_string_lossy().into_owned());
    report.pre_run_tree_hash = pre_run_tree_hash;
    let scope = build_scope(pb, scope_vars);

    let mut runner = Runner {
        session,
        pb,
        policy,
        opts,
        sandbox_root,
        last_response_at: Utc::now(),
        touched: Vec::new(),
    };

    let stop = match scope {
        Err(e) => Some(Stop::Error(e)),
        Ok(mut scope) => {
            let stop = step_loop(&mut runner, &mut scope, &mut report.steps);
            for v in pb.variables.iter().filter(|v| v.kind == VarKind::Dynamic) {
                if let Some(ScopeValue::Text(t)) = scope.get(&v.name) {
                    report.captured_variables.insert(v.name.clone(), t.clone());
                }
            }
            stop
        }
    };
    report.agent_touched_paths = std::mem::take(&mut runner.touched);
    teardown.finish(runner.session);

    let tests_ok = report
        .steps
        .iter()
        .all(|s| s.status != StepStatus::Error && (s.kind != "test" || s.status == StepStatus::Pass));
    report.verdict = match stop {
        Some(Stop::Error(reason)) => {
            report.abort_reason = Some(reason);
            Verdict::AbortedError
        }
        _ if tests_ok => Verdict::AllPass,
        _ => Verdict::TestFailures,
    };
    report.finished_at = Utc::now();
    report
}

fn step_loop(runner: &mut Runner<'_>, scope: &mut Scope, steps: &mut Vec<StepRecord>) -> Option<Stop> {
    let mut cursor = ExecutionCursor::new(runner.pb);
    loop {
        let started_at = Utc::now();
        let clock = Instant::now();
        let exec = match cursor.next_step(scope) {
            Ok(None) => return None,
            Ok(Some(step)) => runner.exec(step, scope),
            Err(e) => Executed::error("control_flow", "loop or condition".into(), e.to_string()),
        };
        let record = StepRecord {
            index: steps.len(),
            description: exec.description,
            kind: exec.kind.to_string(),
            status: exec.status,
            outcome: exec.outcome,
            started_at,
            finished_at: Utc::now(),
            duration_ms: clock.elapsed().as_millis() as u64,
            agent_clock: exec.agent_clock,
            watchdog: exec.watchdog,
        };
        if let Some(obs) = &runner.opts.observer {
            obs(&record);
        }
        steps.push(record);
        if exec.stop.is_some() {
            return exec.stop;
        }
    }
}
