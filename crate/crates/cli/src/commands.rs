use std::collections::BTreeSet;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use serde_json::json;
use tdf_core::agent::{serve_tcp, Agent, ExecutionRoot, ServeExit};
use tdf_core::diff::{aggregate, compare, load_report, render_matrix, Change, Finding, LoadedReport, MatrixFormat};
use tdf_core::orchestrator::{
    reproduce_check, run_experiment, run_matrix, write_atomic, EnvironmentSpec, ReproVerdict, StepStatus,
};
use tdf_core::resolver::{ExternalResolver, FixtureResolver, TargetResolver};
use tdf_core::{parse_playbook, validate as validate_playbook, AssertionRegistry, EnvironmentRegistry, Playbook, RunOptions, RunReport, Verdict};

use crate::config::CliConfig;
use crate::{AgentMode, CliError};

/// System variables assumed when no environment is named.
pub const DEFAULT_SYS_VARS: &[&str] = &["adare_user_home", "adare_user_documents"];

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::AllPass => 0,
        Verdict::TestFailures => 1,
        Verdict::AbortedError => 3,
    }
}

fn registry(libraries: &[PathBuf]) -> Result<AssertionRegistry, CliError> {
    let mut reg = AssertionRegistry::core();
    for lib in libraries {
        reg.load_manifest_file(lib)
            .map_err(|e| CliError::usage(format!("library {}: {e}", lib.display())))?;
    }
    Ok(reg)
}

fn environments(cfg: &CliConfig) -> Result<EnvironmentRegistry, CliError> {
    EnvironmentRegistry::load(&cfg.environments_file)
        .map_err(|e| CliError::usage(format!("environments {}: {e}", cfg.environments_file.display())))
}

fn environment(reg: &EnvironmentRegistry, id: &str) -> Result<EnvironmentSpec, CliError> {
    reg.get(id).cloned().ok_or_else(|| CliError::usage(format!("unknown environment `{id}`")))
}

fn read_playbook(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

fn load_playbook(path: &Path) -> Result<Playbook, CliError> {
    parse_playbook(&read_playbook(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "playbook".into(), |s| s.to_string_lossy().into_owned())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::infra(format!("cannot write {}: {e}", path.display())))
}

fn run_options(playbook: &Path, watchdog: bool) -> RunOptions {
    let base_dir = match playbook.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    RunOptions {
        base_dir,
        watchdog,
        observer: Some(std::sync::Arc::new(|s| log::info!("step {} {}: {:?}", s.index, s.description, s.status))),
        ..RunOptions::default()
    }
}

pub fn validate(
    cfg: &CliConfig,
    path: &Path,
    env: Option<&str>,
    extra: &[String],
    libraries: &[PathBuf],
) -> Result<u8, CliError> {
    let bytes = read_playbook(path)?;
    let mut names: BTreeSet<String> = match env {
        Some(id) => environment(&environments(cfg)?, id)?.sys_var_map.into_keys().collect(),
        None => DEFAULT_SYS_VARS.iter().map(|s| s.to_string()).collect(),
    };
    names.extend(extra.iter().cloned());
    let reg = registry(libraries)?;
    let pb = match parse_playbook(&bytes) {
        Ok(pb) => pb,
        Err(e) => {
            println!("{}: {e}", path.display());
            return Ok(1);
        }
    };
    let report = validate_playbook(&pb, &reg, &names);
    for f in &report.findings {
        println!("{}:{f}", path.display());
    }
    if report.is_clean() {
        match pb.static_step_count() {
            Some(n) => println!("{}: ok, {n} steps", path.display()),
            None => println!("{}: ok", path.display()),
        }
        Ok(0)
    } else {
        println!("{}: {} finding(s)", path.display(), report.findings.len());
        Ok(1)
    }
}

fn summarize(r: &RunReport) {
    for s in r.steps.iter().filter(|s| matches!(s.status, StepStatus::Fail | StepStatus::Error)) {
        let msg = s.outcome.get("message").and_then(|m| m.as_str()).unwrap_or("");
        println!("  {:?} step {}: {} {msg}", s.status, s.index, s.description);
    }
    if let Some(why) = &r.abort_reason {
        println!("  aborted: {why}");
    }
}

pub fn run(cfg: &CliConfig, path: &Path, env_id: &str, watchdog: bool) -> Result<u8, CliError> {
    let pb = load_playbook(path)?;
    let env = environment(&environments(cfg)?, env_id)?;
    let report = run_experiment(&pb, &env, cfg.failure_policy, &run_options(path, watchdog));
    let out = cfg.reports_dir.join(stem(path)).join(&env.id).join(format!("{}.json", report.run_id));
    write(&out, report.to_json().as_bytes())?;
    println!("{} on {}: {} ({} steps)", stem(path), env.id, report.verdict.as_str(), report.steps.len());
    summarize(&report);
    println!("report: {}", out.display());
    Ok(verdict_code(report.verdict))
}

pub fn matrix(cfg: &CliConfig, pattern: &str, env_ids: &[String], out: Option<&Path>, watchdog: bool) -> Result<u8, CliError> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| CliError::usage(format!("bad pattern `{pattern}`: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(e.to_string()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no playbooks match `{pattern}`")));
    }
    let mut playbooks = Vec::new();
    for p in &paths {
        let name = stem(p);
        if playbooks.iter().any(|(n, _)| *n == name) {
            return Err(CliError::usage(format!("two playbooks are named `{name}`")));
        }
        playbooks.push((name, load_playbook(p)?));
    }
    let env_ids: Vec<&String> = env_ids.iter().filter(|s| !s.is_empty()).collect();
    let envs = if env_ids.is_empty() {
        Vec::new()
    } else {
        let reg = environments(cfg)?;
        env_ids.iter().map(|id| environment(&reg, id)).collect::<Result<Vec<_>, _>>()?
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        cfg.reports_dir.join(format!("matrix-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ")))
    });
    // Transfers are relative to the first playbook's directory.
    let m = run_matrix(&playbooks, &envs, cfg.failure_policy, &run_options(&paths[0], watchdog), cfg.parallelism);
    let mut index = Vec::new();
    for cell in &m.cells {
        let rel = PathBuf::from(&cell.playbook).join(format!("{}.json", cell.environment));
        write(&out.join(&rel), cell.report.to_json().as_bytes())?;
        println!("{:<24} {:<24} {}", cell.playbook, cell.environment, cell.report.verdict.as_str());
        index.push(json!({
            "playbook": cell.playbook,
            "environment": cell.environment,
            "verdict": cell.report.verdict,
            "run_id": cell.report.run_id,
            "report": rel,
        }));
    }
    let worst = m.worst();
    let doc = json!({"worst": worst, "cells": index});
    write(&out.join("index.json"), serde_json::to_string_pretty(&doc).expect("index serializes").as_bytes())?;
    println!("{} cell(s), worst {}; index: {}", m.cells.len(), worst.as_str(), out.join("index.json").display());
    Ok(verdict_code(worst))
}

fn describe(f: &Finding) -> String {
    let row = |r: &[String]| r.join(" | ");
    match f {
        Finding::ReportMissing => "report missing".into(),
        Finding::StructuralChange { sheet, column: None, change } => format!("sheet `{sheet}` {}", change_word(*change)),
        Finding::StructuralChange { sheet, column: Some(c), change } => {
            format!("column `{c}` of `{sheet}` {}", change_word(*change))
        }
        Finding::RowAdded { sheet, row: r } => format!("`{sheet}` row added: {}", row(r)),
        Finding::RowRemoved { sheet, row: r } => format!("`{sheet}` row removed: {}", row(r)),
        Finding::CellChanged { sheet, baseline_row, candidate_row, column, baseline_value, candidate_value } => format!(
            "`{sheet}` row {baseline_row} (now {candidate_row}) `{column}`: {baseline_value:?} -> {candidate_value:?}"
        ),
    }
}

fn change_word(c: Change) -> &'static str {
    match c {
        Change::Added => "added",
        Change::Removed => "removed",
    }
}

pub fn diff(cfg: &CliConfig, baseline: &Path, candidates: &[PathBuf], csv: bool, out: Option<&Path>) -> Result<u8, CliError> {
    let load = |p: &Path| load_report(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())));
    let base = match load(baseline)? {
        LoadedReport::Present(r) => r,
        LoadedReport::Missing { .. } => {
            return Err(CliError::usage(format!("baseline {} has no report", baseline.display())))
        }
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.reports_dir.join(format!("diff-{}", base.report_id)));
    let mut records = Vec::new();
    for c in candidates {
        let record = compare(&base, &load(c)?);
        if records.iter().any(|r: &tdf_core::DivergenceRecord| r.candidate_id == record.candidate_id) {
            return Err(CliError::usage(format!("two candidates are named `{}`", record.candidate_id)));
        }
        records.push(record);
    }
    let m = aggregate(&records).map_err(|e| CliError::usage(e.to_string()))?;
    for r in &records {
        let json = serde_json::to_string_pretty(r).expect("record serializes");
        write(&out.join(format!("{}.json", r.candidate_id)), json.as_bytes())?;
        if !csv {
            for f in &r.findings {
                println!("{}: {}", r.candidate_id, describe(f));
            }
        }
    }
    write(&out.join("matrix.csv"), &render_matrix(&m, MatrixFormat::Csv))?;
    let rendered = render_matrix(&m, if csv { MatrixFormat::Csv } else { MatrixFormat::TextTable });
    std::io::stdout().write_all(&rendered).map_err(|e| CliError::infra(e.to_string()))?;
    Ok(if records.iter().all(|r| r.is_empty()) { 0 } else { 1 })
}

pub fn reproduce(a: &Path, b: &Path) -> Result<u8, CliError> {
    let load = |p: &Path| RunReport::load(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())));
    match reproduce_check(&load(a)?, &load(b)?) {
        ReproVerdict::Reproduced => {
            println!("reproduced");
            Ok(0)
        }
        ReproVerdict::Diverged { differences } => {
            println!("diverged in {} place(s)", differences.len());
            for d in &differences {
                let at = match (d.step, &d.description) {
                    (Some(i), Some(desc)) => format!("step {i} ({desc})"),
                    (Some(i), None) => format!("step {i}"),
                    _ => "report".into(),
                };
                println!("  {at} {}: {} vs {}", d.field, d.a, d.b);
            }
            Ok(1)
        }
        ReproVerdict::NotComparable { reason } => {
            println!("not comparable: {reason}");
            Ok(2)
        }
    }
}

pub struct AgentOptions<'a> {
    pub listen: &'a str,
    pub mode: AgentMode,
    pub root: Option<&'a Path>,
    pub sys_vars: Option<&'a Path>,
    pub cv_backend: Option<&'a str>,
    pub assets: &'a Path,
    pub libraries: &'a [PathBuf],
}

fn has_display() -> bool {
    ["DISPLAY", "WAYLAND_DISPLAY"].iter().any(|v| std::env::var_os(v).is_some_and(|s| !s.is_empty()))
}

pub fn agent(o: AgentOptions<'_>) -> Result<u8, CliError> {
    let vars = match o.sys_vars {
        Some(p) => ExecutionRoot::load_sys_vars(p).map_err(|e| CliError::usage(e.to_string()))?,
        None => Default::default(),
    };
    let root = match o.mode {
        AgentMode::Sandbox => {
            let dir = o.root.ok_or_else(|| CliError::usage("--root is required in sandbox mode"))?;
            ExecutionRoot::sandbox(dir, vars)
        }
        AgentMode::Native => {
            if !has_display() {
                return Err(CliError::usage("native mode needs a display session (DISPLAY or WAYLAND_DISPLAY is unset)"));
            }
            ExecutionRoot::native(vars)
        }
    }
    .map_err(|e| CliError::usage(e.to_string()))?;
    let resolver: Box<dyn TargetResolver> = match o.cv_backend {
        Some(url) => Box::new(ExternalResolver::new(url, o.assets)),
        None => Box::new(FixtureResolver),
    };
    let mut agent = Agent::new(root, registry(o.libraries)?, resolver);
    let listener = TcpListener::bind(o.listen).map_err(|e| CliError::usage(format!("cannot listen on {}: {e}", o.listen)))?;
    let addr = listener.local_addr().map_err(|e| CliError::usage(e.to_string()))?;
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    match serve_tcp(listener, &mut agent) {
        ServeExit::Shutdown | ServeExit::Disconnected => Ok(0),
        ServeExit::HandshakeRefused(why) => {
            eprintln!("tdf: handshake refused: {why}");
            Ok(3)
        }
    }
}
