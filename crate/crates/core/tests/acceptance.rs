//! Acceptance run: one pass/fail line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tdf_core::assertions::AssertionRegistry;
use tdf_core::diff::{aggregate, compare, load_report, render_matrix, Finding, LoadedReport, MatrixFormat};
use tdf_core::orchestrator::{reproduce_check, run_experiment, FailurePolicy, ReproVerdict, RunOptions, RunReport, StepStatus, Verdict};
use tdf_core::playbook::validate;
use tdf_core::protocol::{alternation_holds, channel_pair, decode, encode, fetch_file, push_file, run_session, Handshake, Kind, Session};

/// Reports from the trash and lockstep criteria, checked again by the watchdog criterion.
static WATCHED: Mutex<Vec<RunReport>> = Mutex::new(Vec::new());

fn opts() -> RunOptions {
    RunOptions {
        watchdog: true,
        ..RunOptions::default()
    }
}

fn test_statuses(r: &RunReport) -> Vec<(String, StepStatus)> {
    r.steps
        .iter()
        .filter(|s| s.kind == "test")
        .map(|s| (s.outcome["test_name"].as_str().unwrap_or_default().to_string(), s.status))
        .collect()
}

fn minimal_playbook() -> Result<String, String> {
    let pb = common::playbook("minimal_trash.yaml");
    let vars: BTreeSet<String> = common::env("trash/environments.yaml", "trash-sandbox").sys_var_map.into_keys().collect();
    let v = validate(&pb, &AssertionRegistry::core(), &vars);
    if !v.is_clean() {
        return Err(format!("validation findings: {:?}", v.findings));
    }
    if pb.static_step_count() != Some(7) {
        return Err(format!("static step count {:?}", pb.static_step_count()));
    }
    let r = run_experiment(&pb, &common::env("trash/environments.yaml", "trash-sandbox"), FailurePolicy::default(), &opts());
    let kinds: Vec<&str> = r.steps.iter().map(|s| s.kind.as_str()).collect();
    if kinds != ["command", "click", "click", "click", "click", "test", "test"] || r.verdict != Verdict::AllPass {
        return Err(format!("executed {kinds:?} with verdict {:?}", r.verdict));
    }
    Ok("validates clean, 7 steps in document order".into())
}

fn trash() -> Result<String, String> {
    let pb = common::playbook("trash/trash.yaml");
    let good = run_experiment(&pb, &common::env("trash/environments.yaml", "trash-sandbox"), FailurePolicy::default(), &opts());
    if good.verdict != Verdict::AllPass {
        return Err(format!("reference run: {:?} {:?}", good.verdict, good.abort_reason));
    }
    let bad = run_experiment(&pb, &common::env("trash/environments.yaml", "trash-sandbox-no-trashinfo"), FailurePolicy::default(), &opts());
    let failed: Vec<String> = test_statuses(&bad).into_iter().filter(|(_, s)| *s == StepStatus::Fail).map(|(n, _)| n).collect();
    let passed = test_statuses(&good).len();
    WATCHED.lock().unwrap().extend([good, bad]);
    if failed != ["trashinfo_exists"] {
        return Err(format!("suppressed trashinfo failed {failed:?}"));
    }
    Ok(format!("{passed}/{passed} tests pass; suppression fails only trashinfo_exists"))
}

fn lockstep() -> Result<String, String> {
    let e = common::env("lockstep/environments.yaml", "lockstep-sandbox");
    let r = run_experiment(&common::playbook("lockstep/lockstep.yaml"), &e, FailurePolicy::default(), &opts());
    let counts: Vec<StepStatus> = test_statuses(&r).into_iter().filter(|(n, _)| n == "run_count").map(|(_, s)| s).collect();
    let times: Vec<StepStatus> = test_statuses(&r).into_iter().filter(|(n, _)| n == "last_run_time").map(|(_, s)| s).collect();
    if r.verdict != Verdict::AllPass || counts != [StepStatus::Pass; 10] || times != [StepStatus::Pass; 10] {
        return Err(format!("clean run: {:?} counts {counts:?} times {times:?}", r.verdict));
    }
    let d = run_experiment(&common::playbook("lockstep/lockstep_double_increment.yaml"), &e, FailurePolicy::default(), &opts());
    let counts: Vec<StepStatus> = test_statuses(&d).into_iter().filter(|(n, _)| n == "run_count").map(|(_, s)| s).collect();
    WATCHED.lock().unwrap().extend([r, d]);
    let want: Vec<StepStatus> = (1..=10).map(|i| if i >= 6 { StepStatus::Fail } else { StepStatus::Pass }).collect();
    if counts != want {
        return Err(format!("double increment: {counts:?}"));
    }
    Ok("10/10 pass; double increment fails iterations 6-10".into())
}

fn protocol() -> Result<String, String> {
    const CASES: u32 = 10_000;
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&common::proto::message(), |m| {
            let frame = encode(&m);
            proptest::prop_assert!(!frame.contains('\n'));
            proptest::prop_assert_eq!(decode(&frame).unwrap(), m);
            Ok(())
        })
        .map_err(|e| format!("codec: {e}"))?;

    let mut rng = StdRng::seed_from_u64(4);
    let choices = [Kind::Ping, Kind::Test, Kind::Action, Kind::FetchFile];
    for _ in 0..32 {
        let (_dir, mut agent) = common::sandbox_agent();
        let (host, mut guest) = channel_pair();
        let h = std::thread::spawn(move || agent.serve(&mut guest));
        let n = rng.gen_range(0..20);
        let kinds: Vec<Kind> = (0..n).map(|_| choices[rng.gen_range(0..choices.len())]).collect();
        let requests = kinds
            .iter()
            .map(|k| {
                let payload = match k {
                    Kind::Test => json!({"test_name": "t", "function": "file_exists", "params": {"dst": "/nonexistent"}}),
                    Kind::Action => json!({"type": "command", "command": "true", "shell": false}),
                    Kind::FetchFile => json!({"path": "/nonexistent", "chunk": 0}),
                    _ => Value::Null,
                };
                (*k, payload, Some(Duration::from_secs(10)))
            })
            .chain([(Kind::Shutdown, Value::Null, None)]);
        let (_, trace) = run_session(host, &Handshake::new([], "acceptance"), requests, Duration::from_secs(5)).map_err(|e| e.to_string())?;
        if !alternation_holds(&trace) {
            return Err(format!("alternation broken for {kinds:?}"));
        }
        h.join().map_err(|_| "agent panicked".to_string())?;
    }

    let (dir, mut agent) = common::sandbox_agent();
    let base = dir.path().canonicalize().unwrap();
    let (host, mut guest) = channel_pair();
    std::thread::spawn(move || agent.serve(&mut guest));
    let mut s = Session::open(host, &Handshake::new([], "acceptance"), Duration::from_secs(5)).map_err(|e| e.to_string())?;
    for size in [1024, 64 * 1024, 1024 * 1024, 1024 * 1024 + 1, 5 * 1024 * 1024] {
        let bytes: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
        let path = base.join(format!("{size}.bin")).display().to_string();
        push_file(&mut s, &path, &bytes, None).map_err(|e| e.to_string())?;
        let (back, _) = fetch_file(&mut s, &path, None).map_err(|e| e.to_string())?;
        if back != bytes || std::fs::read(&path).map_err(|e| e.to_string())? != bytes {
            return Err(format!("{size}-byte transfer differs"));
        }
    }
    if !alternation_holds(s.trace()) {
        return Err("alternation broken during transfers".into());
    }
    Ok(format!("{CASES} codec cases, 33 alternating sessions, transfers 1 KiB-5 MiB"))
}

fn diff_oracle() -> Result<String, String> {
    const PAIRS: usize = 1000;
    let mut rng = StdRng::seed_from_u64(5);
    for i in 0..PAIRS {
        let base = common::random_report(&mut rng, "tool-1.0");
        let (cand, want) = common::mutate(&mut rng, &base, "tool-1.1");
        let got = compare(&base, &cand).counts();
        if got != want {
            return Err(format!("pair {i}: got {got:?}, injected {want:?}"));
        }
    }
    for _ in 0..100 {
        let mut base = common::random_report(&mut rng, "tool-1.0");
        base.sheets.truncate(1);
        base.sheets[0].rows = vec![base.sheets[0].header.iter().map(|_| format!("{:08x}", rng.gen::<u32>())).collect()];
        for (k, want) in [(2, [0, 0, 0, 0, 2]), (3, [0, 0, 1, 1, 0])] {
            let mut cand = base.clone();
            for c in 0..k {
                cand.sheets[0].rows[0][c] = format!("changed-{c}");
            }
            let got = compare(&base, &LoadedReport::Present(cand)).counts();
            if got != want {
                return Err(format!("{k} differing cells gave {got:?}"));
            }
        }
    }
    let dir = common::fixture("diff");
    let LoadedReport::Present(base) = load_report(&dir.join("autopsy-4.4.0")).map_err(|e| e.to_string())? else {
        return Err("baseline fixture missing".into());
    };
    let missing = compare(&base, &load_report(&dir.join("autopsy-4.21.0")).map_err(|e| e.to_string())?);
    if missing.findings != [Finding::ReportMissing] {
        return Err(format!("missing report: {:?}", missing.findings));
    }
    let no_sheet = compare(&base, &load_report(&dir.join("autopsy-4.16.0")).map_err(|e| e.to_string())?);
    if !no_sheet.findings.iter().any(|f| matches!(f, Finding::StructuralChange { sheet, column: None, .. } if sheet == "Recycle Bin")) {
        return Err(format!("missing sheet: {:?}", no_sheet.findings));
    }
    Ok(format!("{PAIRS} pairs recovered exactly; 2-diff modified, 3-diff added+removed; missing report and sheet classified"))
}

fn reproducibility() -> Result<String, String> {
    let pb = common::playbook("trash/trash.yaml");
    let e = common::env("trash/environments.yaml", "trash-sandbox");
    let a = run_experiment(&pb, &e, FailurePolicy::default(), &opts());
    let b = run_experiment(&pb, &e, FailurePolicy::default(), &opts());
    if a.pre_run_tree_hash.is_none() || a.pre_run_tree_hash != b.pre_run_tree_hash {
        return Err(format!("tree hashes {:?} vs {:?}", a.pre_run_tree_hash, b.pre_run_tree_hash));
    }
    match reproduce_check(&a, &b) {
        ReproVerdict::Reproduced => Ok("reproduced with identical pre-run tree hash".into()),
        other => Err(format!("{other:?}")),
    }
}

fn aggregation() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(7);
    const TRIALS: usize = 200;
    for t in 0..TRIALS {
        let base = common::random_report(&mut rng, "tool-1.0");
        let n = rng.gen_range(0..=25);
        let mut records = Vec::new();
        let mut injected = [0usize; 5];
        for i in 0..n {
            let (cand, want) = common::mutate(&mut rng, &base, &format!("tool-1.{}", i + 1));
            records.push(compare(&base, &cand));
            for (s, w) in injected.iter_mut().zip(want) {
                *s += w;
            }
        }
        let cut = rng.gen_range(0..=n);
        let whole = aggregate(&records).map_err(|e| e.to_string())?.totals();
        let left = aggregate(&records[..cut]).map_err(|e| e.to_string())?.totals();
        let right = aggregate(&records[cut..]).map_err(|e| e.to_string())?.totals();
        let summed: Vec<usize> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
        if whole.to_vec() != summed || whole != injected {
            return Err(format!("trial {t}: {whole:?} vs split {summed:?} vs injected {injected:?}"));
        }
    }
    let dir = common::fixture("diff");
    let render = |format| -> Result<Vec<u8>, String> {
        let LoadedReport::Present(base) = load_report(&dir.join("autopsy-4.4.0")).map_err(|e| e.to_string())? else {
            return Err("baseline fixture missing".into());
        };
        let mut records = Vec::new();
        for v in ["autopsy-4.11.0", "autopsy-4.16.0", "autopsy-4.19.0", "autopsy-4.21.0"] {
            records.push(compare(&base, &load_report(&dir.join(v)).map_err(|e| e.to_string())?));
        }
        Ok(render_matrix(&aggregate(&records).map_err(|e| e.to_string())?, format))
    };
    for (format, golden) in [(MatrixFormat::Csv, "diff/matrix.golden.csv"), (MatrixFormat::TextTable, "diff/matrix.golden.txt")] {
        let first = render(format)?;
        if first != render(format)? || first != std::fs::read(common::fixture(golden)).map_err(|e| e.to_string())? {
            return Err(format!("{golden} not reproduced byte for byte"));
        }
    }
    Ok(format!("{TRIALS} randomized splits additive; fixture renders byte-identical"))
}

fn watchdog() -> Result<String, String> {
    let reports = WATCHED.lock().unwrap();
    if reports.len() != 4 {
        return Err(format!("expected 4 runs from the trash and lockstep criteria, have {}", reports.len()));
    }
    let mut watched = 0;
    for r in reports.iter() {
        for s in r.steps.iter().filter(|s| s.kind == "test") {
            if s.watchdog.is_none() {
                return Err(format!("step {} has no watchdog record", s.description));
            }
            watched += 1;
        }
        if r.watchdog_mutations() != 0 {
            return Err(format!("{} mutation(s) in {}", r.watchdog_mutations(), r.run_id));
        }
    }
    Ok(format!("{watched} evaluations, 0 mutations"))
}

type Criterion = (&'static str, u64, fn() -> Result<String, String>);

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 minimal trash playbook", 1, minimal_playbook),
        ("2 trash analog", 5, trash),
        ("3 lockstep", 10, lockstep),
        ("4 protocol properties", 30, protocol),
        ("5 diff oracle", 60, diff_oracle),
        ("6 reproducibility", 10, reproducibility),
        ("7 matrix aggregation", 5, aggregation),
        ("8 read-only assertions", 1, watchdog),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > Duration::from_secs(budget) => Err(format!("{detail}, but took {took:.2?} (budget {budget} s)")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name:<24} {took:>10.2?}  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {took:>10.2?}  {why}");
            }
        }
    }
    println!("{}/8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
