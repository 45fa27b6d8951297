use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;
use tdf_core::protocol::{Handshake, Kind, Session, Status, TcpTransport};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

fn tdf(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tdf"));
    c.args(args).env_remove("TDF_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    tdf(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            let path = e.path();
            if path.is_dir() {
                out.extend(json_files(&path));
            } else if path.extension().is_some_and(|x| x == "json") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

const ENVS: &str = "trash/environments.yaml";

#[test]
fn validate_exit_codes() {
    let o = run(&["validate", p(&fixture("minimal_trash.yaml"))]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("ok, 7 steps"));

    let dir = tempfile::tempdir().unwrap();
    let dangling = dir.path().join("dangling.yaml");
    let src = std::fs::read_to_string(fixture("minimal_trash.yaml")).unwrap();
    std::fs::write(&dangling, src.replace("{{ trashbin }}/files", "{{ trash_bin }}/files")).unwrap();
    let o = run(&["validate", p(&dangling)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("trash_bin"), "{}", stdout(&o));

    assert_eq!(code(&run(&["validate", p(&dir.path().join("absent.yaml"))])), 2);

    let only_home = run(&["validate", p(&fixture("minimal_trash.yaml")), "--env", "unreachable-vm", "--environments", p(&fixture(ENVS))]);
    assert_eq!(code(&only_home), 1, "unreachable-vm has no documents variable");
}

#[test]
fn run_writes_reports_and_maps_verdicts() {
    let reports = tempfile::tempdir().unwrap();
    let pb = fixture("trash/trash.yaml");
    let envs = fixture(ENVS);
    let base = ["--reports-dir", p(reports.path()), "--environments", p(&envs)];

    let o = run(&[&["run", p(&pb), "--env", "trash-sandbox", "--watchdog"][..], &base].concat());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let files = json_files(&reports.path().join("trash/trash-sandbox"));
    assert_eq!(files.len(), 1);
    let report: Value = serde_json::from_slice(&std::fs::read(&files[0]).unwrap()).unwrap();
    assert_eq!(report["verdict"], "all_pass");
    assert_eq!(report["report_version"], 1);

    let o = run(&[&["run", p(&pb), "--env", "trash-sandbox-no-trashinfo"][..], &base].concat());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("trashinfo_exists"));

    let o = run(&[&["run", p(&pb), "--env", "trash-sandbox-no-trashinfo", "--on-test-fail", "abort"][..], &base].concat());
    assert_eq!(code(&o), 1);
    let o = run(&[&["run", p(&pb), "--env", "unreachable-vm"][..], &base].concat());
    assert_eq!(code(&o), 3);
    assert_eq!(code(&run(&[&["run", p(&pb), "--env", "missing"][..], &base].concat())), 2);
    assert_eq!(json_files(reports.path()).len(), 4, "every executed run leaves a report");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tdf.toml");
    std::fs::write(&cfg, format!("environments_file = {:?}\nreports_dir = \"from-config\"\n", p(&fixture(ENVS)))).unwrap();
    let pb = fixture("minimal_trash.yaml");

    let o = tdf(&["run", p(&pb), "--env", "trash-sandbox"]).env("TDF_CONFIG", &cfg).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_files(&dir.path().join("from-config")).len(), 1);

    let flag = dir.path().join("from-flag");
    let o = tdf(&["run", p(&pb), "--env", "trash-sandbox", "--reports-dir", p(&flag)]).env("TDF_CONFIG", &cfg).output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(json_files(&flag).len(), 1);
    assert_eq!(json_files(&dir.path().join("from-config")).len(), 1);

    std::fs::write(&cfg, "reports_dir = 5\n").unwrap();
    let o = tdf(&["validate", p(&pb)]).env("TDF_CONFIG", &cfg).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn matrix_writes_cells_and_index() {
    let out = tempfile::tempdir().unwrap();
    let envs = p(&fixture(ENVS)).to_string();
    let pattern = fixture("trash/trash.yaml");

    let dir = out.path().join("three");
    let o = run(&[
        "matrix", p(&pattern), "--environments", &envs, "--out", p(&dir), "--parallelism", "3",
        "--env", "trash-sandbox,trash-sandbox-no-trashinfo", "--env", "unreachable-vm",
    ]);
    assert_eq!(code(&o), 3, "one aborted cell dominates: {}", stdout(&o));
    let index: Value = serde_json::from_slice(&std::fs::read(dir.join("index.json")).unwrap()).unwrap();
    let cells = index["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert_eq!(index["worst"], "aborted_error");
    let verdicts: Vec<&str> = cells.iter().map(|c| c["verdict"].as_str().unwrap()).collect();
    assert_eq!(verdicts, ["all_pass", "test_failures", "aborted_error"]);
    for c in cells {
        assert!(dir.join(c["report"].as_str().unwrap()).is_file());
    }
    assert_eq!(json_files(&dir).len(), 4);

    let dir = out.path().join("pass");
    let o = run(&["matrix", p(&pattern), "--environments", &envs, "--out", p(&dir), "--env", "trash-sandbox"]);
    assert_eq!(code(&o), 0);

    let dir = out.path().join("empty");
    let o = run(&["matrix", p(&pattern), "--out", p(&dir)]);
    assert_eq!(code(&o), 0);
    let index: Value = serde_json::from_slice(&std::fs::read(dir.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["cells"], serde_json::json!([]));

    let o = run(&["matrix", p(&out.path().join("*.yaml")), "--env", "trash-sandbox"]);
    assert_eq!(code(&o), 2, "no playbooks match");
}

#[test]
fn diff_against_fixture_reports() {
    let out = tempfile::tempdir().unwrap();
    let d = |v: &str| fixture(&format!("diff/autopsy-{v}"));
    let base = d("4.4.0");

    let o = run(&["diff", p(&base), p(&base), "--out", p(&out.path().join("same"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("4.4.0"));

    let o = run(&["diff", p(&d("4.11.0")), p(&d("4.19.0")), "--out", p(&out.path().join("cells"))]);
    assert_eq!(code(&o), 1);
    let printed = stdout(&o);
    let changed: Vec<&str> = printed.lines().filter(|l| l.contains(" -> ")).map(str::trim).collect();
    assert_eq!(changed.len(), 2, "{}", stdout(&o));
    let record: Value = serde_json::from_slice(&std::fs::read(out.path().join("cells/autopsy-4.19.0.json")).unwrap()).unwrap();
    assert!(record["findings"].as_array().unwrap().iter().all(|f| f["finding"] == "cell_changed"));

    let all = ["4.11.0", "4.16.0", "4.19.0", "4.21.0"].map(d);
    let mut args = vec!["diff", p(&base)];
    args.extend(all.iter().map(|x| p(x)));
    let dir = out.path().join("all");
    args.extend(["--out", p(&dir)]);
    let text = run(&args);
    assert_eq!(code(&text), 1);
    assert!(stdout(&text).contains("autopsy-4.21.0: report missing"));
    assert!(stdout(&text).ends_with(&std::fs::read_to_string(fixture("diff/matrix.golden.txt")).unwrap()));
    args.push("--csv");
    let csv = run(&args);
    assert_eq!(stdout(&csv), std::fs::read_to_string(fixture("diff/matrix.golden.csv")).unwrap());
    assert_eq!(std::fs::read(dir.join("matrix.csv")).unwrap(), csv.stdout);
    assert_eq!(json_files(&dir).len(), 4);

    assert_eq!(code(&run(&["diff", p(&d("4.21.0")), p(&base)])), 2, "missing baseline");
}

#[test]
fn reproduce_exit_codes() {
    let reports = tempfile::tempdir().unwrap();
    let envs = p(&fixture(ENVS)).to_string();
    let run_one = |pb: &str, env: &str, sub: &str| -> PathBuf {
        let dir = reports.path().join(sub);
        let o = run(&["run", p(&fixture(pb)), "--env", env, "--environments", &envs, "--reports-dir", p(&dir)]);
        assert!(code(&o) <= 1, "{}", stdout(&o));
        json_files(&dir).pop().unwrap()
    };
    let a = run_one("trash/trash.yaml", "trash-sandbox", "a");
    let b = run_one("trash/trash.yaml", "trash-sandbox", "b");
    let c = run_one("minimal_trash.yaml", "trash-sandbox", "c");
    let o = run(&["reproduce", p(&a), p(&b)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let mut diverged: Value = serde_json::from_slice(&std::fs::read(&b).unwrap()).unwrap();
    diverged["verdict"] = "test_failures".into();
    let d = reports.path().join("diverged.json");
    std::fs::write(&d, serde_json::to_vec(&diverged).unwrap()).unwrap();
    let o = run(&["reproduce", p(&a), p(&d)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("verdict"));

    assert_eq!(code(&run(&["reproduce", p(&a), p(&c)])), 2);
    assert_eq!(code(&run(&["reproduce", p(&a), p(&reports.path().join("none.json"))])), 2);
}

#[test]
fn agent_serves_until_shutdown() {
    let root = tempfile::tempdir().unwrap();
    let mut child = tdf(&["agent", "--mode", "sandbox", "--root", p(root.path()), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    // Occupied port.
    let o = run(&["agent", "--mode", "sandbox", "--root", p(root.path()), "--listen", &addr]);
    assert_eq!(code(&o), 2);

    let stream = TcpStream::connect(&addr).unwrap();
    let mut s = Session::open(TcpTransport::new(stream), &Handshake::new([], "cli-test"), Duration::from_secs(5)).unwrap();
    assert_eq!(s.request(Kind::Ping, Value::Null, Some(Duration::from_secs(5))).unwrap().status, Status::Ok);
    assert_eq!(s.request(Kind::Shutdown, Value::Null, None).unwrap().status, Status::Ok);
    assert_eq!(child.wait().unwrap().code(), Some(0));
}

#[test]
fn agent_usage_errors() {
    let o = tdf(&["agent", "--mode", "native", "--listen", "127.0.0.1:0"])
        .env_remove("DISPLAY")
        .env_remove("WAYLAND_DISPLAY")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("display"));
    assert_eq!(code(&run(&["agent", "--mode", "sandbox", "--listen", "127.0.0.1:0"])), 2, "sandbox needs a root");
}
