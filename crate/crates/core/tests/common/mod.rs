#![allow(dead_code)]

pub mod proto;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use tdf_core::agent::{Agent, ExecutionRoot};
use tdf_core::assertions::AssertionRegistry;
use tdf_core::diff::{LoadedReport, Sheet, TabularReport};
use tdf_core::orchestrator::{EnvironmentRegistry, EnvironmentSpec};
use tdf_core::playbook::{parse_playbook, Playbook};
use tdf_core::resolver::FixtureResolver;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn playbook(rel: &str) -> Playbook {
    parse_playbook(&std::fs::read(fixture(rel)).unwrap()).unwrap()
}

pub fn env(registry: &str, id: &str) -> EnvironmentSpec {
    EnvironmentRegistry::load(&fixture(registry)).unwrap().get(id).unwrap().clone()
}

/// An agent confined to a fresh temporary directory.
pub fn sandbox_agent() -> (tempfile::TempDir, Agent) {
    let dir = tempfile::tempdir().unwrap();
    let root = ExecutionRoot::sandbox(dir.path(), Default::default()).unwrap();
    (dir, Agent::new(root, AssertionRegistry::core(), Box::new(FixtureResolver)))
}

const SHEET_NAMES: &[&str] = &[
    "Web History",
    "Web Search",
    "Web Bookmarks",
    "Web Cookies",
    "Recycle Bin",
    "Installed Programs",
    "Recent Documents",
];

fn fresh(rng: &mut impl Rng, tag: &str) -> String {
    format!("{tag}-{:08x}", rng.gen::<u32>())
}

/// A report whose cells are all distinct, so any two rows differ in every
/// column and rows are at least five cells apart.
pub fn random_report(rng: &mut impl Rng, id: &str) -> TabularReport {
    let mut names: Vec<&str> = SHEET_NAMES.to_vec();
    names.shuffle(rng);
    let n_sheets = rng.gen_range(1..=3);
    let mut sheets: Vec<Sheet> = names[..n_sheets]
        .iter()
        .map(|name| {
            let ncols = rng.gen_range(5..=8);
            let header: Vec<String> = (0..ncols).map(|c| format!("Column {c}")).collect();
            let nrows = rng.gen_range(0..=12);
            let rows = (0..nrows)
                .map(|r| (0..ncols).map(|c| fresh(rng, &format!("{name}/{r}/{c}"))).collect())
                .collect();
            Sheet {
                name: name.to_string(),
                header,
                rows,
            }
        })
        .collect();
    sheets.sort_by(|a, b| a.name.cmp(&b.name));
    TabularReport {
        report_id: id.into(),
        sheets,
    }
}

/// Expected finding counts, in category order.
pub type Counts = [usize; 5];

/// Applies random unambiguous mutations to a copy of `base` and returns the
/// candidate with the counts each category must come out at.
pub fn mutate(rng: &mut impl Rng, base: &TabularReport, id: &str) -> (LoadedReport, Counts) {
    if rng.gen_bool(0.05) {
        return (LoadedReport::Missing { report_id: id.into() }, [1, 0, 0, 0, 0]);
    }
    let mut counts = [0usize; 5];
    let mut sheets = Vec::new();
    for sheet in &base.sheets {
        if rng.gen_bool(0.1) {
            counts[1] += 1;
            continue;
        }
        let mut s = sheet.clone();
        let ncols = s.header.len();
        // row deletions
        let before = s.rows.len();
        s.rows.retain(|_| !rng.gen_bool(0.1));
        counts[3] += before - s.rows.len();
        // k-cell edits on the original columns
        for row in &mut s.rows {
            if rng.gen_bool(0.3) {
                let k = rng.gen_range(1..=2);
                let mut cols: Vec<usize> = (0..ncols).collect();
                cols.shuffle(rng);
                for &c in &cols[..k] {
                    row[c] = fresh(rng, "edited");
                }
                counts[4] += k;
            }
        }
        // fresh rows
        for _ in 0..rng.gen_range(0..=3) {
            let row = (0..ncols).map(|_| fresh(rng, "new")).collect();
            s.rows.push(row);
            counts[2] += 1;
        }
        // column insertion
        if rng.gen_bool(0.2) {
            let at = rng.gen_range(0..=ncols);
            s.header.insert(at, "Inserted".into());
            for row in &mut s.rows {
                row.insert(at, fresh(rng, "col"));
            }
            counts[1] += 1;
        }
        s.rows.shuffle(rng);
        sheets.push(s);
    }
    (
        LoadedReport::Present(TabularReport {
            report_id: id.into(),
            sheets,
        }),
        counts,
    )
}
