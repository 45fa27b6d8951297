//! Tool report comparison: classify how a candidate report diverges from a
//! baseline, and count divergences across versions.

mod align;
mod matrix;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

pub use align::{align, greedy, row_distance, MAX_CHANGED_CELLS, OPTIMAL_PAIR_LIMIT};
pub use matrix::{aggregate, render_matrix, version_of, AggregateError, DivergenceMatrix, MatrixFormat};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sheet {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularReport {
    pub report_id: String,
    /// Sorted by name.
    pub sheets: Vec<Sheet>,
}

impl TabularReport {
    pub fn sheet(&self, name: &str) -> Option<&Sheet> {
        self.sheets.iter().find(|s| s.name == name)
    }
}

/// A report as found on disk: present, or missing because the tool produced
/// nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadedReport {
    Present(TabularReport),
    Missing { report_id: String },
}

impl LoadedReport {
    pub fn report_id(&self) -> &str {
        match self {
            LoadedReport::Present(r) => &r.report_id,
            LoadedReport::Missing { report_id } => report_id,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("sheet `{sheet}` row {row}: {found} cells under a {expected}-column header")]
    Ragged {
        sheet: String,
        /// 1-based data row, not counting the header.
        row: usize,
        expected: usize,
        found: usize,
    },
}

pub fn normalize_cell(s: &str) -> String {
    s.trim().nfc().collect()
}

fn read_sheet(path: &Path, name: String) -> Result<Sheet, LoadError> {
    let csv_err = |e: csv::Error| LoadError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        None => Vec::new(),
        Some(r) => r.map_err(csv_err)?.iter().map(normalize_cell).collect(),
    };
    let mut rows = Vec::new();
    for (i, r) in records.enumerate() {
        let r = r.map_err(csv_err)?;
        if r.len() != header.len() {
            return Err(LoadError::Ragged {
                sheet: name,
                row: i + 1,
                expected: header.len(),
                found: r.len(),
            });
        }
        rows.push(r.iter().map(normalize_cell).collect());
    }
    Ok(Sheet { name, header, rows })
}

/// Reads a report directory holding one `<Sheet Name>.csv` per sheet. A
/// directory that is absent or holds no sheets is a missing report.
pub fn load_report(dir: &Path) -> Result<LoadedReport, LoadError> {
    let report_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LoadedReport::Missing { report_id }),
        Err(e) => {
            return Err(LoadError::Io {
                path: dir.to_path_buf(),
                reason: e.to_string(),
            })
        }
    };
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| LoadError::Io {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")) {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Ok(LoadedReport::Missing { report_id });
    }
    files.sort();
    let sheets = files
        .into_iter()
        .map(|p| {
            let name = normalize_cell(&p.file_stem().expect("csv file has a stem").to_string_lossy());
            read_sheet(&p, name)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedReport::Present(TabularReport { report_id, sheets }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ReportMissing,
    Structural,
    RowAdded,
    RowRemoved,
    CellChanged,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::ReportMissing,
        Category::Structural,
        Category::RowAdded,
        Category::RowRemoved,
        Category::CellChanged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ReportMissing => "report_missing",
            Category::Structural => "structural",
            Category::RowAdded => "row_added",
            Category::RowRemoved => "row_removed",
            Category::CellChanged => "cell_changed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Added,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    ReportMissing,
    /// A sheet, or with `column` set a column of a sheet, appeared or vanished.
    StructuralChange {
        sheet: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        column: Option<String>,
        change: Change,
    },
    RowAdded {
        sheet: String,
        row: Vec<String>,
    },
    RowRemoved {
        sheet: String,
        row: Vec<String>,
    },
    CellChanged {
        sheet: String,
        /// Data row indices (0-based) in the baseline and the candidate.
        baseline_row: usize,
        candidate_row: usize,
        column: String,
        baseline_value: String,
        candidate_value: String,
    },
}

impl Finding {
    pub fn category(&self) -> Category {
        match self {
            Finding::ReportMissing => Category::ReportMissing,
            Finding::StructuralChange { .. } => Category::Structural,
            Finding::RowAdded { .. } => Category::RowAdded,
            Finding::RowRemoved { .. } => Category::RowRemoved,
            Finding::CellChanged { .. } => Category::CellChanged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub baseline_id: String,
    pub candidate_id: String,
    pub findings: Vec<Finding>,
}

impl DivergenceRecord {
    /// Finding counts in `Category::ALL` order.
    pub fn counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for f in &self.findings {
            c[f.category() as usize] += 1;
        }
        c
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Pairs equal names in order of appearance, so repeated names match their
/// n-th occurrence. Returns matched index pairs and the unmatched indices of
/// each side.
fn match_names(a: &[String], b: &[String]) -> (Vec<(usize, usize)>, Vec<usize>, Vec<usize>) {
    let mut used = vec![false; b.len()];
    let mut pairs = Vec::new();
    let mut only_a = Vec::new();
    for (i, name) in a.iter().enumerate() {
        match (0..b.len()).find(|&j| !used[j] && &b[j] == name) {
            Some(j) => {
                used[j] = true;
                pairs.push((i, j));
            }
            None => only_a.push(i),
        }
    }
    let only_b = (0..b.len()).filter(|&j| !used[j]).collect();
    (pairs, only_a, only_b)
}

fn compare_sheet(base: &Sheet, cand: &Sheet, out: &mut Vec<Finding>) {
    let (shared, removed, added) = match_names(&base.header, &cand.header);
    for i in removed {
        out.push(Finding::StructuralChange {
            sheet: base.name.clone(),
            column: Some(base.header[i].clone()),
            change: Change::Removed,
        });
    }
    for j in added {
        out.push(Finding::StructuralChange {
            sheet: base.name.clone(),
            column: Some(cand.header[j].clone()),
            change: Change::Added,
        });
    }

    let distances: Vec<Vec<usize>> = base
        .rows
        .iter()
        .map(|b| cand.rows.iter().map(|c| row_distance(b, c, &shared)).collect())
        .collect();
    let pairs = align(&distances);
    let mut base_paired = vec![false; base.rows.len()];
    let mut cand_paired = vec![false; cand.rows.len()];
    for &(i, j, d) in &pairs {
        if d > MAX_CHANGED_CELLS {
            continue;
        }
        base_paired[i] = true;
        cand_paired[j] = true;
        for &(bi, cj) in &shared {
            let (bv, cv) = (&base.rows[i][bi], &cand.rows[j][cj]);
            if bv != cv {
                out.push(Finding::CellChanged {
                    sheet: base.name.clone(),
                    baseline_row: i,
                    candidate_row: j,
                    column: base.header[bi].clone(),
                    baseline_value: bv.clone(),
                    candidate_value: cv.clone(),
                });
            }
        }
    }
    for (_, row) in base.rows.iter().enumerate().filter(|(i, _)| !base_paired[*i]) {
        out.push(Finding::RowRemoved {
            sheet: base.name.clone(),
            row: row.clone(),
        });
    }
    for (_, row) in cand.rows.iter().enumerate().filter(|(j, _)| !cand_paired[*j]) {
        out.push(Finding::RowAdded {
            sheet: base.name.clone(),
            row: row.clone(),
        });
    }
}

/// Classifies every divergence of `candidate` from `baseline`. Findings come
/// out sheet by sheet in baseline order, then sheets only the candidate has.
pub fn compare(baseline: &TabularReport, candidate: &LoadedReport) -> DivergenceRecord {
    let mut findings = Vec::new();
    match candidate {
        LoadedReport::Missing { .. } => findings.push(Finding::ReportMissing),
        LoadedReport::Present(cand) => {
            let bnames: Vec<String> = baseline.sheets.iter().map(|s| s.name.clone()).collect();
            let cnames: Vec<String> = cand.sheets.iter().map(|s| s.name.clone()).collect();
            let (pairs, removed, added) = match_names(&bnames, &cnames);
            let mut removed = removed.into_iter().peekable();
            for (i, sheet) in baseline.sheets.iter().enumerate() {
                if removed.peek() == Some(&i) {
                    removed.next();
                    findings.push(Finding::StructuralChange {
                        sheet: sheet.name.clone(),
                        column: None,
                        change: Change::Removed,
                    });
                } else if let Some(&(_, j)) = pairs.iter().find(|(bi, _)| *bi == i) {
                    compare_sheet(sheet, &cand.sheets[j], &mut findings);
                }
            }
            for j in added {
                findings.push(Finding::StructuralChange {
                    sheet: cand.sheets[j].name.clone(),
                    column: None,
                    change: Change::Added,
                });
            }
        }
    }
    DivergenceRecord {
        baseline_id: baseline.report_id.clone(),
        candidate_id: candidate.report_id().to_string(),
        findings,
    }
}
