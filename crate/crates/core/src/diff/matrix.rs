use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Category, DivergenceRecord};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceMatrix {
    pub baseline_id: Option<String>,
    /// In input order.
    pub versions: Vec<String>,
    /// One row per version, columns in `Category::ALL` order.
    pub counts: Vec<[usize; 5]>,
}

impl DivergenceMatrix {
    pub fn totals(&self) -> [usize; 5] {
        let mut t = [0; 5];
        for row in &self.counts {
            for (acc, c) in t.iter_mut().zip(row) {
                *acc += c;
            }
        }
        t
    }

    pub fn count(&self, version: &str, category: Category) -> Option<usize> {
        let i = self.versions.iter().position(|v| v == version)?;
        Some(self.counts[i][category as usize])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("records compare against different baselines (`{0}` and `{1}`)")]
pub struct AggregateError(pub String, pub String);

/// Version part of a `<tool>-<version>` report id: everything after the first
/// hyphen that is followed by a digit. Ids without one are used whole.
pub fn version_of(report_id: &str) -> &str {
    report_id
        .char_indices()
        .find(|&(i, c)| c == '-' && report_id[i + 1..].starts_with(|d: char| d.is_ascii_digit()))
        .map_or(report_id, |(i, _)| &report_id[i + 1..])
}

pub fn aggregate(records: &[DivergenceRecord]) -> Result<DivergenceMatrix, AggregateError> {
    let mut m = DivergenceMatrix::default();
    for r in records {
        match &m.baseline_id {
            Some(b) if *b != r.baseline_id => return Err(AggregateError(b.clone(), r.baseline_id.clone())),
            _ => m.baseline_id = Some(r.baseline_id.clone()),
        }
        m.versions.push(version_of(&r.candidate_id).to_string());
        m.counts.push(r.counts());
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    TextTable,
    Csv,
}

/// Deterministic rendering. CSV has one row per version; the text table adds
/// a totals row when there is more than one version.
pub fn render_matrix(m: &DivergenceMatrix, format: MatrixFormat) -> Vec<u8> {
    let header: Vec<&str> = std::iter::once("version").chain(Category::ALL.iter().map(|c| c.as_str())).collect();
    match format {
        MatrixFormat::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            w.write_record(&header).expect("in-memory write");
            for (v, row) in m.versions.iter().zip(&m.counts) {
                let mut rec = vec![v.clone()];
                rec.extend(row.iter().map(usize::to_string));
                w.write_record(&rec).expect("in-memory write");
            }
            w.into_inner().expect("in-memory flush")
        }
        MatrixFormat::TextTable => {
            let mut rows: Vec<Vec<String>> = m
                .versions
                .iter()
                .zip(&m.counts)
                .map(|(v, row)| std::iter::once(v.clone()).chain(row.iter().map(usize::to_string)).collect())
                .collect();
            let totals = (m.versions.len() > 1)
                .then(|| std::iter::once("total".to_string()).chain(m.totals().iter().map(usize::to_string)).collect::<Vec<_>>());
            let widths: Vec<usize> = (0..header.len())
                .map(|i| {
                    rows.iter()
                        .chain(totals.iter())
                        .map(|r| r[i].chars().count())
                        .chain([header[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String]| {
                let mut s = String::new();
                for (i, c) in cells.iter().enumerate() {
                    if i == 0 {
                        let _ = write!(s, "{c:<w$}", w = widths[0]);
                    } else {
                        let _ = write!(s, "  {c:>w$}", w = widths[i]);
                    }
                }
                s.push('\n');
                s
            };
            let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
            for r in rows.drain(..) {
                out.push_str(&line(&r));
            }
            if let Some(t) = totals {
                let width: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(width));
                out.push('\n');
                out.push_str(&line(&t));
            }
            out.into_bytes()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Finding;
    use super::*;

    fn record(candidate: &str, findings: Vec<Finding>) -> DivergenceRecord {
        DivergenceRecord {
            baseline_id: "autopsy-4.4.0".into(),
            candidate_id: candidate.into(),
            findings,
        }
    }

    fn added() -> Finding {
        Finding::RowAdded { sheet: "S".into(), row: vec![] }
    }

    fn changed() -> Finding {
        Finding::CellChanged {
            sheet: "S".into(),
            baseline_row: 0,
            candidate_row: 0,
            column: "c".into(),
            baseline_value: "a".into(),
            candidate_value: "b".into(),
        }
    }

    #[test]
    fn versions_from_report_ids() {
        assert_eq!(version_of("autopsy-4.21.0"), "4.21.0");
        assert_eq!(version_of("recent-activity-4.19.1-rc1"), "4.19.1-rc1");
        assert_eq!(version_of("baseline"), "baseline");
    }

    #[test]
    fn counts_per_category() {
        let m = aggregate(&[record("autopsy-4.11.0", vec![changed(), changed(), added()])]).unwrap();
        assert_eq!(m.counts, vec![[0, 0, 1, 0, 2]]);
        assert_eq!(m.count("4.11.0", Category::CellChanged), Some(2));
    }

    #[test]
    fn empty_and_mixed() {
        let m = aggregate(&[]).unwrap();
        assert_eq!(render_matrix(&m, MatrixFormat::Csv), b"version,report_missing,structural,row_added,row_removed,cell_changed\n");
        let mut other = record("x-2", vec![]);
        other.baseline_id = "x-1".into();
        assert!(aggregate(&[record("autopsy-4.5.0", vec![]), other]).is_err());
    }

    #[test]
    fn single_cell_renders_one_data_row() {
        let m = aggregate(&[record("autopsy-4.21.0", vec![Finding::ReportMissing])]).unwrap();
        let csv = String::from_utf8(render_matrix(&m, MatrixFormat::Csv)).unwrap();
        assert_eq!(csv.lines().collect::<Vec<_>>(), ["version,report_missing,structural,row_added,row_removed,cell_changed", "4.21.0,1,0,0,0,0"]);
        let text = String::from_utf8(render_matrix(&m, MatrixFormat::TextTable)).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
