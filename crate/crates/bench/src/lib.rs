//! Input builders shared by the benchmarks.

use tdf_core::diff::{Sheet, TabularReport};

/// A single-sheet report with `rows` rows of `cols` distinct cells, derived
/// from `seed` so candidates can be built by perturbing a copy.
pub fn report(id: &str, rows: usize, cols: usize, seed: u64) -> TabularReport {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let header = (0..cols).map(|c| format!("Column {c}")).collect();
    let rows = (0..rows).map(|_| (0..cols).map(|_| format!("{:016x}", next())).collect()).collect();
    TabularReport {
        report_id: id.into(),
        sheets: vec![Sheet { name: "Web History".into(), header, rows }],
    }
}

/// Edits two cells of every third row and drops every seventh.
pub fn perturb(base: &TabularReport, id: &str) -> TabularReport {
    let mut r = base.clone();
    r.report_id = id.into();
    let sheet = &mut r.sheets[0];
    for (i, row) in sheet.rows.iter_mut().enumerate() {
        if i % 3 == 0 {
            row[0] = format!("edited-{i}");
            row[1] = format!("edited-{i}");
        }
    }
    let mut i = 0;
    sheet.rows.retain(|_| {
        i += 1;
        i % 7 != 0
    });
    sheet.rows.reverse();
    r
}
