use std::path::Path;

use regex::Regex;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde_json::{json, Value};

use super::{typed_eq, ErrorClass, EvalContext, Outcome, Params};

/// Removes string literals, quoted identifiers and comments, leaving the
/// statement's keywords and punctuation.
fn strip_literals(sql: &str) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut chars = sql.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' | '`' => {
                let close = c;
                while let Some(d) = chars.next() {
                    if d == close {
                        if chars.peek() == Some(&close) {
                            chars.next();
                        } else {
                            break;
                        }
                    }
                }
                out.push(' ');
            }
            '[' => {
                for d in chars.by_ref() {
                    if d == ']' {
                        break;
                    }
                }
                out.push(' ');
            }
            '-' if chars.peek() == Some(&'-') => {
                for d in chars.by_ref() {
                    if d == '\n' {
                        break;
                    }
                }
                out.push(' ');
            }
            '/' if chars.peek() == Some(&'*') => {
                chars.next();
                let mut prev = '\0';
                for d in chars.by_ref() {
                    if prev == '*' && d == '/' {
                        break;
                    }
                    prev = d;
                }
                out.push(' ');
            }
            _ => out.push(c),
        }
    }
    out
}

fn classify(sql: &str) -> Result<bool, String> {
    let bare = strip_literals(sql);
    let body = bare.trim().trim_end_matches(';').trim_end();
    if body.contains(';') {
        return Err("only a single statement is allowed".into());
    }
    let first = body
        .split(|c: char| !c.is_ascii_alphabetic())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_ascii_uppercase();
    if first != "SELECT" && first != "WITH" {
        return Err(format!(
            "statement must be a SELECT query, found `{}`",
            if first.is_empty() { "nothing" } else { &first }
        ));
    }
    let order_by = Regex::new(r"(?i)\border\s+by\b").expect("static regex");
    Ok(order_by.is_match(body))
}

fn uri_for(path: &Path) -> String {
    let mut s = String::from("file:");
    for c in path.to_string_lossy().chars() {
        match c {
            '%' => s.push_str("%25"),
            '?' => s.push_str("%3f"),
            '#' => s.push_str("%23"),
            _ => s.push(c),
        }
    }
    s.push_str("?immutable=1");
    s
}

fn cell(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => json!(i),
        ValueRef::Real(f) => json!(f),
        ValueRef::Text(t) => Value::String(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::String(hex::encode(b)),
    }
}

fn query_rows(path: &Path, sql: &str) -> Result<Vec<Vec<Value>>, Outcome> {
    let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_URI | OpenFlags::SQLITE_OPEN_NO_MUTEX;
    let conn = Connection::open_with_flags(uri_for(path), flags)
        .map_err(|e| Outcome::error(ErrorClass::Io, format!("cannot open {}: {e}", path.display())))?;
    // Touch the schema so a non-database file is reported even for queries
    // that never read a table.
    conn.query_row("SELECT count(*) FROM sqlite_master", [], |_| Ok(()))
        .map_err(|e| classify_sqlite_error(path, e))?;
    let mut stmt = conn.prepare(sql).map_err(|e| classify_sqlite_error(path, e))?;
    if !stmt.readonly() {
        return Err(Outcome::error(ErrorClass::BadQuery, "statement is not read-only"));
    }
    let width = stmt.column_count();
    let mut rows = stmt.query([]).map_err(|e| classify_sqlite_error(path, e))?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(|e| classify_sqlite_error(path, e))? {
        let mut r = Vec::with_capacity(width);
        for i in 0..width {
            r.push(cell(row.get_ref(i).map_err(|e| classify_sqlite_error(path, e))?));
        }
        out.push(r);
    }
    Ok(out)
}

fn classify_sqlite_error(path: &Path, e: rusqlite::Error) -> Outcome {
    use rusqlite::ffi::ErrorCode;
    match &e {
        rusqlite::Error::SqliteFailure(f, _) => match f.code {
            ErrorCode::NotADatabase | ErrorCode::DatabaseCorrupt => Outcome::error(
                ErrorClass::MalformedFile,
                format!("{} is not a readable SQLite database: {e}", path.display()),
            ),
            ErrorCode::DatabaseBusy | ErrorCode::DatabaseLocked | ErrorCode::CannotOpen | ErrorCode::PermissionDenied => {
                Outcome::error(ErrorClass::Io, format!("{}: {e}", path.display()))
            }
            _ => Outcome::error(ErrorClass::BadQuery, e),
        },
        rusqlite::Error::MultipleStatement => Outcome::error(ErrorClass::BadQuery, "only a single statement is allowed"),
        _ => Outcome::error(ErrorClass::BadQuery, e),
    }
}

/// Normalizes `expected` into rows: a scalar is one 1x1 row, a flat array
/// is a single column, an array of arrays is taken as given.
fn expected_rows(expected: &Value) -> (Vec<Vec<Value>>, bool) {
    match expected {
        Value::Array(items) if items.iter().all(Value::is_array) && !items.is_empty() => (
            items
                .iter()
                .map(|r| r.as_array().cloned().unwrap_or_default())
                .collect(),
            false,
        ),
        Value::Array(items) => (items.iter().map(|v| vec![v.clone()]).collect(), false),
        scalar => (vec![vec![scalar.clone()]], true),
    }
}

fn row_eq(a: &[Value], b: &[Value]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| typed_eq(x, y))
}

fn multiset_eq(observed: &[Vec<Value>], expected: &[Vec<Value>]) -> bool {
    if observed.len() != expected.len() {
        return false;
    }
    let mut used = vec![false; observed.len()];
    expected.iter().all(|e| {
        match observed.iter().enumerate().position(|(i, o)| !used[i] && row_eq(o, e)) {
            Some(i) => {
                used[i] = true;
                true
            }
            None => false,
        }
    })
}

pub(super) fn sqlite_query_equals(p: &Params, _ctx: &EvalContext<'_>) -> Outcome {
    let (dst, sql, expected) = match (p.path("dst"), p.str("sql"), p.value("expected")) {
        (Ok(d), Ok(s), Ok(e)) => (d, s, e.clone()),
        (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => return e.into(),
    };
    let ordered = match classify(sql) {
        Ok(o) => o,
        Err(e) => return Outcome::error(ErrorClass::BadQuery, e),
    };
    match std::fs::metadata(&dst) {
        Ok(m) if m.is_file() => {}
        Ok(_) => return Outcome::error(ErrorClass::Io, format!("{} is not a regular file", dst.display())),
        Err(e) => return Outcome::error(ErrorClass::Io, format!("cannot read {}: {e}", dst.display())),
    }
    let rows = match query_rows(&dst, sql) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let (want, scalar) = expected_rows(&expected);
    let observed = if scalar && rows.len() == 1 && rows[0].len() == 1 {
        rows[0][0].clone()
    } else {
        Value::Array(rows.iter().map(|r| Value::Array(r.clone())).collect())
    };
    let equal = if ordered {
        rows.len() == want.len() && rows.iter().zip(&want).all(|(a, b)| row_eq(a, b))
    } else {
        multiset_eq(&rows, &want)
    };
    if equal {
        Outcome::pass(format!("query returned the expected {} row(s)", rows.len())).with_observed(observed)
    } else {
        Outcome::fail(observed, expected, format!("query returned {} row(s) differing from expected", rows.len()))
    }
}
