use chrono::{DateTime, Local, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use regex::Regex;
use serde_json::Value;

use super::files::{excerpt, read_capped};
use super::{ErrorClass, EvalContext, Outcome, Params};

pub const DEFAULT_TOLERANCE_MS: u64 = 2000;

/// Epoch values below this magnitude are seconds, above it milliseconds.
const EPOCH_MILLIS_THRESHOLD: f64 = 1e11;

/// Parses RFC 3339, the trash-info local format (`YYYY-MM-DDThh:mm:ss`, no
/// offset, host local time) or epoch seconds/milliseconds.
pub fn parse_timestamp(text: &str) -> Result<DateTime<Utc>, String> {
    let t = text.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(t, fmt) {
            return Local
                .from_local_datetime(&naive)
                .earliest()
                .map(|d| d.with_timezone(&Utc))
                .ok_or_else(|| format!("`{t}` does not exist in the local time zone"));
        }
    }
    if let Ok(n) = t.parse::<f64>() {
        return from_epoch(n).ok_or_else(|| format!("epoch value `{t}` is out of range"));
    }
    Err(format!(
        "`{t}` is not a timestamp (expected RFC 3339, YYYY-MM-DDThh:mm:ss or epoch seconds/milliseconds)"
    ))
}

fn from_epoch(n: f64) -> Option<DateTime<Utc>> {
    if !n.is_finite() {
        return None;
    }
    let millis = if n.abs() < EPOCH_MILLIS_THRESHOLD { n * 1000.0 } else { n };
    DateTime::from_timestamp_millis(millis.round() as i64)
}

fn value_timestamp(v: &Value) -> Result<DateTime<Utc>, String> {
    match v {
        Value::String(s) => parse_timestamp(s),
        Value::Number(n) => n
            .as_f64()
            .and_then(from_epoch)
            .ok_or_else(|| format!("epoch value `{n}` is out of range")),
        other => Err(format!("`{other}` is not a timestamp")),
    }
}

fn fmt(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn actual_time(p: &Params, ctx: &EvalContext<'_>) -> Result<DateTime<Utc>, Outcome> {
    let source = p.str("source").map_err(Outcome::from)?;
    match source {
        "file_mtime" => {
            let dst = p.path("dst").map_err(Outcome::from)?;
            let meta = std::fs::metadata(&dst)
                .map_err(|e| Outcome::error(ErrorClass::Io, format!("cannot stat {}: {e}", dst.display())))?;
            let mtime = meta
                .modified()
                .map_err(|e| Outcome::error(ErrorClass::Io, format!("no mtime for {}: {e}", dst.display())))?;
            Ok(DateTime::<Utc>::from(mtime))
        }
        "file_content" => {
            let dst = p.path("dst").map_err(Outcome::from)?;
            let pattern = p.str("pattern").map_err(Outcome::from)?;
            let re = Regex::new(pattern)
                .map_err(|e| Outcome::error(ErrorClass::BadQuery, format!("invalid regex: {e}")))?;
            let text = read_capped(&dst, ctx)?;
            let caps = re.captures(&text).ok_or_else(|| {
                Outcome::fail(
                    excerpt(&text),
                    pattern,
                    format!("no timestamp matching `{pattern}` in {}", dst.display()),
                )
            })?;
            let found = caps.get(1).or_else(|| caps.get(0)).expect("group 0 always matches");
            parse_timestamp(found.as_str()).map_err(|e| Outcome::error(ErrorClass::MalformedFile, e))
        }
        "value" => {
            let v = p.value("value").map_err(Outcome::from)?;
            value_timestamp(v).map_err(|e| Outcome::error(ErrorClass::BadParameter, e))
        }
        other => Err(Outcome::error(
            ErrorClass::BadParameter,
            format!("unknown source `{other}` (expected file_mtime, file_content or value)"),
        )),
    }
}

pub(super) fn timestamp_within(p: &Params, ctx: &EvalContext<'_>) -> Outcome {
    let tolerance = match p.u64("tolerance_ms") {
        Ok(t) => t,
        Err(e) => return e.into(),
    };
    let reference = match p.value("reference").map_err(Outcome::from).and_then(|v| {
        value_timestamp(v).map_err(|e| Outcome::error(ErrorClass::BadParameter, format!("reference: {e}")))
    }) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let actual = match actual_time(p, ctx) {
        Ok(a) => a,
        Err(o) => return o,
    };
    let delta = (actual - reference).num_milliseconds().unsigned_abs();
    if delta <= tolerance {
        Outcome::pass(format!("{delta} ms from reference (tolerance {tolerance} ms)"))
            .with_observed(fmt(actual))
            .with_expected(fmt(reference))
    } else {
        Outcome::fail(
            fmt(actual),
            fmt(reference),
            format!("{delta} ms from reference exceeds tolerance {tolerance} ms"),
        )
    }
}
