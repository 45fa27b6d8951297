use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::RunReport;

/// Keys whose values are expected to differ between faithful repetitions.
const VOLATILE_KEYS: &[&str] = &["started_at", "finished_at", "duration_ms", "agent_clock", "message"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDifference {
    /// Step index, or `None` for report-level fields.
    pub step: Option<usize>,
    /// Step description from the first report.
    pub description: Option<String>,
    pub field: String,
    pub a: Value,
    pub b: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ReproVerdict {
    Reproduced,
    Diverged { differences: Vec<StepDifference> },
    NotComparable { reason: String },
}

fn timestamp_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:?\d{2})?").expect("valid regex")
    })
}

/// Replaces the run's own sandbox root and any timestamps in strings, and
/// drops timing keys.
fn normalize(v: &Value, root: Option<&str>) -> Value {
    match v {
        Value::String(s) => {
            let s = match root {
                Some(r) if !r.is_empty() => s.replace(r, "<root>"),
                _ => s.clone(),
            };
            Value::String(timestamp_re().replace_all(&s, "<timestamp>").into_owned())
        }
        Value::Array(items) => Value::Array(items.iter().map(|i| normalize(i, root)).collect()),
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| !VOLATILE_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), normalize(v, root)))
                .collect::<Map<_, _>>(),
        ),
        other => other.clone(),
    }
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<(String, Value, Value)>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let sub = format!("{path}.{k}");
                diff_values(&sub, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                diff_values(&format!("{path}[{i}]"), p, q, out);
            }
        }
        _ if a != b => out.push((path.to_string(), a.clone(), b.clone())),
        _ => {}
    }
}

/// Compares two runs of the same playbook in the same environment, ignoring
/// timing, run identity and sandbox location.
pub fn reproduce_check(a: &RunReport, b: &RunReport) -> ReproVerdict {
    if a.playbook_digest != b.playbook_digest {
        return ReproVerdict::NotComparable {
            reason: format!("playbook digests differ ({} vs {})", a.playbook_digest, b.playbook_digest),
        };
    }
    if a.environment.id != b.environment.id {
        return ReproVerdict::NotComparable {
            reason: format!("environments differ ({} vs {})", a.environment.id, b.environment.id),
        };
    }
    let mut differences = Vec::new();
    if a.verdict != b.verdict {
        differences.push(StepDifference {
            step: None,
            description: None,
            field: "verdict".into(),
            a: json!(a.verdict),
            b: json!(b.verdict),
        });
    }
    if a.steps.len() != b.steps.len() {
        differences.push(StepDifference {
            step: None,
            description: None,
            field: "steps.length".into(),
            a: json!(a.steps.len()),
            b: json!(b.steps.len()),
        });
    }
    let (ra, rb) = (a.sandbox_root.as_deref(), b.sandbox_root.as_deref());
    for (i, (sa, sb)) in a.steps.iter().zip(&b.steps).enumerate() {
        let fa = json!({"kind": sa.kind, "description": sa.description, "status": sa.status, "outcome": sa.outcome});
        let fb = json!({"kind": sb.kind, "description": sb.description, "status": sb.status, "outcome": sb.outcome});
        let mut found = Vec::new();
        diff_values("", &normalize(&fa, ra), &normalize(&fb, rb), &mut found);
        differences.extend(found.into_iter().map(|(field, x, y)| StepDifference {
            step: Some(i),
            description: Some(sa.description.clone()),
            field: field.trim_start_matches('.').to_string(),
            a: x,
            b: y,
        }));
    }
    if differences.is_empty() {
        ReproVerdict::Reproduced
    } else {
        ReproVerdict::Diverged { differences }
    }
}
