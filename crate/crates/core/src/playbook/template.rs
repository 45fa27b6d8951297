//! `{{ name }}` placeholder templates and the variable scope they render against.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{ *([a-z][a-z0-9_]*) *\}\}").expect("placeholder regex"));

static IDENTIFIER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[a-z][a-z0-9_]*$").expect("identifier regex"));

pub fn is_identifier(s: &str) -> bool {
    IDENTIFIER.is_match(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Text with zero or more `{{ identifier }}` placeholders. Anything not matching
/// the placeholder grammar exactly is literal text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateString {
    raw: String,
    segments: Vec<Segment>,
}

impl TemplateString {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let mut segments = Vec::new();
        let mut last = 0;
        for caps in PLACEHOLDER.captures_iter(&raw) {
            let whole = caps.get(0).expect("group 0");
            if whole.start() > last {
                segments.push(Segment::Literal(raw[last..whole.start()].to_string()));
            }
            segments.push(Segment::Placeholder(caps[1].to_string()));
            last = whole.end();
        }
        if last < raw.len() {
            segments.push(Segment::Literal(raw[last..].to_string()));
        }
        TemplateString { raw, segments }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Referenced identifiers in order of first appearance.
    pub fn identifiers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for seg in &self.segments {
            if let Segment::Placeholder(name) = seg {
                if !out.contains(&name.as_str()) {
                    out.push(name);
                }
            }
        }
        out
    }

    pub fn is_literal(&self) -> bool {
        self.segments.iter().all(|s| matches!(s, Segment::Literal(_)))
    }

    /// Substitutes every placeholder in a single pass; substituted text is never
    /// re-scanned for placeholders.
    pub fn render(&self, scope: &Scope) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.raw.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => out.push_str(&scope.lookup(name)?.to_string()),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for TemplateString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl From<&str> for TemplateString {
    fn from(s: &str) -> Self {
        TemplateString::new(s)
    }
}

/// Convenience wrapper over [`TemplateString::render`].
pub fn render_template(template: &TemplateString, scope: &Scope) -> Result<String, TemplateError> {
    template.render(scope)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("unresolved identifier `{0}`")]
    Unresolved(String),
    #[error("dynamic variable `{0}` read before capture")]
    UnsetDynamic(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScopeValue {
    Text(String),
    Number(f64),
    Bool(bool),
    /// A declared dynamic variable that has not been captured yet.
    Unset,
}

impl ScopeValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            ScopeValue::Number(n) => Some(*n),
            ScopeValue::Text(s) => s.trim().parse().ok(),
            _ => None,
        }
    }
}

impl fmt::Display for ScopeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeValue::Text(s) => f.write_str(s),
            ScopeValue::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => write!(f, "{}", *n as i64),
            ScopeValue::Number(n) => write!(f, "{n}"),
            ScopeValue::Bool(b) => write!(f, "{b}"),
            ScopeValue::Unset => Ok(()),
        }
    }
}

/// Variable bindings visible to templates, predicates and loop counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scope {
    values: BTreeMap<String, ScopeValue>,
}

impl Scope {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: ScopeValue) -> Option<ScopeValue> {
        self.values.insert(name.into(), value)
    }

    pub fn set_text(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.values.insert(name.into(), ScopeValue::Text(value.into()));
    }

    pub fn remove(&mut self, name: &str) -> Option<ScopeValue> {
        self.values.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&ScopeValue> {
        self.values.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn lookup(&self, name: &str) -> Result<&ScopeValue, TemplateError> {
        match self.values.get(name) {
            None => Err(TemplateError::Unresolved(name.to_string())),
            Some(ScopeValue::Unset) => Err(TemplateError::UnsetDynamic(name.to_string())),
            Some(v) => Ok(v),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ScopeValue)> {
        self.values.iter()
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Scope {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut scope = Scope::new();
        for (k, v) in iter {
            scope.set_text(k, v);
        }
        scope
    }
}
