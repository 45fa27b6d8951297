//! Position-aware YAML loading.
//!
//! Playbooks need line/column information on every node for diagnostics, which
//! the usual serde bridges discard. This module builds a small node tree from
//! the `yaml-rust2` event stream and converts it to `serde_json::Value` for the
//! configuration documents that only need plain deserialization.

use std::fmt;

use serde::de::DeserializeOwned;
use serde_json::{Map, Number, Value};
use yaml_rust2::parser::{Event, MarkedEventReceiver, Parser};
use yaml_rust2::scanner::{Marker, TScalarStyle};

/// 1-based source position.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mark {
    pub line: usize,
    pub column: usize,
}

impl Mark {
    fn from_marker(m: Marker) -> Self {
        Mark {
            line: m.line().max(1),
            column: m.col() + 1,
        }
    }
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    /// `plain` is false for quoted and block scalars, which are always strings.
    Scalar { value: String, plain: bool },
    Seq(Vec<Node>),
    Map(Vec<(Node, Node)>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub mark: Mark,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{message} at line {}, column {}", mark.line, mark.column)]
pub struct YamlError {
    pub mark: Mark,
    pub message: String,
}

impl YamlError {
    pub fn new(mark: Mark, message: impl Into<String>) -> Self {
        YamlError {
            mark,
            message: message.into(),
        }
    }
}

enum Building {
    Seq(Mark, Vec<Node>),
    Map(Mark, Vec<(Node, Node)>, Option<Node>),
}

#[derive(Default)]
struct TreeBuilder {
    stack: Vec<Building>,
    root: Option<Node>,
    error: Option<YamlError>,
    documents: usize,
}

impl TreeBuilder {
    fn push_node(&mut self, node: Node) {
        match self.stack.last_mut() {
            None => {
                if self.root.is_none() {
                    self.root = Some(node);
                }
            }
            Some(Building::Seq(_, items)) => items.push(node),
            Some(Building::Map(_, entries, pending)) => match pending.take() {
                None => *pending = Some(node),
                Some(key) => entries.push((key, node)),
            },
        }
    }
}

impl MarkedEventReceiver for TreeBuilder {
    fn on_event(&mut self, ev: Event, marker: Marker) {
        if self.error.is_some() {
            return;
        }
        let mark = Mark::from_marker(marker);
        match ev {
            Event::DocumentStart => {
                self.documents += 1;
                if self.documents > 1 {
                    self.error = Some(YamlError::new(mark, "multiple documents in one file"));
                }
            }
            Event::Alias(_) => {
                self.error = Some(YamlError::new(mark, "YAML aliases are not supported"));
            }
            Event::Scalar(value, style, _, _) => {
                let plain = matches!(style, TScalarStyle::Plain);
                self.push_node(Node {
                    kind: NodeKind::Scalar { value, plain },
                    mark,
                });
            }
            Event::SequenceStart(..) => self.stack.push(Building::Seq(mark, Vec::new())),
            Event::MappingStart(..) => self.stack.push(Building::Map(mark, Vec::new(), None)),
            Event::SequenceEnd => {
                if let Some(Building::Seq(m, items)) = self.stack.pop() {
                    self.push_node(Node {
                        kind: NodeKind::Seq(items),
                        mark: m,
                    });
                }
            }
            Event::MappingEnd => {
                if let Some(Building::Map(m, entries, _)) = self.stack.pop() {
                    self.push_node(Node {
                        kind: NodeKind::Map(entries),
                        mark: m,
                    });
                }
            }
            _ => {}
        }
    }
}

/// Parse a single YAML document. Returns `Ok(None)` for an empty document.
pub fn parse(text: &str) -> Result<Option<Node>, YamlError> {
    let mut builder = TreeBuilder::default();
    let mut parser = Parser::new_from_str(text);
    parser.load(&mut builder, true).map_err(|e| {
        let m = *e.marker();
        YamlError::new(Mark::from_marker(m), e.info().to_string())
    })?;
    if let Some(err) = builder.error {
        return Err(err);
    }
    Ok(builder.root)
}

impl Node {
    pub fn as_str(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Scalar { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(&self.kind, NodeKind::Scalar { value, plain: true } if is_null_literal(value))
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            NodeKind::Scalar { .. } => "scalar",
            NodeKind::Seq(_) => "sequence",
            NodeKind::Map(_) => "mapping",
        }
    }

    /// Typed scalar interpretation following the YAML core schema.
    pub fn scalar_value(&self) -> Option<Value> {
        match &self.kind {
            NodeKind::Scalar { value, plain: false } => Some(Value::String(value.clone())),
            NodeKind::Scalar { value, plain: true } => Some(plain_scalar(value)),
            _ => None,
        }
    }

    /// Converts to JSON, rejecting duplicate and non-scalar mapping keys.
    pub fn to_json(&self) -> Result<Value, YamlError> {
        match &self.kind {
            NodeKind::Scalar { .. } => Ok(self.scalar_value().unwrap_or(Value::Null)),
            NodeKind::Seq(items) => items
                .iter()
                .map(Node::to_json)
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
            NodeKind::Map(entries) => {
                let mut map = Map::new();
                for (k, v) in entries {
                    let key = k
                        .as_str()
                        .ok_or_else(|| YamlError::new(k.mark, "mapping keys must be scalars"))?;
                    if map.contains_key(key) {
                        return Err(YamlError::new(k.mark, format!("duplicate key `{key}`")));
                    }
                    map.insert(key.to_string(), v.to_json()?);
                }
                Ok(Value::Object(map))
            }
        }
    }
}

fn is_null_literal(s: &str) -> bool {
    matches!(s, "" | "~" | "null" | "Null" | "NULL")
}

fn plain_scalar(s: &str) -> Value {
    if is_null_literal(s) {
        return Value::Null;
    }
    match s {
        "true" | "True" | "TRUE" => return Value::Bool(true),
        "false" | "False" | "FALSE" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::Number(i.into());
    }
    if looks_numeric(s) {
        if let Some(n) = s.parse::<f64>().ok().and_then(Number::from_f64) {
            return Value::Number(n);
        }
    }
    Value::String(s.to_string())
}

fn looks_numeric(s: &str) -> bool {
    let body = s.strip_prefix(['-', '+']).unwrap_or(s);
    !body.is_empty()
        && body.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '.')
        && body
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '-' | '+'))
}

/// Deserialize a YAML (or JSON) document into `T`.
pub fn from_str<T: DeserializeOwned>(text: &str) -> Result<T, YamlError> {
    let value = match parse(text)? {
        Some(node) => node.to_json()?,
        None => Value::Null,
    };
    serde_json::from_value(value).map_err(|e| YamlError::new(Mark::default(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_scalars_are_typed() {
        let v: Value = from_str("a: 1\nb: true\nc: \"1\"\nd: 2.5\ne:\nf: x").unwrap();
        assert_eq!(v["a"], Value::from(1));
        assert_eq!(v["b"], Value::Bool(true));
        assert_eq!(v["c"], Value::from("1"));
        assert_eq!(v["d"], Value::from(2.5));
        assert!(v["e"].is_null());
        assert_eq!(v["f"], Value::from("x"));
    }

    #[test]
    fn marks_are_one_based() {
        let node = parse("x:\n  - y\n").unwrap().unwrap();
        let NodeKind::Map(entries) = &node.kind else { panic!() };
        assert_eq!(entries[0].0.mark.line, 1);
        assert_eq!(entries[0].0.mark.column, 1);
        let NodeKind::Seq(items) = &entries[0].1.kind else { panic!() };
        assert_eq!(items[0].mark.line, 2);
        assert_eq!(items[0].mark.column, 5);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = from_str::<Value>("a: 1\na: 2\n").unwrap_err();
        assert!(err.message.contains("duplicate"));
        assert_eq!(err.mark.line, 2);
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse("a: [1, 2\nb: 3").unwrap_err();
        assert!(err.mark.line >= 1);
    }

    #[test]
    fn empty_document() {
        assert!(parse("").unwrap().is_none());
        assert!(parse("# just a comment\n").unwrap().is_none());
    }
}
