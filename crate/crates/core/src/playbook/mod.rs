//! Playbook data model: variables, test definitions and the step tree.

mod cursor;
mod parse;
mod serialize;
pub mod template;
mod validate;

use std::fmt;

use serde_json::Value;

pub use cursor::{CursorError, ExecutionCursor};
pub use parse::{parse_playbook, Diagnostic, ParseDiagnostics};
pub use serialize::to_canonical_yaml;
pub use template::{is_identifier, render_template, Scope, ScopeValue, TemplateError, TemplateString};
pub use validate::{validate, Finding, ValidationReport};

/// Default maximum nesting depth of loops and conditionals.
pub const MAX_NESTING_DEPTH: usize = 8;

/// Source position of a playbook node. Locations never take part in equality, so
/// a re-parsed canonical form compares equal to the original.
#[derive(Debug, Clone, Copy, Default)]
pub struct Location {
    pub line: usize,
    pub column: usize,
}

impl PartialEq for Location {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for Location {}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Playbook {
    pub variables: Vec<VariableDecl>,
    pub tests: Vec<TestDef>,
    pub actions: Vec<Step>,
}

impl Playbook {
    pub fn variable(&self, name: &str) -> Option<&VariableDecl> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn test(&self, name: &str) -> Option<&TestDef> {
        self.tests.iter().find(|t| t.name == name)
    }

    /// Number of leaf steps when every loop count is a literal and no
    /// conditionals are present; `None` otherwise.
    pub fn static_step_count(&self) -> Option<u64> {
        fn count(steps: &[Step]) -> Option<u64> {
            steps.iter().try_fold(0u64, |acc, s| {
                let n = match &s.kind {
                    StepKind::Action(_) | StepKind::Test { .. } => 1,
                    StepKind::Loop(l) => match l.count {
                        LoopCount::Literal(c) => u64::from(c) * count(&l.body)?,
                        LoopCount::Variable(_) => return None,
                    },
                    StepKind::Conditional(_) => return None,
                };
                Some(acc + n)
            })
        }
        count(&self.actions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    String,
    Path,
    Number,
    Boolean,
    Dynamic,
}

impl VarKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VarKind::String => "string",
            VarKind::Path => "path",
            VarKind::Number => "number",
            VarKind::Boolean => "boolean",
            VarKind::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "string" => VarKind::String,
            "path" => VarKind::Path,
            "number" => VarKind::Number,
            "boolean" => VarKind::Boolean,
            "dynamic" => VarKind::Dynamic,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableDecl {
    pub name: String,
    pub kind: VarKind,
    /// Absent exactly when `kind` is dynamic.
    pub value: Option<TemplateString>,
    pub loc: Location,
}

/// Parameter value of a test definition. Strings are templates.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Text(TemplateString),
    Number(serde_json::Number),
    Bool(bool),
    Null,
    List(Vec<ParamValue>),
    Map(Vec<(String, ParamValue)>),
}

impl ParamValue {
    pub fn render(&self, scope: &Scope) -> Result<Value, TemplateError> {
        Ok(match self {
            ParamValue::Text(t) => Value::String(t.render(scope)?),
            ParamValue::Number(n) => Value::Number(n.clone()),
            ParamValue::Bool(b) => Value::Bool(*b),
            ParamValue::Null => Value::Null,
            ParamValue::List(items) => Value::Array(
                items
                    .iter()
                    .map(|i| i.render(scope))
                    .collect::<Result<_, _>>()?,
            ),
            ParamValue::Map(entries) => {
                let mut map = serde_json::Map::new();
                for (k, v) in entries {
                    map.insert(k.clone(), v.render(scope)?);
                }
                Value::Object(map)
            }
        })
    }

    pub fn templates(&self) -> Vec<&TemplateString> {
        match self {
            ParamValue::Text(t) => vec![t],
            ParamValue::List(items) => items.iter().flat_map(ParamValue::templates).collect(),
            ParamValue::Map(entries) => entries.iter().flat_map(|(_, v)| v.templates()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestDef {
    pub name: String,
    pub function: String,
    pub parameters: Vec<(String, ParamValue)>,
    pub loc: Location,
}

impl TestDef {
    pub fn parameter(&self, name: &str) -> Option<&ParamValue> {
        self.parameters.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn render_parameters(
        &self,
        scope: &Scope,
    ) -> Result<serde_json::Map<String, Value>, TemplateError> {
        let mut out = serde_json::Map::new();
        for (k, v) in &self.parameters {
            out.insert(k.clone(), v.render(scope)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub kind: StepKind,
    pub loc: Location,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Action(Action),
    Test { name: String },
    Loop(LoopStep),
    Conditional(Conditional),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoopCount {
    Literal(u32),
    /// Name of a number variable, resolved when the loop is reached.
    Variable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopStep {
    pub count: LoopCount,
    /// Variable bound to the 1-based iteration number inside the body.
    pub index: Option<String>,
    pub body: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub predicate: Predicate,
    pub then: Vec<Step>,
    pub otherwise: Option<Vec<Step>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Text(String),
    Bool(bool),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{}", ScopeValue::Number(*n)),
            Literal::Text(s) => write!(f, "{s:?}"),
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// `variable <op> literal`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub variable: String,
    pub op: CmpOp,
    pub literal: Literal,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PredicateError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("cannot compare `{variable}` ({value}) with {literal} using `{op}`")]
    Incomparable {
        variable: String,
        value: String,
        literal: String,
        op: &'static str,
    },
}

impl Predicate {
    pub fn evaluate(&self, scope: &Scope) -> Result<bool, PredicateError> {
        let value = scope.lookup(&self.variable)?;
        let incomparable = || PredicateError::Incomparable {
            variable: self.variable.clone(),
            value: value.to_string(),
            literal: self.literal.to_string(),
            op: self.op.as_str(),
        };
        let ord = match &self.literal {
            Literal::Number(n) => {
                let v = value.as_number().ok_or_else(incomparable)?;
                v.partial_cmp(n).ok_or_else(incomparable)?
            }
            Literal::Text(s) => value.to_string().as_bytes().cmp(s.as_bytes()),
            Literal::Bool(b) => {
                let v = match value {
                    ScopeValue::Bool(v) => *v,
                    ScopeValue::Text(t) if t == "true" => true,
                    ScopeValue::Text(t) if t == "false" => false,
                    _ => return Err(incomparable()),
                };
                if !matches!(self.op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(incomparable());
                }
                v.cmp(b)
            }
        };
        Ok(self.op.holds(ord))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.variable, self.op.as_str(), self.literal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickButton {
    Left,
    Right,
    Double,
}

impl ClickButton {
    pub fn as_str(self) -> &'static str {
        match self {
            ClickButton::Left => "left",
            ClickButton::Right => "right",
            ClickButton::Double => "double",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShareDirection {
    HostToGuest,
    GuestToHost,
}

impl ShareDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ShareDirection::HostToGuest => "host_to_guest",
            ShareDirection::GuestToHost => "guest_to_host",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Image { reference: String },
    Text { value: TemplateString },
    Coordinates { x: u32, y: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Click {
        button: ClickButton,
        target: TargetSpec,
    },
    TypeText {
        text: TemplateString,
    },
    Scroll {
        direction: ScrollDirection,
        amount: u32,
    },
    DragDrop {
        from: TargetSpec,
        to: TargetSpec,
    },
    Command {
        command: TemplateString,
        shell: bool,
    },
    ShareFile {
        direction: ShareDirection,
        src: TemplateString,
        dst: TemplateString,
    },
    Wait {
        duration_ms: u64,
    },
    CaptureTime {
        into: String,
    },
}

impl Action {
    /// Playbook key of this action kind.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Action::Click { .. } => "click",
            Action::TypeText { .. } => "type_text",
            Action::Scroll { .. } => "scroll",
            Action::DragDrop { .. } => "drag_drop",
            Action::Command { .. } => "command",
            Action::ShareFile { .. } => "share_file",
            Action::Wait { .. } => "wait",
            Action::CaptureTime { .. } => "capture_time",
        }
    }

    pub fn templates(&self) -> Vec<&TemplateString> {
        fn target(t: &TargetSpec) -> Option<&TemplateString> {
            match t {
                TargetSpec::Text { value } => Some(value),
                _ => None,
            }
        }
        match self {
            Action::Click { target: t, .. } => target(t).into_iter().collect(),
            Action::TypeText { text } => vec![text],
            Action::DragDrop { from, to } => target(from).into_iter().chain(target(to)).collect(),
            Action::Command { command, .. } => vec![command],
            Action::ShareFile { src, dst, .. } => vec![src, dst],
            Action::Scroll { .. } | Action::Wait { .. } | Action::CaptureTime { .. } => Vec::new(),
        }
    }
}
