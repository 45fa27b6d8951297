use std::collections::HashSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;

use super::template::{is_identifier, TemplateString};
use super::{
    Action, ClickButton, CmpOp, Conditional, Literal, Location, LoopCount, LoopStep, ParamValue,
    Playbook, Predicate, ScrollDirection, ShareDirection, Step, StepKind, TargetSpec, TestDef,
    VarKind, VariableDecl, MAX_NESTING_DEPTH,
};
use crate::yaml::{self, Mark, Node, NodeKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostics(pub Vec<Diagnostic>);

impl fmt::Display for ParseDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseDiagnostics {}

const TOP_LEVEL_KEYS: &[&str] = &["variables", "tests", "actions"];

static CONDITION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:\{\{\s*)?([a-z][a-z0-9_]*)(?:\s*\}\})?\s*(==|!=|<=|>=|<|>)\s*(.+?)\s*$")
        .expect("condition regex")
});

/// Parse a playbook document. Every error found is reported, each with a
/// 1-based line and column.
pub fn parse_playbook(source: &[u8]) -> Result<Playbook, ParseDiagnostics> {
    let text = std::str::from_utf8(source).map_err(|e| {
        ParseDiagnostics(vec![Diagnostic {
            line: 1,
            column: 1,
            message: format!("playbook is not valid UTF-8: {e}"),
        }])
    })?;
    let root = yaml::parse(text).map_err(|e| {
        ParseDiagnostics(vec![Diagnostic {
            line: e.mark.line,
            column: e.mark.column,
            message: format!("malformed document: {}", e.message),
        }])
    })?;
    let mut p = Parser::default();
    let playbook = p.document(root.as_ref());
    if p.diags.is_empty() {
        Ok(playbook)
    } else {
        Err(ParseDiagnostics(p.diags))
    }
}

fn loc(mark: Mark) -> Location {
    Location {
        line: mark.line,
        column: mark.column,
    }
}

type Entries = [(Node, Node)];

#[derive(Default)]
struct Parser {
    diags: Vec<Diagnostic>,
}

impl Parser {
    fn error(&mut self, mark: Mark, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            line: mark.line,
            column: mark.column,
            message: message.into(),
        });
    }

    fn mapping<'n>(&mut self, node: &'n Node, what: &str) -> Option<&'n Entries> {
        match &node.kind {
            NodeKind::Map(entries) => {
                let mut seen = HashSet::new();
                for (k, _) in entries {
                    match k.as_str() {
                        Some(key) if !seen.insert(key) => {
                            self.error(k.mark, format!("duplicate key `{key}` in {what}"))
                        }
                        None => self.error(k.mark, format!("{what} keys must be scalars")),
                        _ => {}
                    }
                }
                Some(entries)
            }
            _ => {
                self.error(
                    node.mark,
                    format!("{what} must be a mapping, found {}", node.kind_name()),
                );
                None
            }
        }
    }

    fn sequence<'n>(&mut self, node: &'n Node, what: &str) -> Option<&'n [Node]> {
        match &node.kind {
            NodeKind::Seq(items) => Some(items),
            _ => {
                self.error(
                    node.mark,
                    format!("{what} must be a sequence, found {}", node.kind_name()),
                );
                None
            }
        }
    }

    fn check_keys(&mut self, entries: &Entries, allowed: &[&str], what: &str) {
        for (k, _) in entries {
            if let Some(key) = k.as_str() {
                if !allowed.contains(&key) {
                    self.error(
                        k.mark,
                        format!("unknown key `{key}` in {what} (expected one of: {})", allowed.join(", ")),
                    );
                }
            }
        }
    }

    fn scalar(&mut self, node: &Node, what: &str) -> Option<String> {
        match &node.kind {
            NodeKind::Scalar { value, .. } => Some(value.clone()),
            _ => {
                self.error(node.mark, format!("{what} must be a scalar, found {}", node.kind_name()));
                None
            }
        }
    }

    fn required<'n>(&mut self, entries: &'n Entries, key: &str, at: Mark, what: &str) -> Option<&'n Node> {
        let found = get(entries, key);
        if found.is_none() {
            self.error(at, format!("{what} is missing required key `{key}`"));
        }
        found
    }

    fn identifier(&mut self, node: &Node, what: &str) -> Option<String> {
        let s = self.scalar(node, what)?;
        if is_identifier(&s) {
            Some(s)
        } else {
            self.error(node.mark, format!("{what} `{s}` must match [a-z][a-z0-9_]*"));
            None
        }
    }

    fn unsigned(&mut self, node: &Node, what: &str) -> Option<u64> {
        let s = self.scalar(node, what)?;
        match s.trim().parse::<u64>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.error(node.mark, format!("{what} must be a non-negative integer, found `{s}`"));
                None
            }
        }
    }

    fn boolean(&mut self, node: &Node, what: &str) -> Option<bool> {
        match node.scalar_value() {
            Some(serde_json::Value::Bool(b)) => Some(b),
            _ => {
                self.error(node.mark, format!("{what} must be true or false"));
                None
            }
        }
    }

    fn document(&mut self, root: Option<&Node>) -> Playbook {
        let mut pb = Playbook {
            variables: Vec::new(),
            tests: Vec::new(),
            actions: Vec::new(),
        };
        let Some(root) = root.filter(|r| !r.is_null()) else {
            self.error(
                Mark { line: 1, column: 1 },
                "`actions` must contain at least one step: the step sequence is non-empty",
            );
            return pb;
        };
        let Some(entries) = self.mapping(root, "playbook") else {
            return pb;
        };
        for (k, _) in entries {
            if let Some(key) = k.as_str() {
                if !TOP_LEVEL_KEYS.contains(&key) {
                    self.error(k.mark, format!("unknown top-level key `{key}`"));
                }
            }
        }
        if let Some(vars) = get(entries, "variables").filter(|n| !n.is_null()) {
            pb.variables = self.variables(vars);
        }
        if let Some(tests) = get(entries, "tests").filter(|n| !n.is_null()) {
            pb.tests = self.tests(tests);
        }
        match get(entries, "actions").filter(|n| !n.is_null()) {
            Some(actions) => {
                if let Some(items) = self.sequence(actions, "`actions`") {
                    pb.actions = self.steps(items, 1);
                    if items.is_empty() {
                        self.error(
                            actions.mark,
                            "`actions` must contain at least one step: the step sequence is non-empty",
                        );
                    }
                }
            }
            None => self.error(
                root.mark,
                "`actions` must contain at least one step: the step sequence is non-empty",
            ),
        }
        let declared: HashSet<&str> = pb.tests.iter().map(|t| t.name.as_str()).collect();
        let mut dangling = Vec::new();
        walk_steps(&pb.actions, &mut |step| {
            if let StepKind::Test { name } = &step.kind {
                if !declared.contains(name.as_str()) {
                    dangling.push((step.loc, name.clone()));
                }
            }
        });
        for (l, name) in dangling {
            self.error(
                Mark {
                    line: l.line,
                    column: l.column,
                },
                format!("step invokes undeclared test `{name}`"),
            );
        }
        pb
    }

    fn variables(&mut self, node: &Node) -> Vec<VariableDecl> {
        let Some(entries) = self.mapping(node, "`variables`") else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (k, v) in entries {
            let Some(name) = self.identifier(k, "variable name") else { continue };
            let Some(body) = self.mapping(v, &format!("variable `{name}`")) else { continue };
            self.check_keys(body, &["type", "value"], &format!("variable `{name}`"));
            let kind = match self
                .required(body, "type", v.mark, &format!("variable `{name}`"))
                .and_then(|t| self.scalar(t, "variable type").map(|s| (t.mark, s)))
            {
                Some((mark, s)) => match VarKind::parse(&s) {
                    Some(k) => k,
                    None => {
                        self.error(
                            mark,
                            format!("unknown variable type `{s}` (expected string, path, number, boolean or dynamic)"),
                        );
                        continue;
                    }
                },
                None => continue,
            };
            let value_node = get(body, "value").filter(|n| !n.is_null());
            let value = match (kind, value_node) {
                (VarKind::Dynamic, Some(n)) => {
                    self.error(n.mark, format!("dynamic variable `{name}` must not carry a value"));
                    None
                }
                (VarKind::Dynamic, None) => None,
                (_, None) => {
                    self.error(v.mark, format!("variable `{name}` of type {} needs a value", kind.as_str()));
                    None
                }
                (_, Some(n)) => {
                    let Some(raw) = self.scalar(n, "variable value") else { continue };
                    let t = TemplateString::new(raw.clone());
                    if t.is_literal() {
                        match kind {
                            VarKind::Number if raw.trim().parse::<f64>().is_err() => {
                                self.error(n.mark, format!("number variable `{name}` has non-numeric value `{raw}`"))
                            }
                            VarKind::Boolean if raw != "true" && raw != "false" => {
                                self.error(n.mark, format!("boolean variable `{name}` must be true or false"))
                            }
                            _ => {}
                        }
                    }
                    Some(t)
                }
            };
            out.push(VariableDecl {
                name,
                kind,
                value,
                loc: loc(k.mark),
            });
        }
        out
    }

    fn tests(&mut self, node: &Node) -> Vec<TestDef> {
        let Some(items) = self.sequence(node, "`tests`") else {
            return Vec::new();
        };
        let mut out: Vec<TestDef> = Vec::new();
        for item in items {
            let Some(body) = self.mapping(item, "test definition") else { continue };
            self.check_keys(body, &["name", "function", "parameter"], "test definition");
            let name = self
                .required(body, "name", item.mark, "test definition")
                .and_then(|n| self.identifier(n, "test name"));
            let function = self
                .required(body, "function", item.mark, "test definition")
                .and_then(|n| self.identifier(n, "test function"));
            let mut parameters = Vec::new();
            if let Some(params) = get(body, "parameter").filter(|n| !n.is_null()) {
                if let Some(entries) = self.mapping(params, "test parameters") {
                    for (k, v) in entries {
                        if let Some(key) = k.as_str() {
                            parameters.push((key.to_string(), param_value(v)));
                        }
                    }
                }
            }
            let (Some(name), Some(function)) = (name, function) else { continue };
            if out.iter().any(|t| t.name == name) {
                self.error(item.mark, format!("duplicate test name `{name}`"));
                continue;
            }
            out.push(TestDef {
                name,
                function,
                parameters,
                loc: loc(item.mark),
            });
        }
        out
    }

    fn steps(&mut self, items: &[Node], depth: usize) -> Vec<Step> {
        items.iter().filter_map(|i| self.step(i, depth)).collect()
    }

    fn step(&mut self, node: &Node, depth: usize) -> Option<Step> {
        let entries = self.mapping(node, "step")?;
        if entries.len() != 1 {
            self.error(
                node.mark,
                format!("a step must have exactly one action key, found {}", entries.len()),
            );
            return None;
        }
        let (k, v) = &entries[0];
        let key = k.as_str()?;
        let what = format!("`{key}` step");
        let kind = match key {
            "test" => StepKind::Test {
                name: self.identifier(v, "test reference")?,
            },
            "loop" | "if" if depth >= MAX_NESTING_DEPTH => {
                self.error(
                    k.mark,
                    format!("loops and conditionals nest deeper than the limit of {MAX_NESTING_DEPTH}"),
                );
                return None;
            }
            "loop" => StepKind::Loop(self.loop_step(v, depth)?),
            "if" => StepKind::Conditional(self.conditional(v, depth)?),
            _ => {
                let body = match key {
                    "command" | "click" | "type_text" | "scroll" | "drag_drop" | "share_file"
                    | "wait" | "capture_time" => self.mapping(v, &what)?,
                    _ => {
                        self.error(k.mark, format!("unknown action kind `{key}`"));
                        return None;
                    }
                };
                StepKind::Action(self.action(key, body, v.mark, &what)?)
            }
        };
        Some(Step {
            kind,
            loc: loc(k.mark),
        })
    }

    fn action(&mut self, key: &str, body: &Entries, at: Mark, what: &str) -> Option<Action> {
        let template = |p: &mut Self, field: &str| -> Option<TemplateString> {
            let n = p.required(body, field, at, what)?;
            p.scalar(n, field).map(TemplateString::new)
        };
        Some(match key {
            "command" => {
                self.check_keys(body, &["command", "shell"], what);
                let command = template(self, "command")?;
                let shell = match get(body, "shell") {
                    Some(n) => self.boolean(n, "`shell`")?,
                    None => false,
                };
                Action::Command { command, shell }
            }
            "click" => {
                self.check_keys(body, &["type", "target"], what);
                let button = match get(body, "type") {
                    None => ClickButton::Left,
                    Some(n) => match self.scalar(n, "click type")?.as_str() {
                        "left" => ClickButton::Left,
                        "right" => ClickButton::Right,
                        "double" => ClickButton::Double,
                        other => {
                            self.error(n.mark, format!("unknown click type `{other}` (expected left, right or double)"));
                            return None;
                        }
                    },
                };
                let target = self.required(body, "target", at, what)?;
                Action::Click {
                    button,
                    target: self.target(target)?,
                }
            }
            "type_text" => {
                self.check_keys(body, &["text"], what);
                Action::TypeText {
                    text: template(self, "text")?,
                }
            }
            "scroll" => {
                self.check_keys(body, &["direction", "amount"], what);
                let dir = self.required(body, "direction", at, what)?;
                let direction = match self.scalar(dir, "scroll direction")?.as_str() {
                    "up" => ScrollDirection::Up,
                    "down" => ScrollDirection::Down,
                    "left" => ScrollDirection::Left,
                    "right" => ScrollDirection::Right,
                    other => {
                        self.error(dir.mark, format!("unknown scroll direction `{other}`"));
                        return None;
                    }
                };
                let amount = match get(body, "amount") {
                    Some(n) => u32::try_from(self.unsigned(n, "scroll amount")?).ok()?,
                    None => 1,
                };
                Action::Scroll { direction, amount }
            }
            "drag_drop" => {
                self.check_keys(body, &["from", "to"], what);
                let from = self.required(body, "from", at, what)?;
                let to = self.required(body, "to", at, what)?;
                let from = self.target(from);
                let to = self.target(to);
                Action::DragDrop {
                    from: from?,
                    to: to?,
                }
            }
            "share_file" => {
                self.check_keys(body, &["direction", "src", "dst"], what);
                let dir = self.required(body, "direction", at, what)?;
                let direction = match self.scalar(dir, "share direction")?.as_str() {
                    "host_to_guest" => ShareDirection::HostToGuest,
                    "guest_to_host" => ShareDirection::GuestToHost,
                    other => {
                        self.error(
                            dir.mark,
                            format!("unknown share direction `{other}` (expected host_to_guest or guest_to_host)"),
                        );
                        return None;
                    }
                };
                let src = template(self, "src")?;
                let dst = template(self, "dst")?;
                Action::ShareFile { direction, src, dst }
            }
            "wait" => {
                self.check_keys(body, &["duration_ms"], what);
                let n = self.required(body, "duration_ms", at, what)?;
                Action::Wait {
                    duration_ms: self.unsigned(n, "`duration_ms`")?,
                }
            }
            "capture_time" => {
                self.check_keys(body, &["into"], what);
                let n = self.required(body, "into", at, what)?;
                Action::CaptureTime {
                    into: self.identifier(n, "capture target")?,
                }
            }
            _ => unreachable!("action kinds are filtered by the caller"),
        })
    }

    fn target(&mut self, node: &Node) -> Option<TargetSpec> {
        let entries = self.mapping(node, "target")?;
        self.check_keys(entries, &["image", "text", "coordinates"], "target");
        if entries.len() != 1 {
            self.error(
                node.mark,
                "target must set exactly one of `image`, `text` or `coordinates`",
            );
            return None;
        }
        let (k, v) = &entries[0];
        match k.as_str()? {
            "image" => Some(TargetSpec::Image {
                reference: self.scalar(v, "image reference")?,
            }),
            "text" => Some(TargetSpec::Text {
                value: TemplateString::new(self.scalar(v, "target text")?),
            }),
            "coordinates" => {
                let body = self.mapping(v, "coordinates")?;
                self.check_keys(body, &["x", "y"], "coordinates");
                let x = self.required(body, "x", v.mark, "coordinates")?;
                let y = self.required(body, "y", v.mark, "coordinates")?;
                let x = u32::try_from(self.unsigned(x, "x")?).ok()?;
                let y = u32::try_from(self.unsigned(y, "y")?).ok()?;
                Some(TargetSpec::Coordinates { x, y })
            }
            _ => None,
        }
    }

    fn loop_step(&mut self, node: &Node, depth: usize) -> Option<LoopStep> {
        let body = self.mapping(node, "`loop` step")?;
        self.check_keys(body, &["count", "index", "actions"], "`loop` step");
        let count_node = self.required(body, "count", node.mark, "`loop` step")?;
        let count = match count_node.scalar_value() {
            Some(serde_json::Value::Number(n)) => match n.as_u64() {
                Some(c) if c >= 1 && c <= u64::from(u32::MAX) => LoopCount::Literal(c as u32),
                _ => {
                    self.error(count_node.mark, format!("loop count must be an integer >= 1, found {n}"));
                    return None;
                }
            },
            Some(serde_json::Value::String(s)) => {
                let Some(name) = variable_reference(&s) else {
                    self.error(
                        count_node.mark,
                        format!("loop count must be an integer >= 1 or a variable reference, found `{s}`"),
                    );
                    return None;
                };
                LoopCount::Variable(name)
            }
            _ => {
                self.error(count_node.mark, "loop count must be an integer >= 1 or a variable reference");
                return None;
            }
        };
        let index = match get(body, "index") {
            Some(n) => Some(self.identifier(n, "loop index")?),
            None => None,
        };
        let actions = self.required(body, "actions", node.mark, "`loop` step")?;
        let items = self.sequence(actions, "loop body")?;
        if items.is_empty() {
            self.error(actions.mark, "loop body must contain at least one step");
        }
        Some(LoopStep {
            count,
            index,
            body: self.steps(items, depth + 1),
        })
    }

    fn conditional(&mut self, node: &Node, depth: usize) -> Option<Conditional> {
        let body = self.mapping(node, "`if` step")?;
        self.check_keys(body, &["condition", "then", "else"], "`if` step");
        let cond = self.required(body, "condition", node.mark, "`if` step")?;
        let predicate = self.predicate(cond)?;
        let then_node = self.required(body, "then", node.mark, "`if` step")?;
        let then_items = self.sequence(then_node, "`then` branch")?;
        let then = self.steps(then_items, depth + 1);
        let otherwise = match get(body, "else") {
            Some(n) => {
                let items = self.sequence(n, "`else` branch")?;
                Some(self.steps(items, depth + 1))
            }
            None => None,
        };
        Some(Conditional {
            predicate,
            then,
            otherwise,
        })
    }

    fn predicate(&mut self, node: &Node) -> Option<Predicate> {
        let text = self.scalar(node, "condition")?;
        let Some(caps) = CONDITION.captures(&text) else {
            self.error(
                node.mark,
                format!("condition `{text}` must have the form `<variable> <op> <literal>` with op one of == != < <= > >="),
            );
            return None;
        };
        let op = match &caps[2] {
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            ">" => CmpOp::Gt,
            _ => CmpOp::Ge,
        };
        let lit = &caps[3];
        let literal = if let Some(s) = strip_quotes(lit) {
            Literal::Text(s.to_string())
        } else if lit == "true" || lit == "false" {
            Literal::Bool(lit == "true")
        } else if let Ok(n) = lit.parse::<f64>() {
            Literal::Number(n)
        } else {
            Literal::Text(lit.to_string())
        };
        Some(Predicate {
            variable: caps[1].to_string(),
            op,
            literal,
        })
    }
}

/// `name` or `{{ name }}`.
fn variable_reference(s: &str) -> Option<String> {
    let s = s.trim();
    if is_identifier(s) {
        return Some(s.to_string());
    }
    let t = TemplateString::new(s);
    match t.identifiers().as_slice() {
        [only] if s.starts_with("{{") && s.ends_with("}}") && s[2..s.len() - 2].trim() == *only => {
            Some(only.to_string())
        }
        _ => None,
    }
}

fn strip_quotes(s: &str) -> Option<&str> {
    let bytes = s.as_bytes();
    if bytes.len() >= 2
        && ((bytes[0] == b'"' && bytes[bytes.len() - 1] == b'"')
            || (bytes[0] == b'\'' && bytes[bytes.len() - 1] == b'\''))
    {
        Some(&s[1..s.len() - 1])
    } else {
        None
    }
}

fn get<'n>(entries: &'n Entries, key: &str) -> Option<&'n Node> {
    entries
        .iter()
        .find(|(k, _)| k.as_str() == Some(key))
        .map(|(_, v)| v)
}

fn param_value(node: &Node) -> ParamValue {
    match &node.kind {
        NodeKind::Scalar { value, plain: false } => ParamValue::Text(TemplateString::new(value.clone())),
        NodeKind::Scalar { value, plain: true } => match node.scalar_value() {
            Some(serde_json::Value::Null) => ParamValue::Null,
            Some(serde_json::Value::Bool(b)) => ParamValue::Bool(b),
            Some(serde_json::Value::Number(n)) => ParamValue::Number(n),
            _ => ParamValue::Text(TemplateString::new(value.clone())),
        },
        NodeKind::Seq(items) => ParamValue::List(items.iter().map(param_value).collect()),
        NodeKind::Map(entries) => ParamValue::Map(
            entries
                .iter()
                .filter_map(|(k, v)| k.as_str().map(|key| (key.to_string(), param_value(v))))
                .collect(),
        ),
    }
}

pub(crate) fn walk_steps<'a>(steps: &'a [Step], f: &mut impl FnMut(&'a Step)) {
    for step in steps {
        f(step);
        match &step.kind {
            StepKind::Loop(l) => walk_steps(&l.body, f),
            StepKind::Conditional(c) => {
                walk_steps(&c.then, f);
                if let Some(e) = &c.otherwise {
                    walk_steps(e, f);
                }
            }
            _ => {}
        }
    }
}
