use yaml_rust2::yaml::{Hash, Yaml};
use yaml_rust2::YamlEmitter;

use super::{Action, LoopCount, ParamValue, Playbook, Step, StepKind, TargetSpec};

fn s(v: &str) -> Yaml {
    Yaml::String(v.to_string())
}

fn map<const N: usize>(entries: [(&str, Yaml); N]) -> Yaml {
    let mut h = Hash::new();
    for (k, v) in entries {
        h.insert(s(k), v);
    }
    Yaml::Hash(h)
}

fn param(v: &ParamValue) -> Yaml {
    match v {
        ParamValue::Text(t) => s(t.raw()),
        ParamValue::Number(n) => match n.as_i64() {
            Some(i) => Yaml::Integer(i),
            None => Yaml::Real(n.to_string()),
        },
        ParamValue::Bool(b) => Yaml::Boolean(*b),
        ParamValue::Null => Yaml::Null,
        ParamValue::List(items) => Yaml::Array(items.iter().map(param).collect()),
        ParamValue::Map(entries) => {
            let mut h = Hash::new();
            for (k, v) in entries {
                h.insert(s(k), param(v));
            }
            Yaml::Hash(h)
        }
    }
}

fn target(t: &TargetSpec) -> Yaml {
    match t {
        TargetSpec::Image { reference } => map([("image", s(reference))]),
        TargetSpec::Text { value } => map([("text", s(value.raw()))]),
        TargetSpec::Coordinates { x, y } => map([(
            "coordinates",
            map([("x", Yaml::Integer((*x).into())), ("y", Yaml::Integer((*y).into()))]),
        )]),
    }
}

fn action(a: &Action) -> Yaml {
    let body = match a {
        Action::Click { button, target: t } => {
            map([("type", s(button.as_str())), ("target", target(t))])
        }
        Action::TypeText { text } => map([("text", s(text.raw()))]),
        Action::Scroll { direction, amount } => map([
            ("direction", s(direction.as_str())),
            ("amount", Yaml::Integer((*amount).into())),
        ]),
        Action::DragDrop { from, to } => map([("from", target(from)), ("to", target(to))]),
        Action::Command { command, shell } => {
            map([("command", s(command.raw())), ("shell", Yaml::Boolean(*shell))])
        }
        Action::ShareFile { direction, src, dst } => map([
            ("direction", s(direction.as_str())),
            ("src", s(src.raw())),
            ("dst", s(dst.raw())),
        ]),
        Action::Wait { duration_ms } => {
            map([("duration_ms", Yaml::Integer(*duration_ms as i64))])
        }
        Action::CaptureTime { into } => map([("into", s(into))]),
    };
    map([(a.kind_name(), body)])
}

fn steps(list: &[Step]) -> Yaml {
    Yaml::Array(list.iter().map(step).collect())
}

fn step(st: &Step) -> Yaml {
    match &st.kind {
        StepKind::Action(a) => action(a),
        StepKind::Test { name } => map([("test", s(name))]),
        StepKind::Loop(l) => {
            let mut h = Hash::new();
            h.insert(
                s("count"),
                match &l.count {
                    LoopCount::Literal(c) => Yaml::Integer((*c).into()),
                    LoopCount::Variable(v) => s(v),
                },
            );
            if let Some(i) = &l.index {
                h.insert(s("index"), s(i));
            }
            h.insert(s("actions"), steps(&l.body));
            map([("loop", Yaml::Hash(h))])
        }
        StepKind::Conditional(c) => {
            let mut h = Hash::new();
            h.insert(s("condition"), s(&c.predicate.to_string()));
            h.insert(s("then"), steps(&c.then));
            if let Some(e) = &c.otherwise {
                h.insert(s("else"), steps(e));
            }
            map([("if", Yaml::Hash(h))])
        }
    }
}

/// Canonical YAML form: keys in declaration order, every optional field that
/// has a default written out explicitly.
pub fn to_canonical_yaml(pb: &Playbook) -> String {
    let mut vars = Hash::new();
    for v in &pb.variables {
        let mut h = Hash::new();
        h.insert(s("type"), s(v.kind.as_str()));
        if let Some(value) = &v.value {
            h.insert(s("value"), s(value.raw()));
        }
        vars.insert(s(&v.name), Yaml::Hash(h));
    }
    let tests = pb
        .tests
        .iter()
        .map(|t| {
            let mut h = Hash::new();
            h.insert(s("name"), s(&t.name));
            h.insert(s("function"), s(&t.function));
            if !t.parameters.is_empty() {
                let mut p = Hash::new();
                for (k, v) in &t.parameters {
                    p.insert(s(k), param(v));
                }
                h.insert(s("parameter"), Yaml::Hash(p));
            }
            Yaml::Hash(h)
        })
        .collect();
    let mut root = Hash::new();
    root.insert(s("variables"), Yaml::Hash(vars));
    root.insert(s("tests"), Yaml::Array(tests));
    root.insert(s("actions"), steps(&pb.actions));

    let mut out = String::new();
    YamlEmitter::new(&mut out)
        .dump(&Yaml::Hash(root))
        .expect("emitting to a String cannot fail");
    out.push('\n');
    out
}
