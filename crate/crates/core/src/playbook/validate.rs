use std::collections::BTreeSet;
use std::fmt;

use super::parse::walk_steps;
use super::{Action, Location, LoopCount, Playbook, StepKind, TemplateString, VarKind};
use crate::assertions::AssertionRegistry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    UndeclaredIdentifier {
        location: Location,
        context: String,
        name: String,
    },
    UnknownFunction {
        location: Location,
        test: String,
        function: String,
    },
    MissingParameter {
        location: Location,
        test: String,
        function: String,
        parameter: String,
    },
    CaptureIntoNonDynamic {
        location: Location,
        variable: String,
    },
}

impl Finding {
    pub fn location(&self) -> Location {
        match self {
            Finding::UndeclaredIdentifier { location, .. }
            | Finding::UnknownFunction { location, .. }
            | Finding::MissingParameter { location, .. }
            | Finding::CaptureIntoNonDynamic { location, .. } => *location,
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::UndeclaredIdentifier { location, context, name } => {
                write!(f, "{location}: undeclared identifier `{name}` in {context}")
            }
            Finding::UnknownFunction { location, test, function } => {
                write!(f, "{location}: test `{test}` uses unknown assertion function `{function}`")
            }
            Finding::MissingParameter { location, test, function, parameter } => write!(
                f,
                "{location}: test `{test}` is missing required parameter `{parameter}` of `{function}`"
            ),
            Finding::CaptureIntoNonDynamic { location, variable } => write!(
                f,
                "{location}: capture_time targets `{variable}`, which is not a declared dynamic variable"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Static checks against the assertion registry and the set of system
/// variables the target environment provides. Findings come out in document
/// order.
pub fn validate(
    pb: &Playbook,
    registry: &AssertionRegistry,
    sys_vars: &BTreeSet<String>,
) -> ValidationReport {
    let mut findings = Vec::new();

    let mut loop_indices = BTreeSet::new();
    walk_steps(&pb.actions, &mut |s| {
        if let StepKind::Loop(l) = &s.kind {
            if let Some(i) = &l.index {
                loop_indices.insert(i.clone());
            }
        }
    });

    let mut check = |t: &TemplateString, known: &dyn Fn(&str) -> bool, location: Location, context: &str| {
        for name in t.identifiers() {
            if !known(name) {
                findings.push(Finding::UndeclaredIdentifier {
                    location,
                    context: context.to_string(),
                    name: name.to_string(),
                });
            }
        }
    };

    // Variable values may use system variables and earlier declarations.
    for (idx, v) in pb.variables.iter().enumerate() {
        if let Some(value) = &v.value {
            let earlier = &pb.variables[..idx];
            let known = |n: &str| sys_vars.contains(n) || earlier.iter().any(|e| e.name == n);
            check(value, &known, v.loc, &format!("variable `{}`", v.name));
        }
    }

    let declared = |n: &str| {
        sys_vars.contains(n) || pb.variable(n).is_some() || loop_indices.contains(n)
    };

    let mut test_findings = Vec::new();
    for t in &pb.tests {
        for (pname, pvalue) in &t.parameters {
            for tmpl in pvalue.templates() {
                check(tmpl, &declared, t.loc, &format!("parameter `{pname}` of test `{}`", t.name));
            }
        }
        match registry.descriptor(&t.function) {
            None => test_findings.push(Finding::UnknownFunction {
                location: t.loc,
                test: t.name.clone(),
                function: t.function.clone(),
            }),
            Some(desc) => {
                for p in desc.params.iter().filter(|p| p.required) {
                    if t.parameter(&p.name).is_none() {
                        test_findings.push(Finding::MissingParameter {
                            location: t.loc,
                            test: t.name.clone(),
                            function: t.function.clone(),
                            parameter: p.name.clone(),
                        });
                    }
                }
            }
        }
    }

    let mut step_findings = Vec::new();
    walk_steps(&pb.actions, &mut |s| match &s.kind {
        StepKind::Action(Action::CaptureTime { into }) => {
            if pb.variable(into).map(|v| v.kind) != Some(VarKind::Dynamic) {
                step_findings.push(Finding::CaptureIntoNonDynamic {
                    location: s.loc,
                    variable: into.clone(),
                });
            }
        }
        StepKind::Action(a) => {
            for tmpl in a.templates() {
                for name in tmpl.identifiers() {
                    if !declared(name) {
                        step_findings.push(Finding::UndeclaredIdentifier {
                            location: s.loc,
                            context: format!("`{}` action", a.kind_name()),
                            name: name.to_string(),
                        });
                    }
                }
            }
        }
        StepKind::Loop(l) => {
            if let LoopCount::Variable(v) = &l.count {
                if !declared(v) {
                    step_findings.push(Finding::UndeclaredIdentifier {
                        location: s.loc,
                        context: "loop count".into(),
                        name: v.clone(),
                    });
                }
            }
        }
        StepKind::Conditional(c) => {
            if !declared(&c.predicate.variable) {
                step_findings.push(Finding::UndeclaredIdentifier {
                    location: s.loc,
                    context: "condition".into(),
                    name: c.predicate.variable.clone(),
                });
            }
        }
        StepKind::Test { .. } => {}
    });

    findings.extend(test_findings);
    findings.extend(step_findings);
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::playbook::parse_playbook;

    const MINIMAL: &str = include_str!("../../tests/fixtures/minimal_trash.yaml");

    fn sys() -> BTreeSet<String> {
        ["adare_user_documents", "adare_user_home"]
            .into_iter()
            .map(String::from)
            .collect()
    }

    #[test]
    fn minimal_playbook_is_clean() {
        let pb = parse_playbook(MINIMAL.as_bytes()).unwrap();
        let report = validate(&pb, &AssertionRegistry::core(), &sys());
        assert!(report.is_clean(), "{:?}", report.findings);
    }

    #[test]
    fn missing_function_flags_both_tests() {
        let pb = parse_playbook(MINIMAL.as_bytes()).unwrap();
        let mut reg = AssertionRegistry::core();
        reg.remove("file_exists");
        let report = validate(&pb, &reg, &sys());
        assert_eq!(report.findings.len(), 2);
        assert!(report
            .findings
            .iter()
            .all(|f| matches!(f, Finding::UnknownFunction { function, .. } if function == "file_exists")));
    }

    #[test]
    fn typo_in_template() {
        let src = MINIMAL.replace("echo secret > {{ filepath }}", "echo secret > {{ typo_var }}");
        let pb = parse_playbook(src.as_bytes()).unwrap();
        let report = validate(&pb, &AssertionRegistry::core(), &sys());
        assert_eq!(report.findings.len(), 1);
        assert!(matches!(&report.findings[0], Finding::UndeclaredIdentifier { name, .. } if name == "typo_var"));
    }

    #[test]
    fn missing_sys_var_is_reported_on_the_variable() {
        let pb = parse_playbook(MINIMAL.as_bytes()).unwrap();
        let only_home: BTreeSet<String> = ["adare_user_home".to_string()].into();
        let report = validate(&pb, &AssertionRegistry::core(), &only_home);
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].to_string().contains("adare_user_documents"));
    }

    #[test]
    fn capture_and_parameter_checks() {
        let src = "variables:\n  c: {type: string, value: x}\n  d: {type: dynamic}\ntests:\n  - name: t\n    function: file_contains\n    parameter: {dst: /x}\nactions:\n  - capture_time: {into: c}\n  - capture_time: {into: d}\n  - capture_time: {into: nope}\n  - loop: {count: k, actions: [{test: t}]}\n  - if: {condition: \"z == 1\", then: [{test: t}]}\n";
        let pb = parse_playbook(src.as_bytes()).unwrap();
        let report = validate(&pb, &AssertionRegistry::core(), &BTreeSet::new());
        let text: Vec<String> = report.findings.iter().map(|f| f.to_string()).collect();
        assert_eq!(report.findings.len(), 5, "{text:#?}");
        assert!(matches!(&report.findings[0], Finding::MissingParameter { parameter, .. } if parameter == "pattern"));
        assert!(matches!(&report.findings[1], Finding::CaptureIntoNonDynamic { variable, .. } if variable == "c"));
        assert!(matches!(&report.findings[2], Finding::CaptureIntoNonDynamic { variable, .. } if variable == "nope"));
        // Deterministic ordering.
        assert_eq!(report, validate(&pb, &AssertionRegistry::core(), &BTreeSet::new()));
    }
}
