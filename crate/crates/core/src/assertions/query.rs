use serde_json::{json, Value};

use super::files::read_capped;
use super::{typed_eq, ErrorClass, EvalContext, Outcome, Params};

pub(super) fn json_query_equals(p: &Params, ctx: &EvalContext<'_>) -> Outcome {
    let (dst, query, expected) = match (p.path("dst"), p.str("query"), p.value("expected")) {
        (Ok(d), Ok(q), Ok(e)) => (d, q, e.clone()),
        (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => return e.into(),
    };
    if !(query.is_empty() || query.starts_with('/')) {
        return Outcome::error(
            ErrorClass::BadQuery,
            format!("`{query}` is not a JSON pointer (must be empty or start with `/`)"),
        );
    }
    let text = match read_capped(&dst, ctx) {
        Ok(t) => t,
        Err(o) => return o,
    };
    let doc: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            return Outcome::error(
                ErrorClass::MalformedFile,
                format!("{} is not valid JSON: {e}", dst.display()),
            )
        }
    };
    match doc.pointer(query) {
        None => Outcome::fail("path absent", expected, format!("nothing at `{query}`")),
        Some(found) if typed_eq(found, &expected) => {
            Outcome::pass(format!("`{query}` equals expected")).with_observed(found.clone())
        }
        Some(found) => Outcome::fail(
            found.clone(),
            expected,
            format!("`{query}` differs from expected"),
        ),
    }
}

/// One step of the restricted XML path grammar: `name` or `name[n]` (1-based).
#[derive(Debug, PartialEq)]
struct XmlStep {
    name: String,
    index: Option<usize>,
}

#[derive(Debug, PartialEq)]
struct XmlQuery {
    /// Leading `/`: the first step names the document element itself.
    absolute: bool,
    steps: Vec<XmlStep>,
    attribute: Option<String>,
}

fn parse_xml_query(q: &str) -> Result<XmlQuery, String> {
    let (absolute, rest) = match q.strip_prefix('/') {
        Some(r) => (true, r),
        None => (false, q),
    };
    let (path, attribute) = match rest.rsplit_once('@') {
        Some((p, a)) => {
            if a.is_empty() || !a.chars().all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | ':' | '.')) {
                return Err(format!("invalid attribute name `{a}`"));
            }
            (p, Some(a.to_string()))
        }
        None => (rest, None),
    };
    let mut steps = Vec::new();
    if !path.is_empty() {
        for raw in path.split('/') {
            let (name, index) = match raw.split_once('[') {
                Some((n, idx)) => {
                    let idx = idx
                        .strip_suffix(']')
                        .and_then(|i| i.parse::<usize>().ok())
                        .filter(|i| *i >= 1)
                        .ok_or_else(|| format!("invalid index in step `{raw}` (expected [n] with n >= 1)"))?;
                    (n, Some(idx))
                }
                None => (raw, None),
            };
            if name.is_empty()
                || !name.chars().all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | ':' | '.'))
            {
                return Err(format!("invalid step `{raw}`"));
            }
            steps.push(XmlStep {
                name: name.to_string(),
                index,
            });
        }
    }
    if absolute && steps.is_empty() {
        return Err("absolute query must name the document element".into());
    }
    if steps.is_empty() && attribute.is_none() {
        return Err("empty query".into());
    }
    Ok(XmlQuery {
        absolute,
        steps,
        attribute,
    })
}

fn local(name: &str) -> &str {
    name.rsplit_once(':').map_or(name, |(_, l)| l)
}

fn select<'a, 'i>(doc: &'a roxmltree::Document<'i>, q: &XmlQuery) -> Vec<roxmltree::Node<'a, 'i>> {
    let root = doc.root_element();
    let mut steps = q.steps.iter();
    let mut current = if q.absolute {
        let first = steps.next().expect("absolute query has a first step");
        let matches = local(&first.name) == root.tag_name().name() && first.index.unwrap_or(1) == 1;
        if matches {
            vec![root]
        } else {
            Vec::new()
        }
    } else {
        vec![root]
    };
    for step in steps {
        let mut next = Vec::new();
        for node in &current {
            let children: Vec<_> = node
                .children()
                .filter(|c| c.is_element() && c.tag_name().name() == local(&step.name))
                .collect();
            match step.index {
                Some(i) => next.extend(children.get(i - 1).copied()),
                None => next.extend(children),
            }
        }
        current = next;
    }
    current
}

fn node_text(node: roxmltree::Node<'_, '_>) -> String {
    node.descendants()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect()
}

pub(super) fn xml_query_equals(p: &Params, ctx: &EvalContext<'_>) -> Outcome {
    let (dst, query, expected) = match (p.path("dst"), p.str("query"), p.str("expected")) {
        (Ok(d), Ok(q), Ok(e)) => (d, q, e),
        (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => return e.into(),
    };
    let parsed = match parse_xml_query(query) {
        Ok(q) => q,
        Err(e) => return Outcome::error(ErrorClass::BadQuery, e),
    };
    let text = match read_capped(&dst, ctx) {
        Ok(t) => t,
        Err(o) => return o,
    };
    let doc = match roxmltree::Document::parse(&text) {
        Ok(d) => d,
        Err(e) => {
            return Outcome::error(
                ErrorClass::MalformedFile,
                format!("{} is not well-formed XML: {e}", dst.display()),
            )
        }
    };
    let nodes = select(&doc, &parsed);
    if nodes.len() != 1 {
        return Outcome::fail(
            json!({ "count": nodes.len() }),
            expected,
            format!("`{query}` selected {} nodes, expected exactly one", nodes.len()),
        );
    }
    let node = nodes[0];
    let value = match &parsed.attribute {
        Some(attr) => {
            let found = node
                .attributes()
                .find(|a| a.name() == local(attr))
                .map(|a| a.value().to_string());
            match found {
                Some(v) => v,
                None => {
                    return Outcome::fail(
                        "attribute absent",
                        expected,
                        format!("selected node has no attribute `{attr}`"),
                    )
                }
            }
        }
        None => node_text(node),
    };
    if value == expected {
        Outcome::pass(format!("`{query}` equals expected")).with_observed(value)
    } else {
        Outcome::fail(value, expected, format!("`{query}` differs from expected"))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::eval;
    use super::super::{ErrorClass, TestStatus};
    use super::*;

    fn write(dir: &std::path::Path, name: &str, body: &str) -> String {
        let f = dir.join(name);
        std::fs::write(&f, body).unwrap();
        f.to_str().unwrap().to_string()
    }

    #[test]
    fn json_typed_equality() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "a.json", r#"{"a":{"b":1}}"#);
        assert_eq!(eval("json_query_equals", json!({"dst": f, "query": "/a/b", "expected": 1})).status, TestStatus::Pass);
        let r = eval("json_query_equals", json!({"dst": f, "query": "/a/b", "expected": "1"}));
        assert_eq!(r.status, TestStatus::Fail);
        assert_eq!(r.observed, Some(json!(1)));
        assert_eq!(r.expected, Some(json!("1")));
        assert_eq!(eval("json_query_equals", json!({"dst": f, "query": "/a/b", "expected": 1.0})).status, TestStatus::Pass);
    }

    #[test]
    fn json_missing_path_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "a.json", r#"{"a":[10,20]}"#);
        let r = eval("json_query_equals", json!({"dst": f, "query": "/a/5", "expected": 1}));
        assert_eq!(r.status, TestStatus::Fail);
        assert_eq!(r.observed, Some(json!("path absent")));
        assert_eq!(eval("json_query_equals", json!({"dst": f, "query": "/a/1", "expected": 20})).status, TestStatus::Pass);
        let r = eval("json_query_equals", json!({"dst": f, "query": "a", "expected": 1}));
        assert_eq!(r.error_class, Some(ErrorClass::BadQuery));
        let bad = write(dir.path(), "bad.json", "{not json");
        let r = eval("json_query_equals", json!({"dst": bad, "query": "/a", "expected": 1}));
        assert_eq!(r.status, TestStatus::Error);
        assert_eq!(r.error_class, Some(ErrorClass::MalformedFile));
    }

    const XBEL_ONE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<xbel version="1.0" xmlns:bookmark="http://www.freedesktop.org/standards/desktop-bookmarks">
  <bookmark href="file:///home/u/report.odt" added="2020-05-01T10:00:00Z" modified="2020-05-01T10:00:00Z" visited="1969-12-31T23:59:59Z">
    <info><metadata owner="http://freedesktop.org"><bookmark:applications><bookmark:application name="gedit" count="1"/></bookmark:applications></metadata></info>
  </bookmark>
</xbel>"#;

    #[test]
    fn xbel_visited_attribute() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "recently-used.xbel", XBEL_ONE);
        let r = eval("xml_query_equals", json!({"dst": f, "query": "bookmark[1]@visited", "expected": "1969-12-31T23:59:59Z"}));
        assert_eq!(r.status, TestStatus::Pass, "{}", r.message);
        let r = eval("xml_query_equals", json!({"dst": f, "query": "/xbel/bookmark@href", "expected": "file:///home/u/report.odt"}));
        assert_eq!(r.status, TestStatus::Pass, "{}", r.message);
        let r = eval("xml_query_equals", json!({"dst": f, "query": "bookmark/info/metadata/applications/application@count", "expected": "1"}));
        assert_eq!(r.status, TestStatus::Pass, "{}", r.message);
    }

    #[test]
    fn xml_selecting_nothing_fails() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.xbel", XBEL_ONE);
        let r = eval("xml_query_equals", json!({"dst": f, "query": "separator", "expected": "x"}));
        assert_eq!(r.status, TestStatus::Fail);
        assert_eq!(r.observed, Some(json!({"count": 0})));
    }

    #[test]
    fn xml_ambiguous_selection_reports_count() {
        let two = r#"<xbel><bookmark href="a"/><bookmark href="b"/></xbel>"#;
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.xbel", two);
        // Oracle: count matching elements with an independent reader.
        let doc = roxmltree::Document::parse(two).unwrap();
        let oracle = doc.descendants().filter(|n| n.has_tag_name("bookmark")).count();
        assert_eq!(oracle, 2);
        let r = eval("xml_query_equals", json!({"dst": f, "query": "bookmark@href", "expected": "a"}));
        assert_eq!(r.status, TestStatus::Fail);
        assert_eq!(r.observed, Some(json!({"count": oracle})));
        assert_eq!(eval("xml_query_equals", json!({"dst": f, "query": "bookmark[2]@href", "expected": "b"})).status, TestStatus::Pass);
    }

    #[test]
    fn xml_text_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.xml", "<r><title>Hello</title></r>");
        assert_eq!(eval("xml_query_equals", json!({"dst": f, "query": "title", "expected": "Hello"})).status, TestStatus::Pass);
        let r = eval("xml_query_equals", json!({"dst": f, "query": "title[0]", "expected": "Hello"}));
        assert_eq!(r.error_class, Some(ErrorClass::BadQuery));
        let r = eval("xml_query_equals", json!({"dst": f, "query": "//title", "expected": "Hello"}));
        assert_eq!(r.error_class, Some(ErrorClass::BadQuery));
        let bad = write(dir.path(), "bad.xml", "<r><unclosed></r>");
        let r = eval("xml_query_equals", json!({"dst": bad, "query": "unclosed", "expected": ""}));
        assert_eq!(r.error_class, Some(ErrorClass::MalformedFile));
    }

    #[test]
    fn query_grammar() {
        assert_eq!(
            parse_xml_query("bookmark[1]@visited").unwrap(),
            XmlQuery {
                absolute: false,
                steps: vec![XmlStep { name: "bookmark".into(), index: Some(1) }],
                attribute: Some("visited".into())
            }
        );
        assert!(parse_xml_query("/").is_err());
        assert!(parse_xml_query("a[x]").is_err());
        assert!(parse_xml_query("a@").is_err());
        assert!(parse_xml_query("").is_err());
    }
}
