//! Declarative screen models: the deterministic stand-in for a real display.
//!
//! A model names a set of screens. Each screen lists static elements, file
//! lists (a directory rendered as one text item per entry) and the transitions
//! that gestures on its elements trigger.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Icon,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementSpec {
    pub id: String,
    pub kind: ElementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub region: Region,
}

/// A directory shown as a vertical list of text items, one per entry,
/// sorted by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileListSpec {
    pub id: String,
    /// Template over system variables, e.g. `"{{ adare_user_documents }}"`.
    pub dir: String,
    pub origin: [u32; 2],
    pub item_size: [u32; 2],
    #[serde(default = "default_max_items")]
    pub max_items: usize,
}

fn default_max_items() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gesture {
    Left,
    Right,
    Double,
    /// Something was dropped onto the element.
    Drop,
}

/// Filesystem side effect of a transition. Every string is a template over
/// system variables plus `selection_path`, `selection_name`, `now` and
/// `now_local`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Effect {
    Mkdir(String),
    Write { path: String, content: String },
    Move { from: String, to: String },
    Remove(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    /// Element id, or a file list id to match any of its items.
    pub element: String,
    pub gesture: Gesture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goto: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenSpec {
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
    #[serde(default)]
    pub file_lists: Vec<FileListSpec>,
    #[serde(default)]
    pub transitions: Vec<TransitionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenModel {
    pub resolution: [u32; 2],
    pub initial: String,
    pub screens: BTreeMap<String, ScreenSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot read screen model {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("screen model: {0}")]
    Parse(String),
    #[error("screen model: {0}")]
    Invalid(String),
}

impl ScreenModel {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let m: ScreenModel = crate::yaml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn screen(&self, id: &str) -> Option<&ScreenSpec> {
        self.screens.get(id)
    }

    /// Checks bounds, id uniqueness, label overlap and transition targets.
    pub fn check(&self) -> Result<(), ModelError> {
        let [w, h] = self.resolution;
        let bad = |m: String| Err(ModelError::Invalid(m));
        if !self.screens.contains_key(&self.initial) {
            return bad(format!("initial screen `{}` is not defined", self.initial));
        }
        for (name, screen) in &self.screens {
            let mut ids = BTreeSet::new();
            for e in &screen.elements {
                if !ids.insert(e.id.as_str()) {
                    return bad(format!("screen `{name}`: duplicate element id `{}`", e.id));
                }
                if !e.region.within(w, h) {
                    return bad(format!("screen `{name}`: element `{}` lies outside the screen", e.id));
                }
                let ok = match e.kind {
                    ElementKind::Text => e.label.is_some(),
                    ElementKind::Icon => e.image.is_some() || e.label.is_some(),
                };
                if !ok {
                    return bad(format!("screen `{name}`: element `{}` has nothing to match on", e.id));
                }
            }
            for l in &screen.file_lists {
                if !ids.insert(l.id.as_str()) {
                    return bad(format!("screen `{name}`: duplicate element id `{}`", l.id));
                }
                let list = Region::new(l.origin[0], l.origin[1], l.item_size[0], l.item_size[1] * l.max_items as u32);
                if !list.within(w, h) || l.item_size[0] == 0 || l.item_size[1] == 0 {
                    return bad(format!("screen `{name}`: file list `{}` does not fit the screen", l.id));
                }
            }
            for (i, a) in screen.elements.iter().enumerate() {
                for b in &screen.elements[i + 1..] {
                    if a.kind == ElementKind::Text
                        && b.kind == ElementKind::Text
                        && a.label == b.label
                        && a.region.overlaps(&b.region)
                    {
                        return bad(format!(
                            "screen `{name}`: text elements `{}` and `{}` share a label and overlap",
                            a.id, b.id
                        ));
                    }
                }
            }
            for t in &screen.transitions {
                if !ids.contains(t.element.as_str()) {
                    return bad(format!("screen `{name}`: transition on unknown element `{}`", t.element));
                }
                if let Some(g) = &t.goto {
                    if !self.screens.contains_key(g) {
                        return bad(format!("screen `{name}`: transition to unknown screen `{g}`"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One concrete element on a rendered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub id: String,
    pub kind: ElementKind,
    pub label: Option<String>,
    pub image: Option<String>,
    pub region: Region,
    /// For file list items: the list id and the entry's absolute path.
    #[serde(skip)]
    pub list_item: Option<(String, PathBuf)>,
}

impl From<&ElementSpec> for Element {
    fn from(s: &ElementSpec) -> Self {
        Element {
            id: s.id.clone(),
            kind: s.kind,
            label: s.label.clone(),
            image: s.image.clone(),
            region: s.region,
            list_item: None,
        }
    }
}

/// What is on screen at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub elements: Vec<Element>,
}

impl Frame {
    /// Top-most element containing the point. Later elements are drawn on top.
    pub fn hit(&self, x: u32, y: u32) -> Option<&Element> {
        self.elements.iter().rev().find(|e| e.region.contains(x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = "resolution: [800, 600]\ninitial: desk\nscreens:\n  desk:\n    elements:\n      - {id: docs, kind: text, label: Documents, region: [100, 200, 80, 24]}\n      - {id: files, kind: icon, image: nautilus_taskbar.png, region: [0, 560, 40, 40]}\n    file_lists:\n      - {id: listing, dir: \"{{ adare_user_documents }}\", origin: [300, 100], item_size: [200, 20], max_items: 10}\n    transitions:\n      - {element: files, gesture: left, goto: desk}\n      - {element: listing, gesture: right, effects: [{remove: \"{{ selection_path }}\"}, {write: {path: /x, content: y}}]}\n";

    #[test]
    fn parses_model() {
        let m = ScreenModel::parse(MODEL).unwrap();
        assert_eq!(m.resolution, [800, 600]);
        let desk = m.screen("desk").unwrap();
        assert_eq!(desk.elements[0].region, Region::new(100, 200, 80, 24));
        assert_eq!(desk.transitions[1].effects.len(), 2);
        assert!(matches!(desk.transitions[1].effects[0], Effect::Remove(_)));
    }

    #[test]
    fn rejects_invalid_models() {
        let out_of_bounds = MODEL.replace("[100, 200, 80, 24]", "[790, 200, 80, 24]");
        assert!(ScreenModel::parse(&out_of_bounds).is_err());
        let dup = MODEL.replace("id: files", "id: docs");
        assert!(ScreenModel::parse(&dup).is_err());
        let overlap = MODEL.replace(
            "      - {id: files,",
            "      - {id: docs2, kind: text, label: Documents, region: [110, 210, 80, 24]}\n      - {id: files,",
        );
        assert!(ScreenModel::parse(&overlap).is_err());
        let apart = MODEL.replace(
            "      - {id: files,",
            "      - {id: docs2, kind: text, label: Documents, region: [100, 400, 80, 24]}\n      - {id: files,",
        );
        assert!(ScreenModel::parse(&apart).is_ok());
        assert!(ScreenModel::parse(&MODEL.replace("goto: desk", "goto: nowhere")).is_err());
        assert!(ScreenModel::parse(&MODEL.replace("initial: desk", "initial: x")).is_err());
    }

    #[test]
    fn hit_prefers_later_elements() {
        let frame = Frame {
            width: 100,
            height: 100,
            elements: vec![
                Element::from(&ElementSpec { id: "under".into(), kind: ElementKind::Text, label: Some("a".into()), image: None, region: Region::new(0, 0, 50, 50) }),
                Element::from(&ElementSpec { id: "over".into(), kind: ElementKind::Text, label: Some("b".into()), image: None, region: Region::new(10, 10, 10, 10) }),
            ],
        };
        assert_eq!(frame.hit(15, 15).unwrap().id, "over");
        assert_eq!(frame.hit(5, 5).unwrap().id, "under");
        assert!(frame.hit(60, 60).is_none());
    }
}
