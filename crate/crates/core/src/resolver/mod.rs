//! Maps a target description to a screen region.

mod external;
mod model;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use external::{png_dimensions, ExternalResolver, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_TIMEOUT};
pub use model::{
    Effect, Element, ElementKind, ElementSpec, FileListSpec, Frame, Gesture, ModelError, ScreenModel, ScreenSpec,
    TransitionSpec,
};

/// Axis-aligned rectangle in screen pixels; serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for Region {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Region { x, y, w, h }
    }
}

impl From<Region> for [u32; 4] {
    fn from(r: Region) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Region {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Region { x, y, w, h }
    }

    /// Integer center: `(x + w/2, y + h/2)`.
    pub fn center(&self) -> (u32, u32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x
            && py >= self.y
            && u64::from(px) < u64::from(self.x) + u64::from(self.w)
            && u64::from(py) < u64::from(self.y) + u64::from(self.h)
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }

    pub fn overlaps(&self, o: &Region) -> bool {
        let (ax2, ay2) = (u64::from(self.x) + u64::from(self.w), u64::from(self.y) + u64::from(self.h));
        let (bx2, by2) = (u64::from(o.x) + u64::from(o.w), u64::from(o.y) + u64::from(o.h));
        u64::from(self.x) < bx2 && u64::from(o.x) < ax2 && u64::from(self.y) < by2 && u64::from(o.y) < ay2
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

/// A rendered target: template placeholders already substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Image(String),
    Text(String),
    Coordinates { x: u32, y: u32 },
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Image(r) => write!(f, "image `{r}`"),
            Target::Text(t) => write!(f, "text `{t}`"),
            Target::Coordinates { x, y } => write!(f, "coordinates ({x},{y})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fixture,
    IconMatch,
    Ocr,
    Coordinates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub region: Region,
    pub confidence: f64,
    pub method: Method,
    /// More than one element matched; the tie-break rule picked this one.
    #[serde(default)]
    pub ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResolveError {
    #[error("target not found")]
    NotFound { candidates: Vec<String> },
    #[error("resolver backend error: {0}")]
    Backend(String),
}

/// What the resolver looks at: a screen model frame or raw screenshot bytes.
#[derive(Debug, Clone, Copy)]
pub enum Screen<'a> {
    Model(&'a Frame),
    Screenshot(&'a [u8]),
}

pub trait TargetResolver: Send + Sync {
    fn resolve(&self, target: &Target, screen: Screen<'_>) -> Result<Resolution, ResolveError>;
}

/// Shared handling of the coordinate escape hatch.
pub fn resolve_coordinates(x: u32, y: u32, width: u32, height: u32) -> Result<Resolution, ResolveError> {
    let region = Region::new(x, y, 1, 1);
    if !region.within(width, height) {
        return Err(ResolveError::NotFound {
            candidates: vec![format!("screen is {width}x{height}")],
        });
    }
    Ok(Resolution {
        region,
        confidence: 1.0,
        method: Method::Coordinates,
        ambiguous: false,
        element_id: None,
    })
}

const MAX_CANDIDATES: usize = 5;

/// Deterministic backend over a screen model frame: exact label or image
/// reference equality, ties broken top-most then left-most.
#[derive(Debug, Default, Clone, Copy)]
pub struct FixtureResolver;

impl FixtureResolver {
    pub fn resolve_frame(&self, target: &Target, frame: &Frame) -> Result<Resolution, ResolveError> {
        let key = |e: &Element| -> Option<String> {
            match target {
                Target::Text(_) => e.label.clone(),
                Target::Image(_) => e.image.clone(),
                Target::Coordinates { .. } => None,
            }
        };
        let wanted = match target {
            Target::Text(t) => t,
            Target::Image(r) => r,
            Target::Coordinates { x, y } => return resolve_coordinates(*x, *y, frame.width, frame.height),
        };
        let mut hits: Vec<&Element> = frame
            .elements
            .iter()
            .filter(|e| key(e).as_deref() == Some(wanted.as_str()))
            .collect();
        if hits.is_empty() {
            let mut names: Vec<String> = frame.elements.iter().filter_map(key).collect();
            names.sort_by_key(|n| (strsim::levenshtein(n, wanted), n.clone()));
            names.dedup();
            names.truncate(MAX_CANDIDATES);
            return Err(ResolveError::NotFound { candidates: names });
        }
        hits.sort_by_key(|e| (e.region.y, e.region.x));
        let best = hits[0];
        Ok(Resolution {
            region: best.region,
            confidence: 1.0,
            method: Method::Fixture,
            ambiguous: hits.len() > 1,
            element_id: Some(best.id.clone()),
        })
    }
}

impl TargetResolver for FixtureResolver {
    fn resolve(&self, target: &Target, screen: Screen<'_>) -> Result<Resolution, ResolveError> {
        match screen {
            Screen::Model(frame) => self.resolve_frame(target, frame),
            Screen::Screenshot(_) => Err(ResolveError::Backend(
                "the fixture backend needs a screen model, not a screenshot".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn el(id: &str, label: &str, region: Region) -> Element {
        Element {
            id: id.into(),
            kind: ElementKind::Text,
            label: Some(label.into()),
            image: None,
            region,
            list_item: None,
        }
    }

    fn frame(elements: Vec<Element>) -> Frame {
        Frame { width: 1920, height: 1080, elements }
    }

    #[test]
    fn exact_label_match() {
        let f = frame(vec![el("d", "Documents", Region::new(100, 200, 80, 24))]);
        let r = FixtureResolver.resolve(&Target::Text("Documents".into()), Screen::Model(&f)).unwrap();
        assert_eq!(r.region, Region::new(100, 200, 80, 24));
        assert_eq!(r.confidence, 1.0);
        assert_eq!(r.method, Method::Fixture);
        assert!(!r.ambiguous);
        assert_eq!(r.region.center(), (140, 212));
        // case and whitespace matter
        assert!(FixtureResolver.resolve(&Target::Text("documents".into()), Screen::Model(&f)).is_err());
    }

    #[test]
    fn image_reference_match() {
        let mut icon = el("files", "Files", Region::new(0, 1040, 40, 40));
        icon.kind = ElementKind::Icon;
        icon.image = Some("nautilus_taskbar.png".into());
        let f = frame(vec![icon]);
        let r = FixtureResolver.resolve(&Target::Image("nautilus_taskbar.png".into()), Screen::Model(&f)).unwrap();
        assert_eq!(r.element_id.as_deref(), Some("files"));
    }

    #[test]
    fn ties_go_top_most_then_left_most() {
        let f = frame(vec![
            el("low", "OK", Region::new(0, 100, 40, 20)),
            el("right", "OK", Region::new(50, 0, 40, 20)),
            el("left", "OK", Region::new(0, 0, 40, 20)),
        ]);
        let r = FixtureResolver.resolve(&Target::Text("OK".into()), Screen::Model(&f)).unwrap();
        assert_eq!(r.element_id.as_deref(), Some("left"));
        assert!(r.ambiguous);
    }

    #[test]
    fn not_found_lists_candidates() {
        let f = frame(vec![el("a", "Documents", Region::new(0, 0, 1, 1)), el("b", "Music", Region::new(0, 5, 1, 1))]);
        let e = FixtureResolver.resolve(&Target::Text("Document".into()), Screen::Model(&f)).unwrap_err();
        assert_eq!(e, ResolveError::NotFound { candidates: vec!["Documents".into(), "Music".into()] });
    }

    #[test]
    fn coordinates() {
        let f = frame(vec![]);
        let r = FixtureResolver.resolve(&Target::Coordinates { x: 5, y: 6 }, Screen::Model(&f)).unwrap();
        assert_eq!(r.region, Region::new(5, 6, 1, 1));
        assert_eq!(r.method, Method::Coordinates);
        assert!(FixtureResolver.resolve(&Target::Coordinates { x: 1920, y: 0 }, Screen::Model(&f)).is_err());
    }

    #[test]
    fn screenshot_is_a_backend_error_for_the_fixture() {
        let e = FixtureResolver.resolve(&Target::Text("x".into()), Screen::Screenshot(b"png")).unwrap_err();
        assert!(matches!(e, ResolveError::Backend(_)));
    }

    #[test]
    fn region_serializes_as_array() {
        assert_eq!(serde_json::to_string(&Region::new(1, 2, 3, 4)).unwrap(), "[1,2,3,4]");
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        proptest::collection::vec(
            (0u32..4, 0u32..1800, 0u32..1000, 1u32..100, 1u32..60),
            0..12,
        )
        .prop_map(|items| {
            frame(
                items
                    .into_iter()
                    .enumerate()
                    .map(|(i, (l, x, y, w, h))| el(&format!("e{i}"), &format!("L{l}"), Region::new(x, y, w, h)))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn fixture_resolution_is_pure_and_in_bounds(f in arb_frame(), l in 0u32..5) {
            let t = Target::Text(format!("L{l}"));
            let a = FixtureResolver.resolve(&t, Screen::Model(&f));
            let b = FixtureResolver.resolve(&t, Screen::Model(&f));
            prop_assert_eq!(&a, &b);
            if let Ok(r) = a {
                prop_assert!(r.region.within(f.width, f.height));
                // Oracle: minimum (y, x) among matching elements.
                let best = f.elements.iter().filter(|e| e.label.as_deref() == Some(&format!("L{l}")[..]))
                    .min_by_key(|e| (e.region.y, e.region.x)).unwrap();
                prop_assert_eq!(r.region, best.region);
            }
        }
    }
}
