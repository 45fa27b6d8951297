//! GUI actions: resolve targets with retries, then inject input.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use chrono::{Local, SecondsFormat, Utc};
use serde_json::json;

use super::root::ExecutionRoot;
use crate::playbook::{ClickButton, Scope, ScrollDirection, TemplateError, TemplateString};
use crate::protocol::{error_class, ActionOutcome, ActionRequest, ErrorPayload};
use crate::resolver::{
    Effect, Element, Frame, Gesture, ResolveError, Resolution, Screen, ScreenModel, Target, TargetResolver,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            interval: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputEvent {
    Click { x: u32, y: u32, button: ClickButton },
    Key(char),
    Scroll { direction: ScrollDirection },
    DragPress { x: u32, y: u32 },
    DragMove { x: u32, y: u32 },
    DragRelease { x: u32, y: u32 },
}

/// What a GUI action looks at and acts on.
pub enum Observation {
    Frame(Frame),
    Screenshot(Vec<u8>),
}

pub trait GuiSurface: Send {
    fn observe(&mut self) -> Result<Observation, String>;
    fn inject(&mut self, event: &InputEvent) -> Result<(), String>;
}

fn resolve_with_retry(
    target: &Target,
    surface: &mut dyn GuiSurface,
    resolver: &dyn TargetResolver,
    retry: RetryPolicy,
) -> Result<Resolution, ErrorPayload> {
    let mut last_candidates = Vec::new();
    for attempt in 0..retry.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(retry.interval);
        }
        let obs = surface
            .observe()
            .map_err(|e| ErrorPayload::new(error_class::IO, format!("cannot observe the screen: {e}")))?;
        let screen = match &obs {
            Observation::Frame(f) => Screen::Model(f),
            Observation::Screenshot(b) => Screen::Screenshot(b),
        };
        match resolver.resolve(target, screen) {
            Ok(r) => return Ok(r),
            Err(ResolveError::NotFound { candidates }) => last_candidates = candidates,
            Err(ResolveError::Backend(msg)) => {
                return Err(ErrorPayload::new(error_class::RESOLVER_BACKEND, msg));
            }
        }
    }
    Err(ErrorPayload::new(
        error_class::TARGET_NOT_FOUND,
        format!("{target} not found after {} attempts", retry.attempts.max(1)),
    )
    .with_details(json!({"target": target, "candidates": last_candidates})))
}

fn inject_all(surface: &mut dyn GuiSurface, events: &[InputEvent]) -> Result<u32, ErrorPayload> {
    for e in events {
        surface
            .inject(e)
            .map_err(|m| ErrorPayload::new(error_class::IO, format!("input injection failed: {m}")))?;
    }
    Ok(events.len() as u32)
}

/// Performs one GUI action.
pub fn perform_gui(
    action: &ActionRequest,
    surface: &mut dyn GuiSurface,
    resolver: &dyn TargetResolver,
    retry: RetryPolicy,
) -> Result<ActionOutcome, ErrorPayload> {
    let started_at = Utc::now();
    let clock = Instant::now();
    let elapsed = || clock.elapsed().as_millis() as u64;
    match action {
        ActionRequest::Click { button, target } => {
            let r = resolve_with_retry(target, surface, resolver, retry)?;
            let (x, y) = r.region.center();
            inject_all(surface, &[InputEvent::Click { x, y, button: *button }])?;
            let count = if *button == ClickButton::Double { 2 } else { 1 };
            Ok(ActionOutcome::Gui {
                resolved_region: r.region,
                confidence: r.confidence,
                method: r.method,
                ambiguous: r.ambiguous,
                drop_region: None,
                injected_events_count: count,
                started_at,
                duration_ms: elapsed(),
            })
        }
        ActionRequest::DragDrop { from, to } => {
            let a = resolve_with_retry(from, surface, resolver, retry)?;
            let b = resolve_with_retry(to, surface, resolver, retry)?;
            let (ax, ay) = a.region.center();
            let (bx, by) = b.region.center();
            let n = inject_all(
                surface,
                &[
                    InputEvent::DragPress { x: ax, y: ay },
                    InputEvent::DragMove { x: bx, y: by },
                    InputEvent::DragRelease { x: bx, y: by },
                ],
            )?;
            Ok(ActionOutcome::Gui {
                resolved_region: a.region,
                confidence: a.confidence.min(b.confidence),
                method: a.method,
                ambiguous: a.ambiguous || b.ambiguous,
                drop_region: Some(b.region),
                injected_events_count: n,
                started_at,
                duration_ms: elapsed(),
            })
        }
        ActionRequest::TypeText { text } => {
            let events: Vec<InputEvent> = text.chars().map(InputEvent::Key).collect();
            let n = inject_all(surface, &events)?;
            Ok(ActionOutcome::Keyboard {
                injected_events_count: n,
                started_at,
                duration_ms: elapsed(),
            })
        }
        ActionRequest::Scroll { direction, amount } => {
            let events = vec![InputEvent::Scroll { direction: *direction }; *amount as usize];
            let n = inject_all(surface, &events)?;
            Ok(ActionOutcome::Keyboard {
                injected_events_count: n,
                started_at,
                duration_ms: elapsed(),
            })
        }
        ActionRequest::Command { .. } => Err(ErrorPayload::new(error_class::BAD_REQUEST, "not a GUI action")),
    }
}

fn render_template(tpl: &str, scope: &Scope) -> Result<String, TemplateError> {
    TemplateString::new(tpl).render(scope)
}

/// Sandbox GUI: a screen model whose transitions apply filesystem effects
/// inside the execution root.
pub struct ScriptedScreen {
    model: ScreenModel,
    root: ExecutionRoot,
    current: String,
    selection: Option<PathBuf>,
    drag_source: Option<Element>,
    log: Vec<InputEvent>,
}

impl ScriptedScreen {
    pub fn new(model: ScreenModel, root: ExecutionRoot) -> Self {
        let current = model.initial.clone();
        ScriptedScreen {
            model,
            root,
            current,
            selection: None,
            drag_source: None,
            log: Vec::new(),
        }
    }

    pub fn current_screen(&self) -> &str {
        &self.current
    }

    pub fn events(&self) -> &[InputEvent] {
        &self.log
    }

    fn base_scope(&self) -> Scope {
        let mut s: Scope = self.root.sys_vars.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        if let Some(p) = &self.selection {
            s.set_text("selection_path", p.to_string_lossy());
            s.set_text(
                "selection_name",
                p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            );
        }
        let now = Utc::now();
        s.set_text("now", now.to_rfc3339_opts(SecondsFormat::Secs, true));
        s.set_text("now_local", now.with_timezone(&Local).format("%Y-%m-%dT%H:%M:%S").to_string());
        s
    }

    pub fn frame(&self) -> Result<Frame, String> {
        let spec = self
            .model
            .screen(&self.current)
            .ok_or_else(|| format!("screen `{}` is not defined", self.current))?;
        let mut elements: Vec<Element> = spec.elements.iter().map(Element::from).collect();
        let scope = self.base_scope();
        for list in &spec.file_lists {
            let dir = render_template(&list.dir, &scope).map_err(|e| format!("file list `{}`: {e}", list.id))?;
            let dir = self.root.confine(&dir)?;
            let mut names: Vec<String> = match std::fs::read_dir(&dir) {
                Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect(),
                Err(_) => Vec::new(),
            };
            names.sort();
            for (i, name) in names.into_iter().take(list.max_items).enumerate() {
                let region = crate::resolver::Region::new(
                    list.origin[0],
                    list.origin[1] + i as u32 * list.item_size[1],
                    list.item_size[0],
                    list.item_size[1],
                );
                elements.push(Element {
                    id: format!("{}/{name}", list.id),
                    kind: crate::resolver::ElementKind::Text,
                    label: Some(name.clone()),
                    image: None,
                    region,
                    list_item: Some((list.id.clone(), dir.join(&name))),
                });
            }
        }
        Ok(Frame {
            width: self.model.resolution[0],
            height: self.model.resolution[1],
            elements,
        })
    }

    fn apply(&mut self, element: &Element, gesture: Gesture) -> Result<(), String> {
        if let Some((_, path)) = &element.list_item {
            if gesture != Gesture::Drop {
                self.selection = Some(path.clone());
            }
        }
        let key = element.list_item.as_ref().map_or(element.id.as_str(), |(list, _)| list.as_str());
        let spec = self.model.screen(&self.current).expect("current screen exists");
        let Some(t) = spec.transitions.iter().find(|t| t.element == key && t.gesture == gesture).cloned() else {
            return Ok(());
        };
        let scope = self.base_scope();
        let render = |tpl: &str| -> Result<PathBuf, String> {
            let s = render_template(tpl, &scope).map_err(|e| e.to_string())?;
            self.root.confine(&s)
        };
        for effect in &t.effects {
            match effect {
                Effect::Mkdir(p) => {
                    let p = render(p)?;
                    std::fs::create_dir_all(&p).map_err(|e| format!("mkdir {}: {e}", p.display()))?;
                }
                Effect::Write { path, content } => {
                    let p = render(path)?;
                    let body = render_template(content, &scope).map_err(|e| e.to_string())?;
                    if let Some(parent) = p.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| format!("mkdir {}: {e}", parent.display()))?;
                    }
                    std::fs::write(&p, body).map_err(|e| format!("write {}: {e}", p.display()))?;
                }
                Effect::Move { from, to } => {
                    let (a, b) = (render(from)?, render(to)?);
                    if let Some(parent) = b.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| format!("mkdir {}: {e}", parent.display()))?;
                    }
                    std::fs::rename(&a, &b).map_err(|e| format!("move {} -> {}: {e}", a.display(), b.display()))?;
                }
                Effect::Remove(p) => {
                    let p = render(p)?;
                    let r = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
                    r.map_err(|e| format!("remove {}: {e}", p.display()))?;
                }
            }
        }
        if let Some(g) = t.goto {
            self.current = g;
        }
        Ok(())
    }
}

impl GuiSurface for ScriptedScreen {
    fn observe(&mut self) -> Result<Observation, String> {
        self.frame().map(Observation::Frame)
    }

    fn inject(&mut self, event: &InputEvent) -> Result<(), String> {
        self.log.push(event.clone());
        let frame = self.frame()?;
        match *event {
            InputEvent::Click { x, y, button } => {
                let Some(el) = frame.hit(x, y).cloned() else { return Ok(()) };
                let gesture = match button {
                    ClickButton::Left => Gesture::Left,
                    ClickButton::Right => Gesture::Right,
                    ClickButton::Double => Gesture::Double,
                };
                self.apply(&el, gesture)
            }
            InputEvent::DragPress { x, y } => {
                self.drag_source = frame.hit(x, y).cloned();
                if let Some((_, p)) = self.drag_source.as_ref().and_then(|e| e.list_item.clone()) {
                    self.selection = Some(p);
                }
                Ok(())
            }
            InputEvent::DragRelease { x, y } => {
                let source = self.drag_source.take();
                match (source, frame.hit(x, y).cloned()) {
                    (Some(_), Some(target)) => self.apply(&target, Gesture::Drop),
                    _ => Ok(()),
                }
            }
            InputEvent::DragMove { .. } | InputEvent::Key(_) | InputEvent::Scroll { .. } => Ok(()),
        }
    }
}
