//! Client for an out-of-process computer-vision service.
//!
//! Request: `{"screenshot": <base64 PNG>, "target": {"kind": "icon"|"text", "data": ..}}`.
//! Response: `{"found": bool, "region": [x, y, w, h], "confidence": f64}`.
//! For icon targets `data` is the base64 template image read from the asset
//! directory; for text targets it is the text itself.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use super::{resolve_coordinates, Method, Region, ResolveError, Resolution, Screen, Target, TargetResolver};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.6;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct ExternalResolver {
    pub endpoint: String,
    pub assets_dir: PathBuf,
    pub threshold: f64,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct Reply {
    found: bool,
    #[serde(default)]
    region: Option<Region>,
    #[serde(default)]
    confidence: Option<f64>,
}

/// Width and height from a PNG's IHDR chunk.
pub fn png_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    const SIG: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.len() < 24 || &bytes[..8] != SIG || &bytes[12..16] != b"IHDR" {
        return None;
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().ok()?);
    let h = u32::from_be_bytes(bytes[20..24].try_into().ok()?);
    Some((w, h))
}

impl ExternalResolver {
    pub fn new(endpoint: impl Into<String>, assets_dir: impl Into<PathBuf>) -> Self {
        ExternalResolver {
            endpoint: endpoint.into(),
            assets_dir: assets_dir.into(),
            threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    fn call(&self, screenshot: &[u8], target: &Target) -> Result<Resolution, ResolveError> {
        let (width, height) = png_dimensions(screenshot)
            .ok_or_else(|| ResolveError::Backend("screenshot is not a PNG image".into()))?;
        let b64 = base64::engine::general_purpose::STANDARD;
        let (kind, data, method) = match target {
            Target::Coordinates { x, y } => return resolve_coordinates(*x, *y, width, height),
            Target::Text(t) => ("text", t.clone(), Method::Ocr),
            Target::Image(r) => {
                let path = self.assets_dir.join(r);
                let bytes = std::fs::read(&path)
                    .map_err(|e| ResolveError::Backend(format!("cannot read template image {}: {e}", path.display())))?;
                ("icon", b64.encode(bytes), Method::IconMatch)
            }
        };
        let body = json!({
            "screenshot": b64.encode(screenshot),
            "target": {"kind": kind, "data": data},
        });
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let sent = agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json")
            .send_string(&body.to_string());
        let reply: Reply = match sent {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| ResolveError::Backend(format!("cannot read backend response: {e}")))?;
                serde_json::from_str(&text)
                    .map_err(|e| ResolveError::Backend(format!("malformed backend response: {e}")))?
            }
            Err(ureq::Error::Status(code, _)) => {
                return Err(ResolveError::Backend(format!("backend answered HTTP {code}")))
            }
            Err(e) => return Err(ResolveError::Backend(format!("backend unreachable: {e}"))),
        };
        if !reply.found {
            return Err(ResolveError::NotFound { candidates: Vec::new() });
        }
        let (Some(region), Some(confidence)) = (reply.region, reply.confidence) else {
            return Err(ResolveError::Backend(
                "malformed backend response: found without region or confidence".into(),
            ));
        };
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ResolveError::Backend(format!("confidence {confidence} outside [0, 1]")));
        }
        if !region.within(width, height) {
            return Err(ResolveError::Backend(format!(
                "region {region} lies outside the {width}x{height} screenshot"
            )));
        }
        if confidence < self.threshold {
            return Err(ResolveError::NotFound {
                candidates: vec![format!("{region} at confidence {confidence}")],
            });
        }
        Ok(Resolution {
            region,
            confidence,
            method,
            ambiguous: false,
            element_id: None,
        })
    }
}

impl TargetResolver for ExternalResolver {
    fn resolve(&self, target: &Target, screen: Screen<'_>) -> Result<Resolution, ResolveError> {
        match screen {
            Screen::Screenshot(bytes) => self.call(bytes, target),
            Screen::Model(_) => Err(ResolveError::Backend(
                "the external backend needs a screenshot, not a screen model".into(),
            )),
        }
    }
}
