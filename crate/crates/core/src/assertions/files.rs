use std::io::ErrorKind;
use std::path::Path;

use regex::Regex;

use super::{ErrorClass, EvalContext, Outcome, Params};

const EXCERPT_BYTES: usize = 256;

enum Existence {
    Present,
    Absent,
}

/// Distinguishes absence from inaccessibility: a permission error while
/// walking to `path` is an error, not a missing file.
fn existence(path: &Path) -> Result<Existence, Outcome> {
    match std::fs::symlink_metadata(path) {
        Ok(_) => Ok(Existence::Present),
        Err(e) if matches!(e.kind(), ErrorKind::NotFound | ErrorKind::NotADirectory) => {
            Ok(Existence::Absent)
        }
        Err(e) => Err(Outcome::error(
            ErrorClass::Io,
            format!("cannot access {}: {e}", path.display()),
        )),
    }
}

pub(super) fn file_exists(p: &Params, _: &EvalContext<'_>) -> Outcome {
    let dst = match p.path("dst") {
        Ok(d) => d,
        Err(e) => return e.into(),
    };
    match existence(&dst) {
        Ok(Existence::Present) => Outcome::pass(format!("{} exists", dst.display())),
        Ok(Existence::Absent) => Outcome::fail("absent", "present", format!("{} does not exist", dst.display())),
        Err(o) => o,
    }
}

pub(super) fn file_absent(p: &Params, _: &EvalContext<'_>) -> Outcome {
    let dst = match p.path("dst") {
        Ok(d) => d,
        Err(e) => return e.into(),
    };
    match existence(&dst) {
        Ok(Existence::Absent) => Outcome::pass(format!("{} does not exist", dst.display())),
        Ok(Existence::Present) => Outcome::fail("present", "absent", format!("{} exists", dst.display())),
        Err(o) => o,
    }
}

/// Reads a regular file up to the context's size cap, decoded as lossy UTF-8.
pub(super) fn read_capped(path: &Path, ctx: &EvalContext<'_>) -> Result<String, Outcome> {
    let meta = std::fs::metadata(path)
        .map_err(|e| Outcome::error(ErrorClass::Io, format!("cannot read {}: {e}", path.display())))?;
    if !meta.is_file() {
        return Err(Outcome::error(
            ErrorClass::Io,
            format!("{} is not a regular file", path.display()),
        ));
    }
    if meta.len() > ctx.size_cap {
        return Err(Outcome::error(
            ErrorClass::Io,
            format!("{} is {} bytes, over the {} byte cap", path.display(), meta.len(), ctx.size_cap),
        ));
    }
    let bytes = std::fs::read(path)
        .map_err(|e| Outcome::error(ErrorClass::Io, format!("cannot read {}: {e}", path.display())))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

pub(super) fn excerpt(text: &str) -> String {
    if text.len() <= EXCERPT_BYTES {
        return text.to_string();
    }
    let mut end = EXCERPT_BYTES;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_string()
}

pub(super) fn file_contains(p: &Params, ctx: &EvalContext<'_>) -> Outcome {
    let (dst, pattern, mode) = match (p.path("dst"), p.str("pattern"), p.str("mode")) {
        (Ok(d), Ok(pat), Ok(m)) => (d, pat, m),
        (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => return e.into(),
    };
    let matcher: Box<dyn Fn(&str) -> bool> = match mode {
        "substring" => {
            let needle = pattern.to_string();
            Box::new(move |t: &str| t.contains(needle.as_str()))
        }
        "regex" | "full_match" => {
            let src = if mode == "full_match" {
                format!(r"\A(?:{pattern})\z")
            } else {
                pattern.to_string()
            };
            match Regex::new(&src) {
                Ok(re) => Box::new(move |t: &str| re.is_match(t)),
                Err(e) => return Outcome::error(ErrorClass::BadQuery, format!("invalid regex: {e}")),
            }
        }
        other => {
            return Outcome::error(
                ErrorClass::BadParameter,
                format!("unknown mode `{other}` (expected substring, regex or full_match)"),
            )
        }
    };
    let text = match read_capped(&dst, ctx) {
        Ok(t) => t,
        Err(o) => return o,
    };
    if matcher(&text) {
        Outcome::pass(format!("{} matches ({mode})", dst.display()))
    } else {
        Outcome::fail(
            excerpt(&text),
            pattern,
            format!("{} does not match `{pattern}` ({mode})", dst.display()),
        )
    }
}
