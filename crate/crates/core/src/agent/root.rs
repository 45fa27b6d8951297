use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assertions::PathPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Native,
    Sandbox,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Mode::Native),
            "sandbox" => Ok(Mode::Sandbox),
            other => Err(format!("unknown mode `{other}` (expected native or sandbox)")),
        }
    }
}

/// Where the agent acts. In sandbox mode every path is confined to
/// `root_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRoot {
    pub mode: Mode,
    pub root_path: Option<PathBuf>,
    pub sys_vars: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum RootError {
    #[error("sandbox root {0}: {1}")]
    Root(PathBuf, String),
    #[error("system variable `{name}`: {reason}")]
    SysVar { name: String, reason: String },
    #[error("cannot read system variables file {path}: {reason}")]
    File { path: PathBuf, reason: String },
}

/// Resolves `.` and `..` without touching the filesystem. `..` at the root
/// stays at the root.
pub fn normalize_lexically(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::RootDir | Component::Prefix(_) => out.push(c.as_os_str()),
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            Component::Normal(n) => out.push(n),
        }
    }
    out
}

/// Canonicalizes the deepest existing ancestor and re-appends the rest, so
/// symlinks along the existing part are followed.
fn canonicalize_existing_prefix(p: &Path) -> std::io::Result<PathBuf> {
    let mut existing = p.to_path_buf();
    let mut rest = Vec::new();
    loop {
        match existing.canonicalize() {
            Ok(c) => {
                let mut out = c;
                for r in rest.iter().rev() {
                    out.push(r);
                }
                return Ok(out);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound || e.kind() == std::io::ErrorKind::NotADirectory => {
                match (existing.file_name().map(|f| f.to_os_string()), existing.parent()) {
                    (Some(name), Some(parent)) => {
                        rest.push(name);
                        existing = parent.to_path_buf();
                    }
                    _ => return Err(e),
                }
            }
            Err(e) => return Err(e),
        }
    }
}

impl ExecutionRoot {
    /// Sandbox rooted at `root`. Relative system variable values are taken
    /// relative to the root; all values must stay inside it.
    pub fn sandbox(root: &Path, sys_vars: BTreeMap<String, String>) -> Result<Self, RootError> {
        let root = root
            .canonicalize()
            .map_err(|e| RootError::Root(root.to_path_buf(), e.to_string()))?;
        if !root.is_dir() {
            return Err(RootError::Root(root, "not a directory".into()));
        }
        let mut r = ExecutionRoot {
            mode: Mode::Sandbox,
            root_path: Some(root.clone()),
            sys_vars: BTreeMap::new(),
        };
        for (name, value) in sys_vars {
            let p = Path::new(&value);
            let abs = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            let confined = r
                .confine(&abs.to_string_lossy())
                .map_err(|reason| RootError::SysVar { name: name.clone(), reason })?;
            r.sys_vars.insert(name, confined.to_string_lossy().into_owned());
        }
        Ok(r)
    }

    pub fn native(sys_vars: BTreeMap<String, String>) -> Result<Self, RootError> {
        for (name, value) in &sys_vars {
            if !Path::new(value).is_absolute() {
                return Err(RootError::SysVar {
                    name: name.clone(),
                    reason: format!("`{value}` is not absolute"),
                });
            }
        }
        Ok(ExecutionRoot {
            mode: Mode::Native,
            root_path: None,
            sys_vars,
        })
    }

    /// Reads a flat `name: path` YAML mapping.
    pub fn load_sys_vars(path: &Path) -> Result<BTreeMap<String, String>, RootError> {
        let text = std::fs::read_to_string(path).map_err(|e| RootError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if text.trim().is_empty() {
            return Ok(BTreeMap::new());
        }
        crate::yaml::from_str(&text).map_err(|e| RootError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Maps a guest path to a real path, rejecting anything that escapes the
    /// sandbox root lexically or through symlinks.
    pub fn confine(&self, raw: &str) -> Result<PathBuf, String> {
        let p = Path::new(raw);
        if !p.is_absolute() {
            return Err(format!("path `{raw}` is not absolute"));
        }
        let Some(root) = &self.root_path else {
            return Ok(p.to_path_buf());
        };
        let lexical = normalize_lexically(p);
        if !lexical.starts_with(root) {
            return Err(format!("path `{raw}` escapes the sandbox root {}", root.display()));
        }
        let real = canonicalize_existing_prefix(&lexical).map_err(|e| format!("cannot resolve `{raw}`: {e}"))?;
        if !real.starts_with(root) {
            return Err(format!("path `{raw}` escapes the sandbox root through a link"));
        }
        Ok(lexical)
    }

    pub fn working_dir(&self) -> Option<&Path> {
        self.root_path.as_deref()
    }
}

impl PathPolicy for ExecutionRoot {
    fn resolve(&self, raw: &str) -> Result<PathBuf, String> {
        self.confine(raw)
    }

    fn working_dir(&self) -> Option<&Path> {
        self.root_path.as_deref()
    }
}
