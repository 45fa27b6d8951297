use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FunctionDescriptor, Implementation, ParamSpec};
use crate::playbook::is_identifier;

/// Declarative descriptor for a third-party test library.
///
/// ```yaml
/// library: browser
/// version: "0.1.0"
/// functions:
///   - name: bookmark_count
///     program: ["./bookmark_count.sh"]
///     params:
///       - {name: dst, type: path, required: true}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryManifest {
    pub library: String,
    #[serde(default)]
    pub version: Option<String>,
    pub functions: Vec<ManifestFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFunction {
    pub name: String,
    /// Program and fixed arguments. A relative program path containing `/`
    /// is resolved against the manifest's directory.
    pub program: Vec<String>,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Parse(String),
    #[error("manifest: {0}")]
    Invalid(String),
}

impl LibraryManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let m: LibraryManifest = crate::yaml::from_str(text).map_err(|e| ManifestError::Parse(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<(), ManifestError> {
        if self.library.trim().is_empty() {
            return Err(ManifestError::Invalid("library name is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.functions {
            if !is_identifier(&f.name) {
                return Err(ManifestError::Invalid(format!("`{}` is not a valid function name", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(ManifestError::Invalid(format!("function `{}` declared twice", f.name)));
            }
            if f.program.is_empty() {
                return Err(ManifestError::Invalid(format!("function `{}` has an empty program", f.name)));
            }
            let mut params = std::collections::BTreeSet::new();
            for p in &f.params {
                if !params.insert(p.name.as_str()) {
                    return Err(ManifestError::Invalid(format!(
                        "function `{}` declares parameter `{}` twice",
                        f.name, p.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn descriptors(&self, base_dir: &Path) -> Result<Vec<FunctionDescriptor>, ManifestError> {
        self.check()?;
        Ok(self
            .functions
            .iter()
            .map(|f| {
                let mut program = f.program.clone();
                let exe = Path::new(&program[0]);
                if exe.is_relative() && program[0].contains('/') {
                    program[0] = base_dir.join(exe).to_string_lossy().into_owned();
                }
                FunctionDescriptor {
                    name: f.name.clone(),
                    library: self.library.clone(),
                    params: f.params.clone(),
                    implementation: Implementation::External {
                        program,
                        base_dir: base_dir.to_path_buf(),
                    },
                }
            })
            .collect())
    }
}
