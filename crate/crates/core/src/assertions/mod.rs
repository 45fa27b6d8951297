//! Registry of named assertion functions that evaluate guest state.
//!
//! Every function is read-only and returns a three-valued status: `fail`
//! means the state contradicts the expectation, `error` means the expectation
//! could not be evaluated at all.

mod external;
mod files;
mod manifest;
mod query;
mod sqlite;
mod timestamp;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub use manifest::{LibraryManifest, ManifestError, ManifestFunction};
pub use timestamp::{parse_timestamp, DEFAULT_TOLERANCE_MS};

/// Default cap on files read by content assertions.
pub const DEFAULT_SIZE_CAP: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
}

impl fmt::Display for TestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestStatus::Pass => "pass",
            TestStatus::Fail => "fail",
            TestStatus::Error => "error",
        })
    }
}

/// Why an assertion could not be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Io,
    MalformedFile,
    BadQuery,
    BadParameter,
    UnknownFunction,
    Confinement,
    External,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Io => "io",
            ErrorClass::MalformedFile => "malformed_file",
            ErrorClass::BadQuery => "bad_query",
            ErrorClass::BadParameter => "bad_parameter",
            ErrorClass::UnknownFunction => "unknown_function",
            ErrorClass::Confinement => "confinement",
            ErrorClass::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_name: String,
    pub function: String,
    pub status: TestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Value>,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    pub started_at: DateTime<Utc>,
    pub duration_ms: u64,
}

/// Result of an assertion body before names and timing are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: TestStatus,
    pub observed: Option<Value>,
    pub expected: Option<Value>,
    pub message: String,
    pub error_class: Option<ErrorClass>,
}

impl Outcome {
    pub fn pass(message: impl Into<String>) -> Self {
        Outcome {
            status: TestStatus::Pass,
            observed: None,
            expected: None,
            message: message.into(),
            error_class: None,
        }
    }

    pub fn fail(observed: impl Into<Value>, expected: impl Into<Value>, message: impl Into<String>) -> Self {
        Outcome {
            status: TestStatus::Fail,
            observed: Some(observed.into()),
            expected: Some(expected.into()),
            message: message.into(),
            error_class: None,
        }
    }

    pub fn error(class: ErrorClass, message: impl fmt::Display) -> Self {
        Outcome {
            status: TestStatus::Error,
            observed: None,
            expected: None,
            message: format!("{}: {message}", class.as_str()),
            error_class: Some(class),
        }
    }

    pub fn with_observed(mut self, observed: impl Into<Value>) -> Self {
        self.observed = Some(observed.into());
        self
    }

    pub fn with_expected(mut self, expected: impl Into<Value>) -> Self {
        self.expected = Some(expected.into());
        self
    }
}

impl From<ParamError> for Outcome {
    fn from(e: ParamError) -> Self {
        Outcome::error(ErrorClass::BadParameter, e)
    }
}

/// Maps a path parameter to a real filesystem path; enforces sandbox
/// confinement.
pub trait PathPolicy: Send + Sync {
    fn resolve(&self, raw: &str) -> Result<PathBuf, String>;

    /// Working directory for external test programs.
    fn working_dir(&self) -> Option<&Path> {
        None
    }
}

/// Accepts any absolute path.
#[derive(Debug, Default, Clone, Copy)]
pub struct Unconfined;

impl PathPolicy for Unconfined {
    fn resolve(&self, raw: &str) -> Result<PathBuf, String> {
        let p = Path::new(raw);
        if p.is_absolute() {
            Ok(p.to_path_buf())
        } else {
            Err(format!("path `{raw}` is not absolute"))
        }
    }
}

pub struct EvalContext<'a> {
    pub paths: &'a dyn PathPolicy,
    pub size_cap: u64,
}

impl<'a> EvalContext<'a> {
    pub fn new(paths: &'a dyn PathPolicy) -> Self {
        EvalContext {
            paths,
            size_cap: DEFAULT_SIZE_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// A path inside the guest; confined before the function sees it.
    Path,
    String,
    Integer,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ParamSpec {
    fn required(name: &str, kind: ParamKind) -> Self {
        ParamSpec {
            name: name.into(),
            kind,
            required: true,
            default: None,
        }
    }

    fn optional(name: &str, kind: ParamKind, default: Option<Value>) -> Self {
        ParamSpec {
            name: name.into(),
            kind,
            required: false,
            default,
        }
    }
}

pub type BuiltinFn = fn(&Params, &EvalContext<'_>) -> Outcome;

#[derive(Clone)]
pub enum Implementation {
    Builtin(BuiltinFn),
    /// External program: receives `{"function", "params"}` as JSON on stdin and
    /// prints an outcome object on stdout.
    External { program: Vec<String>, base_dir: PathBuf },
}

impl fmt::Debug for Implementation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Implementation::Builtin(_) => f.write_str("Builtin"),
            Implementation::External { program, .. } => write!(f, "External({program:?})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FunctionDescriptor {
    pub name: String,
    pub library: String,
    pub params: Vec<ParamSpec>,
    pub implementation: Implementation,
}

impl FunctionDescriptor {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("assertion function `{0}` is already registered")]
    Duplicate(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Rendered parameters with descriptor defaults applied.
#[derive(Debug, Clone, Default)]
pub struct Params {
    values: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` must be {expected}")]
    Type { name: String, expected: &'static str },
    #[error("parameter `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

impl Params {
    pub fn from_map(values: Map<String, Value>) -> Self {
        Params { values }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name).filter(|v| !v.is_null())
    }

    pub fn value(&self, name: &str) -> Result<&Value, ParamError> {
        self.get(name).ok_or_else(|| ParamError::Missing(name.into()))
    }

    pub fn str(&self, name: &str) -> Result<&str, ParamError> {
        self.value(name)?.as_str().ok_or(ParamError::Type {
            name: name.into(),
            expected: "a string",
        })
    }

    pub fn opt_str(&self, name: &str) -> Result<Option<&str>, ParamError> {
        match self.get(name) {
            None => Ok(None),
            Some(_) => self.str(name).map(Some),
        }
    }

    /// Integer given either as a number or as numeric text (templates render
    /// to text).
    pub fn u64(&self, name: &str) -> Result<u64, ParamError> {
        let v = self.value(name)?;
        v.as_u64()
            .or_else(|| v.as_str().and_then(|s| s.trim().parse().ok()))
            .ok_or(ParamError::Type {
                name: name.into(),
                expected: "a non-negative integer",
            })
    }

    pub fn path(&self, name: &str) -> Result<PathBuf, ParamError> {
        self.str(name).map(PathBuf::from)
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.values
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssertionRegistry {
    functions: BTreeMap<String, FunctionDescriptor>,
}

impl AssertionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The seven built-in functions.
    pub fn core() -> Self {
        use ParamKind::*;
        let mut r = Self::empty();
        let mut add = |name: &str, params: Vec<ParamSpec>, f: BuiltinFn| {
            r.register(FunctionDescriptor {
                name: name.into(),
                library: "core".into(),
                params,
                implementation: Implementation::Builtin(f),
            })
            .expect("core names are unique");
        };
        add("file_exists", vec![ParamSpec::required("dst", Path)], files::file_exists);
        add("file_absent", vec![ParamSpec::required("dst", Path)], files::file_absent);
        add(
            "file_contains",
            vec![
                ParamSpec::required("dst", Path),
                ParamSpec::required("pattern", String),
                ParamSpec::optional("mode", String, Some("substring".into())),
            ],
            files::file_contains,
        );
        add(
            "json_query_equals",
            vec![
                ParamSpec::required("dst", Path),
                ParamSpec::required("query", String),
                ParamSpec::required("expected", Any),
            ],
            query::json_query_equals,
        );
        add(
            "xml_query_equals",
            vec![
                ParamSpec::required("dst", Path),
                ParamSpec::required("query", String),
                ParamSpec::required("expected", String),
            ],
            query::xml_query_equals,
        );
        add(
            "sqlite_query_equals",
            vec![
                ParamSpec::required("dst", Path),
                ParamSpec::required("sql", String),
                ParamSpec::required("expected", Any),
            ],
            sqlite::sqlite_query_equals,
        );
        add(
            "timestamp_within",
            vec![
                ParamSpec::required("source", String),
                ParamSpec::required("reference", Any),
                ParamSpec::optional("tolerance_ms", Integer, Some(DEFAULT_TOLERANCE_MS.into())),
                ParamSpec::optional("dst", Path, None),
                ParamSpec::optional("pattern", String, None),
                ParamSpec::optional("value", Any, None),
            ],
            timestamp::timestamp_within,
        );
        r
    }

    pub fn register(&mut self, desc: FunctionDescriptor) -> Result<(), RegistryError> {
        if self.functions.contains_key(&desc.name) {
            return Err(RegistryError::Duplicate(desc.name));
        }
        self.functions.insert(desc.name.clone(), desc);
        Ok(())
    }

    /// Registers every function of a manifest; nothing is registered if any
    /// name collides.
    pub fn register_manifest(&mut self, manifest: &LibraryManifest, base_dir: &Path) -> Result<(), RegistryError> {
        let descs = manifest.descriptors(base_dir)?;
        if let Some(dup) = descs.iter().find(|d| self.functions.contains_key(&d.name)) {
            return Err(RegistryError::Duplicate(dup.name.clone()));
        }
        for d in descs {
            self.functions.insert(d.name.clone(), d);
        }
        Ok(())
    }

    pub fn load_manifest_file(&mut self, path: &Path) -> Result<(), RegistryError> {
        let manifest = LibraryManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        self.register_manifest(&manifest, base)
    }

    pub fn remove(&mut self, name: &str) -> Option<FunctionDescriptor> {
        self.functions.remove(name)
    }

    pub fn descriptor(&self, name: &str) -> Option<&FunctionDescriptor> {
        self.functions.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.functions.keys().map(String::as_str)
    }

    /// SHA-256 over the canonical JSON of every descriptor's name, library and
    /// parameter schema.
    pub fn digest(&self) -> String {
        let schema: Vec<Value> = self
            .functions
            .values()
            .map(|d| {
                serde_json::json!({
                    "name": d.name,
                    "library": d.library,
                    "params": d.params,
                })
            })
            .collect();
        let bytes = serde_json::to_vec(&schema).expect("schema serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Evaluates one test invocation. Never panics on bad input: unknown
    /// functions, bad parameters and confinement violations all become error
    /// results.
    pub fn evaluate(
        &self,
        test_name: &str,
        function: &str,
        params: &Map<String, Value>,
        ctx: &EvalContext<'_>,
    ) -> TestResult {
        let started_at = Utc::now();
        let clock = Instant::now();
        let outcome = match self.functions.get(function) {
            None => Outcome::error(
                ErrorClass::UnknownFunction,
                format!("no assertion function named `{function}`"),
            ),
            Some(desc) => match prepare_params(desc, params, ctx) {
                Err(o) => o,
                Ok(prepared) => match &desc.implementation {
                    Implementation::Builtin(f) => f(&prepared, ctx),
                    Implementation::External { program, base_dir } => {
                        external::run(program, base_dir, function, &prepared, ctx)
                    }
                },
            },
        };
        TestResult {
            test_name: test_name.into(),
            function: function.into(),
            status: outcome.status,
            observed: outcome.observed,
            expected: outcome.expected,
            message: outcome.message,
            error_class: outcome.error_class,
            started_at,
            duration_ms: clock.elapsed().as_millis() as u64,
        }
    }
}

/// Applies defaults, checks required parameters and confines path parameters.
fn prepare_params(
    desc: &FunctionDescriptor,
    params: &Map<String, Value>,
    ctx: &EvalContext<'_>,
) -> Result<Params, Outcome> {
    let mut values = params.clone();
    for spec in &desc.params {
        let present = values.get(&spec.name).is_some_and(|v| !v.is_null());
        if !present {
            match (&spec.default, spec.required) {
                (Some(d), _) => {
                    values.insert(spec.name.clone(), d.clone());
                }
                (None, true) => return Err(ParamError::Missing(spec.name.clone()).into()),
                (None, false) => continue,
            }
        }
        if spec.kind == ParamKind::Path {
            let raw = values
                .get(&spec.name)
                .and_then(Value::as_str)
                .ok_or_else(|| Outcome::from(ParamError::Type {
                    name: spec.name.clone(),
                    expected: "a path string",
                }))?;
            let resolved = ctx
                .paths
                .resolve(raw)
                .map_err(|e| Outcome::error(ErrorClass::Confinement, e))?;
            values.insert(spec.name.clone(), Value::String(resolved.to_string_lossy().into_owned()));
        }
    }
    Ok(Params::from_map(values))
}

/// Structural equality where numbers compare numerically (1 == 1.0) and
/// everything else compares exactly, including type.
pub fn typed_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_i64(), y.as_i64()) {
            (Some(i), Some(j)) => i == j,
            _ => match (x.as_u64(), y.as_u64()) {
                (Some(i), Some(j)) => i == j,
                _ => x.as_f64() == y.as_f64(),
            },
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| typed_eq(a, b))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| typed_eq(v, w)))
        }
        _ => a == b,
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn eval(function: &str, params: Value) -> TestResult {
        let reg = AssertionRegistry::core();
        let Value::Object(map) = params else { panic!("params must be an object") };
        reg.evaluate("t", function, &map, &EvalContext::new(&Unconfined))
    }
}
