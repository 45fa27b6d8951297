use std::path::{Path, PathBuf};

use serde::Deserialize;
use tdf_core::orchestrator::{OnNonzeroExit, OnTestFail};
use tdf_core::FailurePolicy;

use crate::CliError;

/// Settings file contents. Relative paths are resolved against the file's
/// directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub environments_file: Option<PathBuf>,
    pub reports_dir: Option<PathBuf>,
    pub cv_backend: Option<String>,
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub failure_policy: PolicyOverrides,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverrides {
    pub on_test_fail: Option<OnTestFail>,
    pub on_nonzero_exit: Option<OnNonzeroExit>,
}

impl PolicyOverrides {
    fn or(self, lower: PolicyOverrides) -> PolicyOverrides {
        PolicyOverrides {
            on_test_fail: self.on_test_fail.or(lower.on_test_fail),
            on_nonzero_exit: self.on_nonzero_exit.or(lower.on_nonzero_exit),
        }
    }

    fn apply(self, base: FailurePolicy) -> FailurePolicy {
        FailurePolicy {
            on_test_fail: self.on_test_fail.unwrap_or(base.on_test_fail),
            on_nonzero_exit: self.on_nonzero_exit.unwrap_or(base.on_nonzero_exit),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub environments_file: PathBuf,
    pub reports_dir: PathBuf,
    pub cv_backend: Option<String>,
    pub parallelism: usize,
    pub failure_policy: FailurePolicy,
}

/// Values given on the command line; `None` defers to the settings file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config_file: Option<PathBuf>,
    pub environments_file: Option<PathBuf>,
    pub reports_dir: Option<PathBuf>,
    pub cv_backend: Option<String>,
    pub parallelism: Option<usize>,
    pub policy: PolicyOverrides,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.environments_file, &mut cfg.reports_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

impl CliConfig {
    /// Flags win over the settings file, which wins over defaults. The
    /// settings file comes from `--config`, else the `TDF_CONFIG` variable.
    pub fn resolve(flags: Overrides, env_config: Option<PathBuf>) -> Result<CliConfig, CliError> {
        let file = match flags.config_file.or(env_config) {
            Some(p) => FileConfig::load(&p)?,
            None => FileConfig::default(),
        };
        let parallelism = flags
            .parallelism
            .or(file.parallelism)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if parallelism == 0 {
            return Err(CliError::usage("parallelism must be at least 1"));
        }
        Ok(CliConfig {
            environments_file: flags
                .environments_file
                .or(file.environments_file)
                .unwrap_or_else(|| PathBuf::from("environments.yaml")),
            reports_dir: flags.reports_dir.or(file.reports_dir).unwrap_or_else(|| PathBuf::from("reports")),
            cv_backend: flags.cv_backend.or(file.cv_backend),
            parallelism,
            failure_policy: flags.policy.or(file.failure_policy).apply(FailurePolicy::default()),
        })
    }
}
