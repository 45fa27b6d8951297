//! `tdf`: validate, run, compare and reproduce forensic experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tdf_core::orchestrator::{OnNonzeroExit, OnTestFail};

use config::{CliConfig, Overrides, PolicyOverrides};

/// A failure that ends the process with a specific exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Bad input: missing files, unknown ids, malformed configuration.
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    /// The harness itself could not do its job.
    pub fn infra(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

#[derive(Parser)]
#[command(name = "tdf", version, about = "Playbook-driven forensic experiments")]
struct Cli {
    /// Settings file (TOML). Falls back to $TDF_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where reports are written.
    #[arg(long, global = true)]
    reports_dir: Option<PathBuf>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Environment registry file.
    #[arg(long)]
    environments: Option<PathBuf>,
    #[arg(long, value_enum)]
    on_test_fail: Option<Policy>,
    #[arg(long, value_enum)]
    on_nonzero_exit: Option<Policy>,
    /// Hash the sandbox tree around every test evaluation.
    #[arg(long)]
    watchdog: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Continue,
    Abort,
}

#[derive(Subcommand)]
enum Command {
    /// Check a playbook for undeclared names, unknown functions and missing parameters.
    Validate {
        playbook: PathBuf,
        /// Take system variable names from this environment.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        environments: Option<PathBuf>,
        /// Additional system variable names.
        #[arg(long = "sys-var")]
        sys_vars: Vec<String>,
        /// Assertion library manifests to register.
        #[arg(long = "library")]
        libraries: Vec<PathBuf>,
    },
    /// Run one playbook in one environment.
    Run {
        playbook: PathBuf,
        #[arg(long)]
        env: String,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run every matching playbook in every listed environment.
    Matrix {
        /// Glob selecting playbook files.
        playbooks: String,
        /// Environment ids, repeated or comma separated.
        #[arg(long = "env", value_delimiter = ',')]
        envs: Vec<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Output directory; defaults to a fresh directory under the reports dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Compare tool report directories against a baseline.
    Diff {
        baseline: PathBuf,
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        /// Print the matrix as CSV instead of a table.
        #[arg(long)]
        csv: bool,
        /// Where divergence records go; defaults to the reports dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check whether two run reports show the same outcome.
    Reproduce { report_a: PathBuf, report_b: PathBuf },
    /// Serve a guest agent.
    Agent {
        #[arg(long, default_value = "0.0.0.0:48620")]
        listen: String,
        #[arg(long, value_enum)]
        mode: AgentMode,
        /// Sandbox root; required in sandbox mode.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Flat name-to-path mapping of system variables.
        #[arg(long)]
        sys_vars: Option<PathBuf>,
        /// Computer-vision service endpoint for GUI targets.
        #[arg(long)]
        cv_backend: Option<String>,
        /// Directory holding template images for icon targets.
        #[arg(long, default_value = ".")]
        assets: PathBuf,
        #[arg(long = "library")]
        libraries: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AgentMode {
    Native,
    Sandbox,
}

impl RunFlags {
    fn overrides(&self, cli: &Cli, parallelism: Option<usize>) -> Overrides {
        Overrides {
            config_file: cli.config.clone(),
            environments_file: self.environments.clone(),
            reports_dir: cli.reports_dir.clone(),
            cv_backend: None,
            parallelism,
            policy: PolicyOverrides {
                on_test_fail: self.on_test_fail.map(|p| match p {
                    Policy::Continue => OnTestFail::Continue,
                    Policy::Abort => OnTestFail::Abort,
                }),
                on_nonzero_exit: self.on_nonzero_exit.map(|p| match p {
                    Policy::Continue => OnNonzeroExit::Continue,
                    Policy::Abort => OnNonzeroExit::Abort,
                }),
            },
        }
    }
}

fn config(flags: Overrides) -> Result<CliConfig, CliError> {
    CliConfig::resolve(flags, std::env::var_os("TDF_CONFIG").map(PathBuf::from))
}

fn dispatch(cli: &Cli) -> Result<u8, CliError> {
    let plain = || Overrides {
        config_file: cli.config.clone(),
        reports_dir: cli.reports_dir.clone(),
        ..Overrides::default()
    };
    match &cli.command {
        Command::Validate { playbook, env, environments, sys_vars, libraries } => {
            let cfg = config(Overrides { environments_file: environments.clone(), ..plain() })?;
            commands::validate(&cfg, playbook, env.as_deref(), sys_vars, libraries)
        }
        Command::Run { playbook, env, flags } => {
            commands::run(&config(flags.overrides(cli, None))?, playbook, env, flags.watchdog)
        }
        Command::Matrix { playbooks, envs, parallelism, out, flags } => {
            let cfg = config(flags.overrides(cli, *parallelism))?;
            commands::matrix(&cfg, playbooks, envs, out.as_deref(), flags.watchdog)
        }
        Command::Diff { baseline, candidates, csv, out } => {
            commands::diff(&config(plain())?, baseline, candidates, *csv, out.as_deref())
        }
        Command::Reproduce { report_a, report_b } => commands::reproduce(report_a, report_b),
        Command::Agent { listen, mode, root, sys_vars, cv_backend, assets, libraries } => {
            let cfg = config(Overrides { cv_backend: cv_backend.clone(), ..plain() })?;
            let opts = commands::AgentOptions {
                listen,
                mode: *mode,
                root: root.as_deref(),
                sys_vars: sys_vars.as_deref(),
                cv_backend: cfg.cv_backend.as_deref(),
                assets,
                libraries,
            };
            commands::agent(opts)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("tdf: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
