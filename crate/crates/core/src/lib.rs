//! Playbook-driven forensic experiments.
//!
//! A [`Playbook`] declares variables, tests and an action sequence. The
//! [`orchestrator`] provisions an environment, drives a guest [`agent`] over
//! the line-delimited JSON [`protocol`], and produces a [`RunReport`]. The
//! [`diff`] module compares tabular tool output across versions.

pub mod agent;
pub mod assertions;
pub mod diff;
pub mod orchestrator;
pub mod playbook;
pub mod protocol;
pub mod resolver;
pub mod yaml;

#[cfg(test)]
mod testutil;

pub use assertions::{AssertionRegistry, ErrorClass, TestResult, TestStatus};
pub use diff::{DivergenceMatrix, DivergenceRecord, Finding as DiffFinding, LoadedReport, TabularReport};
pub use orchestrator::{EnvironmentRegistry, EnvironmentSpec, FailurePolicy, RunOptions, RunReport, Verdict};
pub use playbook::{parse_playbook, validate, Playbook, ValidationReport};
pub use protocol::{Handshake, Message, Request, Response};
pub use resolver::{Region, TargetResolver};
