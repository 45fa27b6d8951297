use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::run::{run_experiment, skeleton};
use super::{EnvironmentSpec, FailurePolicy, RunOptions, RunReport, Verdict};
use crate::playbook::Playbook;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub playbook: String,
    pub environment: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    /// Playbook-major, in input order.
    pub cells: Vec<MatrixCell>,
}

impl MatrixResult {
    pub fn get(&self, playbook: &str, environment: &str) -> Option<&RunReport> {
        self.cells
            .iter()
            .find(|c| c.playbook == playbook && c.environment == environment)
            .map(|c| &c.report)
    }

    /// The worst verdict over all cells, `AllPass` when empty.
    pub fn worst(&self) -> Verdict {
        let rank = |v: Verdict| match v {
            Verdict::AllPass => 0,
            Verdict::TestFailures => 1,
            Verdict::AbortedError => 2,
        };
        self.cells
            .iter()
            .map(|c| c.report.verdict)
            .max_by_key(|v| rank(*v))
            .unwrap_or(Verdict::AllPass)
    }
}

fn run_cell(pb: &Playbook, env: &EnvironmentSpec, policy: FailurePolicy, opts: &RunOptions) -> RunReport {
    match std::panic::catch_unwind(AssertUnwindSafe(|| run_experiment(pb, env, policy, opts))) {
        Ok(r) => r,
        Err(panic) => {
            let what = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            let mut r = skeleton(pb, env, opts);
            r.abort_reason = Some(format!("run panicked: {what}"));
            r
        }
    }
}

/// Runs every playbook in every environment. Different environments run in
/// parallel up to `parallelism`; runs on one environment are sequential.
pub fn run_matrix(
    playbooks: &[(String, Playbook)],
    envs: &[EnvironmentSpec],
    policy: FailurePolicy,
    opts: &RunOptions,
    parallelism: usize,
) -> MatrixResult {
    // Entries sharing an id share the environment, so they form one group.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, e) in envs.iter().enumerate() {
        match groups.iter_mut().find(|g| envs[g[0]].id == e.id) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    let workers = parallelism.max(1).min(groups.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let g = next.fetch_add(1, Ordering::SeqCst);
                let Some(group) = groups.get(g) else { break };
                for &ei in group {
                    for (pi, (_, pb)) in playbooks.iter().enumerate() {
                        let report = run_cell(pb, &envs[ei], policy, opts);
                        done.lock().expect("results lock").push((pi, ei, report));
                    }
                }
            });
        }
    });
    let mut done = done.into_inner().expect("results lock");
    done.sort_by_key(|(pi, ei, _)| (*pi, *ei));
    MatrixResult {
        cells: done
            .into_iter()
            .map(|(pi, ei, report)| MatrixCell {
                playbook: playbooks[pi].0.clone(),
                environment: envs[ei].id.clone(),
                report,
            })
            .collect(),
    }
}
