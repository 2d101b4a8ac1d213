//! Discrete-event simulation over exact rational time.
//!
//! Between two consecutive event instants every core executes one server at
//! a constant active utilization, so virtual times and remaining demands
//! advance linearly and the next completion, budget exhaustion and
//! scheduling-deadline instants can be computed exactly.

mod events;
mod global;
mod metrics;
mod partitioned;
mod trace;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{Ema, Metrics, TimeSeries};
pub use trace::{write_ndjson, TraceRecord};

use crate::balance::{BalancerConfig, Heuristic, MissWindow};
use crate::error::SimError;
use crate::global::ReclaimMode;
use crate::migration::MigrationConfig;
use crate::model::{Job, TaskSpec, Tick};
use crate::rational::Rational;
use crate::workload::{JobStream, Scenario};

/// Scheduling policy of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Partitioned {
        heuristic: Heuristic,
        migration: bool,
        balancing: bool,
    },
    Global(ReclaimMode),
}

impl Policy {
    pub fn partitioned(heuristic: Heuristic, migration: bool, balancing: bool) -> Policy {
        Policy::Partitioned {
            heuristic,
            migration,
            balancing,
        }
    }

    /// Parses a policy name; partitioned policies take the given flags,
    /// except `wf-a` which always runs without balancing.
    pub fn parse(name: &str, migration: bool, balancing: bool) -> Result<Policy, String> {
        match name {
            "g-seq" => Ok(Policy::Global(ReclaimMode::Sequential)),
            "g-par" => Ok(Policy::Global(ReclaimMode::Parallel)),
            "wf-a" => Ok(Policy::partitioned(Heuristic::WorstFit, migration, false)),
            other => other
                .parse::<Heuristic>()
                .map(|h| Policy::partitioned(h, migration, balancing))
                .map_err(|_| format!("unknown policy `{other}` (expected ff, bf, wf, wf-a, g-seq, g-par)")),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Partitioned { heuristic, .. } => write!(f, "{}", heuristic.short_name()),
            Policy::Global(mode) => write!(f, "{mode}"),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    /// Partitioned names default to migration on, balancing off.
    fn from_str(s: &str) -> Result<Policy, String> {
        Policy::parse(s, true, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub horizon: Tick,
    /// Recompute every ledger from scratch after each event batch.
    pub debug_asserts: bool,
    pub record_trace: bool,
    /// Sample per-core series every `stride` ticks.
    pub sample_stride: Option<Tick>,
    pub ema_alpha: f64,
    /// Jobs in the per-core miss-ratio series window.
    pub series_window: usize,
    /// Migration parameters; `enabled` is overridden by the policy.
    pub migration: MigrationConfig,
    /// Balancer parameters; `enabled` is overridden by the policy.
    pub balancer: BalancerConfig,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            horizon: 100_000,
            debug_asserts: false,
            record_trace: false,
            sample_stride: None,
            ema_alpha: 1.0 / 200.0,
            series_window: 20,
            migration: MigrationConfig::default(),
            balancer: BalancerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub policy: Policy,
    pub metrics: Metrics,
    pub trace: Option<Vec<TraceRecord>>,
    pub series: Option<TimeSeries>,
}

/// Runs `scenario` under `policy` up to `opts.horizon` (inclusive).
pub fn run_simulation(scenario: &Scenario, policy: Policy, opts: &SimOptions) -> Result<SimResult, SimError> {
    scenario.validate().map_err(SimError::Config)?;
    opts.balancer.validate().map_err(SimError::Config)?;
    if !(opts.ema_alpha > 0.0 && opts.ema_alpha <= 1.0) {
        return Err(SimError::Config(format!("ema_alpha {} outside (0, 1]", opts.ema_alpha)));
    }
    if opts.sample_stride == Some(0) {
        return Err(SimError::Config("sample_stride must be positive".into()));
    }
    match policy {
        Policy::Partitioned {
            heuristic,
            migration,
            balancing,
        } => partitioned::Partitioned::new(scenario, heuristic, migration, balancing, opts)?.run(policy),
        Policy::Global(mode) => global::GlobalEngine::new(scenario, mode, opts)?.run(policy),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TaskStatus {
    /// Inserted later in the run.
    NotYetArrived,
    /// Waiting for a deferred placement.
    PendingAdmission,
    Admitted,
    Rejected,
    Departed,
}

/// Per-task runtime: job stream and the queue of released jobs (front is
/// the job being served).
pub(crate) struct TaskRt {
    pub spec: TaskSpec,
    pub stream: JobStream,
    pub jobs: VecDeque<Job>,
    pub next_index: u64,
    pub next_arrival: Tick,
    pub status: TaskStatus,
    pub departing: bool,
    pub window: MissWindow,
}

impl TaskRt {
    pub fn new(spec: TaskSpec, window: usize) -> TaskRt {
        TaskRt {
            stream: JobStream::new(spec.job_seed),
            next_arrival: spec.arrival_time,
            spec,
            jobs: VecDeque::new(),
            next_index: 0,
            status: TaskStatus::NotYetArrived,
            departing: false,
            window: MissWindow::new(window),
        }
    }

    /// Releases the job due at `next_arrival` and returns the tick of the
    /// following release, if it falls inside the run.
    pub fn release(&mut self, horizon: Tick) -> (Job, Option<Tick>) {
        let demand = self.stream.next_demand(&self.spec.exec_model);
        let job = Job::new(self.spec.id, self.next_index, self.next_arrival, demand);
        self.next_index += 1;
        let next = self.next_arrival + self.stream.next_gap(self.spec.period, self.spec.kind);
        self.next_arrival = next;
        let inside = next <= horizon && self.spec.departure_time.is_none_or(|d| next < d);
        (job, inside.then_some(next))
    }
}

pub(crate) fn tick(t: Tick) -> Rational {
    Rational::from(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names() {
        assert_eq!(
            Policy::parse("wf-a", true, true).unwrap(),
            Policy::partitioned(Heuristic::WorstFit, true, false)
        );
        assert_eq!(
            Policy::parse("g-par", false, false).unwrap(),
            Policy::Global(ReclaimMode::Parallel)
        );
        assert_eq!(
            "bf".parse::<Policy>().unwrap(),
            Policy::partitioned(Heuristic::BestFit, true, false)
        );
        assert!(Policy::parse("edf", true, false).is_err());
        assert_eq!(Policy::Global(ReclaimMode::Sequential).to_string(), "g-seq");
    }
}
