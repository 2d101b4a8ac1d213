#![allow(dead_code)]

pub mod fluid;

use grubsim::balance::Heuristic;
use grubsim::engine::{run_simulation, Policy, SimOptions, SimResult, TraceRecord};
use grubsim::model::{Bandwidth, ServerParams, TaskId, TaskKind, TaskSpec, Tick};
use grubsim::workload::{AdmissionRecord, ExecModel, Scenario, ScenarioConfig, SCENARIO_SCHEMA_VERSION};

/// Periodic task with constant demand; `T = P`.
pub fn task(id: u32, budget: Tick, period: Tick, demand: Tick, umig: Bandwidth) -> TaskSpec {
    TaskSpec {
        id: TaskId(id),
        period,
        kind: TaskKind::Periodic,
        exec_model: ExecModel::Constant { value: demand, budget },
        server: ServerParams::new(budget, period, umig),
        arrival_time: 0,
        departure_time: None,
        job_seed: id as u64,
    }
}

pub fn scenario(cores: usize, horizon: Tick, tasks: Vec<TaskSpec>) -> Scenario {
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        seed: 0,
        cores,
        horizon,
        admission: AdmissionRecord {
            partitioned_by: vec![],
            global_test: None,
            discarded_attempts: 0,
        },
        config: ScenarioConfig {
            n: tasks.len(),
            m: cores,
            ..ScenarioConfig::default()
        },
        tasks,
    }
}

pub fn traced(horizon: Tick) -> SimOptions {
    SimOptions {
        horizon,
        debug_asserts: true,
        record_trace: true,
        ..SimOptions::default()
    }
}

pub fn run_traced(s: &Scenario, policy: Policy) -> (SimResult, Vec<TraceRecord>) {
    let mut r = run_simulation(s, policy, &traced(s.horizon)).expect("simulation succeeds");
    let trace = r.trace.take().expect("trace recorded");
    (r, trace)
}

pub fn wf(migration: bool, balancing: bool) -> Policy {
    Policy::partitioned(Heuristic::WorstFit, migration, balancing)
}

pub fn ff(migration: bool, balancing: bool) -> Policy {
    Policy::partitioned(Heuristic::FirstFit, migration, balancing)
}
