mod common;

use common::*;
use grubsim::engine::{run_simulation, Policy, SimOptions, TraceRecord};
use grubsim::global::ReclaimMode;
use grubsim::model::{Bandwidth, CoreId, ServerId, TaskId};
use grubsim::rational::Rational;

fn r(n: i128, d: i128) -> Rational {
    Rational::new(n, d)
}

fn completions(trace: &[TraceRecord]) -> Vec<(Rational, TaskId, bool)> {
    trace
        .iter()
        .filter_map(|e| match e {
            TraceRecord::JobComplete { t, task, missed, .. } => Some((t.clone(), *task, *missed)),
            _ => None,
        })
        .collect()
}

#[test]
fn lone_task_runs_at_full_speed() {
    // Alone on a core U^a = U_i, so V advances at rate 1 and a job longer
    // than its budget still fits inside the period.
    let s = scenario(1, 100, vec![task(0, 2, 10, 7, Bandwidth::ratio(1, 10))]);
    let (res, trace) = run_traced(&s, wf(true, false));
    let done = completions(&trace);
    assert_eq!(done.len(), 10);
    for (k, (t, _, missed)) in done.iter().enumerate() {
        assert_eq!(*t, Rational::from(10 * k as u64 + 7));
        assert!(!missed);
    }
    assert_eq!(res.metrics.postponements, 0);
    assert_eq!(res.metrics.migrations(), 0);
}

#[test]
fn lone_task_postpones_after_a_full_period_of_service() {
    let s = scenario(1, 30, vec![task(0, 2, 10, 12, Bandwidth::ratio(1, 10))]);
    let (res, trace) = run_traced(&s, wf(true, false));
    let first_postpone = trace.iter().find_map(|e| match e {
        TraceRecord::Postpone { t, server, v, d } => Some((t.clone(), *server, v.clone(), d.clone())),
        _ => None,
    });
    assert_eq!(first_postpone, Some((r(10, 1), ServerId(0), r(10, 1), r(20, 1))));
    let done = completions(&trace);
    assert_eq!(done[0], (r(12, 1), TaskId(0), true));
    assert_eq!(res.metrics.server_deadline_misses, 0);
}

/// FF packs tasks 0 and 1 on core 0 (9/10) and task 2 on core 1.
fn overrun_pair(umig: Bandwidth) -> grubsim::workload::Scenario {
    scenario(
        2,
        200,
        vec![
            task(0, 10, 20, 30, umig.clone()),
            task(1, 8, 20, 8, umig.clone()),
            task(2, 5, 10, 1, umig),
        ],
    )
}

#[test]
fn overrun_triggers_temporary_migration() {
    let (res, trace) = run_traced(&overrun_pair(Bandwidth::ratio(1, 10)), ff(true, false));
    // V runs at (9/10)/(1/2) = 9/5 from 0, so it reaches d = 20 at t = 100/9.
    // Core 1 went inactive at t = 11, so the benefit is (20 - 100/9) > 2.
    let first = trace.iter().find_map(|e| match e {
        TraceRecord::Postpone { .. } | TraceRecord::TempMigration { .. } => Some(e.clone()),
        _ => None,
    });
    match first.expect("exhaustion happens") {
        TraceRecord::TempMigration {
            task,
            from,
            to,
            t,
            grant,
        } => {
            assert_eq!((task, from, to), (TaskId(0), CoreId(0), CoreId(1)));
            assert_eq!(t, r(100, 9));
            assert_eq!(grant, Bandwidth::ratio(1, 10));
        }
        other => panic!("expected a temporary migration first, got {other:?}"),
    }
    let outbound = trace
        .iter()
        .filter(|e| matches!(e, TraceRecord::TempMigration { .. }))
        .count();
    assert_eq!(res.metrics.temp_migrations, outbound as u64);
    assert_eq!(res.metrics.server_deadline_misses, 0);
}

#[test]
fn zero_migrating_utilization_degenerates_to_no_migration() {
    let s = overrun_pair(Bandwidth::ZERO);
    let (on, t_on) = run_traced(&s, ff(true, false));
    let (off, t_off) = run_traced(&s, ff(false, false));
    assert_eq!(on.metrics.temp_migrations, 0);
    assert_eq!(on.metrics, off.metrics);
    assert_eq!(t_on, t_off);
}

#[test]
fn migration_flag_off_only_postpones() {
    let (res, trace) = run_traced(&overrun_pair(Bandwidth::ratio(1, 10)), ff(false, false));
    assert_eq!(res.metrics.temp_migrations, 0);
    assert!(trace
        .iter()
        .any(|e| matches!(e, TraceRecord::Postpone { t, .. } if *t == r(100, 9))));
}

#[test]
fn insertion_admits_rejects_and_removes() {
    let mut base = task(0, 8, 10, 4, Bandwidth::ratio(1, 10));
    base.job_seed = 1;
    let mut fits = task(1, 1, 10, 1, Bandwidth::ratio(1, 10));
    fits.arrival_time = 100;
    fits.departure_time = Some(300);
    let mut too_big = task(2, 3, 10, 1, Bandwidth::ratio(1, 10));
    too_big.arrival_time = 150;
    let s = scenario(1, 500, vec![base, fits, too_big]);
    let (res, trace) = run_traced(&s, wf(true, true));
    assert!(trace.contains(&TraceRecord::TaskAdmitted {
        task: TaskId(1),
        core: CoreId(0),
        t: r(100, 1)
    }));
    assert!(trace.contains(&TraceRecord::TaskRejected {
        task: TaskId(2),
        t: r(150, 1)
    }));
    assert!(trace
        .iter()
        .any(|e| matches!(e, TraceRecord::TaskDeparted { task: TaskId(1), .. })));
    assert_eq!(res.metrics.rejections, 1);
    let arrivals = |id| {
        trace
            .iter()
            .filter(|e| matches!(e, TraceRecord::JobArrival { task, .. } if *task == TaskId(id)))
            .count()
    };
    assert_eq!(arrivals(1), 20);
    assert_eq!(arrivals(2), 0);
}

#[test]
fn counters_match_the_trace() {
    let spec = grubsim::workload::ScenarioConfig {
        n: 10,
        m: 2,
        target_util: Bandwidth::ratio(3, 2),
        seed: 4,
        horizon: 5_000,
        ..Default::default()
    };
    let s = grubsim::workload::generate_with_retries(&spec).unwrap();
    for policy in [
        wf(true, true),
        ff(true, false),
        Policy::Global(ReclaimMode::Parallel),
        Policy::Global(ReclaimMode::Sequential),
    ] {
        let (res, trace) = run_traced(&s, policy);
        let m = &res.metrics;
        let count = |f: fn(&TraceRecord) -> bool| trace.iter().filter(|e| f(e)).count() as u64;
        assert_eq!(m.jobs_total, count(|e| matches!(e, TraceRecord::JobComplete { .. })));
        assert_eq!(
            m.jobs_missed,
            count(|e| matches!(e, TraceRecord::JobComplete { missed: true, .. }))
        );
        assert_eq!(
            m.jobs_total + m.jobs_unfinished,
            count(|e| matches!(e, TraceRecord::JobArrival { .. }))
        );
        assert_eq!(
            m.temp_migrations,
            count(|e| matches!(e, TraceRecord::TempMigration { .. }))
        );
        assert_eq!(
            m.perm_migrations,
            count(|e| matches!(e, TraceRecord::PermMigration { .. }))
        );
        assert_eq!(
            m.gedf_migrations,
            count(|e| matches!(e, TraceRecord::GedfMigration { .. }))
        );
        assert_eq!(m.postponements, count(|e| matches!(e, TraceRecord::Postpone { .. })));
        assert_eq!(m.server_deadline_misses, 0, "{policy}");
    }
}

#[test]
fn runs_are_deterministic() {
    let spec = grubsim::workload::ScenarioConfig {
        n: 12,
        m: 4,
        target_util: Bandwidth::ratio(5, 2),
        seed: 9,
        horizon: 4_000,
        ..Default::default()
    };
    let s = grubsim::workload::generate_with_retries(&spec).unwrap();
    assert_eq!(s, grubsim::workload::generate_with_retries(&spec).unwrap());
    let opts = SimOptions {
        horizon: 4_000,
        record_trace: true,
        ..SimOptions::default()
    };
    for p in ["wf", "bf", "g-par"] {
        let policy = Policy::parse(p, true, true).unwrap();
        let a = run_simulation(&s, policy, &opts).unwrap();
        let b = run_simulation(&s, policy, &opts).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn single_core_global_matches_partitioned_grub() {
    let s = scenario(
        1,
        300,
        vec![
            task(0, 3, 10, 5, Bandwidth::ZERO),
            task(1, 4, 20, 2, Bandwidth::ZERO),
            task(2, 5, 25, 9, Bandwidth::ZERO),
        ],
    );
    let (p, tp) = run_traced(&s, wf(false, false));
    let (g, tg) = run_traced(&s, Policy::Global(ReclaimMode::Parallel));
    let (q, tq) = run_traced(&s, Policy::Global(ReclaimMode::Sequential));
    assert_eq!(completions(&tp), completions(&tg));
    assert_eq!(completions(&tp), completions(&tq));
    assert_eq!(p.metrics.jobs_missed, g.metrics.jobs_missed);
    assert_eq!(g.metrics.gedf_migrations + q.metrics.gedf_migrations, 0);
}
