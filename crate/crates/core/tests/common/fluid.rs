//! Independent fixed-step fluid simulation of single-core GRUB, compared
//! against the exact event-driven engine.

use std::collections::VecDeque;

use super::{run_traced, scenario, wf};
use grubsim::engine::TraceRecord;
use grubsim::model::{Bandwidth, ServerParams, TaskId, TaskKind, TaskSpec, Tick};
use grubsim::workload::{ExecModel, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1.0 / 1024.0;
const EPS: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq, Debug)]
enum St {
    Inactive,
    Contending,
    NonContending,
}

struct Srv {
    u: f64,
    period: f64,
    st: St,
    v: f64,
    d: f64,
    jobs: VecDeque<(u64, f64)>,
}

#[derive(Debug, Default)]
pub struct FluidRun {
    /// `(task, job, finish time, V at finish)`
    pub completions: Vec<(u32, u64, f64, f64)>,
    /// `(task, instant)`
    pub postponements: Vec<(u32, f64)>,
}

/// `arrivals` are `(time, task, job, demand)` in time order.
///
/// Time advances on a fixed grid of `STEP`; a completion, `V = d` crossing or
/// non-contending expiry inside a step is located by linear interpolation
/// (the dynamics are piecewise linear) and the rest of the step continues
/// from there.
pub fn fluid(servers: &[(Tick, Tick)], arrivals: &[(Tick, u32, u64, Tick)], horizon: Tick) -> FluidRun {
    let mut srv: Vec<Srv> = servers
        .iter()
        .map(|&(q, p)| Srv {
            u: q as f64 / p as f64,
            period: p as f64,
            st: St::Inactive,
            v: 0.0,
            d: 0.0,
            jobs: VecDeque::new(),
        })
        .collect();
    let mut ua = 0.0;
    let mut out = FluidRun::default();
    let mut next = 0;
    let steps = horizon * 1024;
    for k in 0..steps {
        let t = k as f64 * STEP;
        if k % 1024 == 0 {
            while next < arrivals.len() && arrivals[next].0 as f64 == t {
                let (_, task, job, c) = arrivals[next];
                let s = &mut srv[task as usize];
                s.jobs.push_back((job, c as f64));
                match s.st {
                    St::Inactive => {
                        s.v = t;
                        s.d = t + s.period;
                        s.st = St::Contending;
                        ua += s.u;
                    }
                    St::NonContending => s.st = St::Contending,
                    St::Contending => {}
                }
                next += 1;
            }
        }
        let end = t + STEP;
        let mut now = t;
        while now < end - EPS {
            let mut pick: Option<usize> = None;
            for (i, s) in srv.iter().enumerate() {
                if s.st == St::Contending && !s.jobs.is_empty() && pick.is_none_or(|j| s.d < srv[j].d - EPS) {
                    pick = Some(i);
                }
            }
            let mut dt = end - now;
            for s in &srv {
                if s.st == St::NonContending {
                    dt = dt.min(s.v - now);
                }
            }
            if let Some(i) = pick {
                let s = &srv[i];
                dt = dt.min(s.jobs[0].1).min((s.d - s.v) * s.u / ua);
                let s = &mut srv[i];
                s.v += ua / s.u * dt;
                s.jobs[0].1 -= dt;
            }
            now += dt.max(0.0);
            if let Some(i) = pick {
                let s = &mut srv[i];
                if s.jobs[0].1 <= EPS {
                    let (job, _) = s.jobs.pop_front().unwrap();
                    out.completions.push((i as u32, job, now, s.v));
                    if s.jobs.is_empty() {
                        if s.v > now + EPS {
                            s.st = St::NonContending;
                        } else {
                            s.st = St::Inactive;
                            ua -= s.u;
                        }
                    }
                }
                if s.st == St::Contending && s.v >= s.d - EPS {
                    s.d = s.v + s.period;
                    out.postponements.push((i as u32, now));
                }
            }
            for s in srv.iter_mut() {
                if s.st == St::NonContending && s.v <= now + EPS {
                    s.st = St::Inactive;
                    ua -= s.u;
                }
            }
        }
    }
    out
}

fn random_instance(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4u32);
    // Split a total reservation in (0, 1] roughly evenly, then round budgets down.
    let total: f64 = rng.gen_range(0.3..=1.0);
    let tasks = (0..n)
        .map(|i| {
            let period: Tick = rng.gen_range(2..=50);
            let share = total / n as f64 * rng.gen_range(0.5..=1.0);
            let budget = ((period as f64 * share).floor() as Tick).max(1);
            let model = ExecModel::TwoLevelUniform {
                minexec: 1,
                maxexec: (2 * budget).max(budget + 1),
                budget,
                pm: 0.7,
            };
            TaskSpec {
                id: TaskId(i),
                period,
                kind: TaskKind::Periodic,
                exec_model: model,
                server: ServerParams::new(budget, period, Bandwidth::ZERO),
                arrival_time: 0,
                departure_time: None,
                job_seed: seed * 16 + i as u64,
            }
        })
        .collect();
    scenario(1, 2_000, tasks)
}

fn fits(s: &Scenario) -> bool {
    let sum: f64 = s.tasks.iter().map(|t| t.server.utilization.to_f64()).sum();
    sum <= 1.0
}

pub struct Report {
    pub failures: Vec<String>,
    pub max_time_err: f64,
}

pub fn compare_instances(count: u64) -> Report {
    let mut failures = Vec::new();
    let mut max_time_err: f64 = 0.0;
    let mut seed = 0;
    let mut done = 0;
    while done < count {
        seed += 1;
        let s = random_instance(seed);
        if !fits(&s) {
            continue;
        }
        done += 1;
        let (_, trace) = run_traced(&s, wf(false, false));
        let mut arrivals = Vec::new();
        let mut exact_done = Vec::new();
        let mut exact_post = Vec::new();
        for e in &trace {
            match e {
                TraceRecord::JobArrival { t, task, job, demand } => {
                    arrivals.push((t.to_f64() as Tick, task.0, *job, *demand))
                }
                TraceRecord::JobComplete { t, task, job, v, .. } => {
                    exact_done.push((task.0, *job, t.to_f64(), v.to_f64()))
                }
                TraceRecord::Postpone { t, server, .. } => exact_post.push((server.0, t.to_f64())),
                _ => {}
            }
        }
        let servers: Vec<(Tick, Tick)> = s.tasks.iter().map(|t| (t.server.budget, t.server.period)).collect();
        let oracle = fluid(&servers, &arrivals, s.horizon);
        let mut bad = |what: String| failures.push(format!("instance seed {seed}: {what}"));
        // Fluid completions land on the step grid, so a job finishing exactly at
        // the horizon may be missing from one side only.
        let key = |c: &(u32, u64, f64, f64)| (c.0, c.1);
        let mut ex = exact_done.clone();
        let mut fl = oracle.completions.clone();
        ex.sort_by_key(key);
        fl.sort_by_key(key);
        let common = ex.len().min(fl.len());
        if ex.len().abs_diff(fl.len()) > 1 {
            bad(format!("{} exact vs {} fluid completions", ex.len(), fl.len()));
            continue;
        }
        for (a, b) in ex.iter().zip(&fl).take(common) {
            if key(a) != key(b) {
                bad(format!("job order differs: {:?} vs {:?}", key(a), key(b)));
                break;
            }
            let rate = 1.0 / s.tasks[a.0 as usize].server.utilization.to_f64();
            let dt = (a.2 - b.2).abs();
            max_time_err = max_time_err.max(dt);
            if dt > STEP + EPS || (a.3 - b.3).abs() > rate * STEP + EPS {
                bad(format!(
                    "task {} job {}: exact (t={}, V={}) fluid (t={}, V={})",
                    a.0, a.1, a.2, a.3, b.2, b.3
                ));
                break;
            }
        }
        let mut ep = exact_post.clone();
        let mut fp = oracle.postponements.clone();
        ep.retain(|p| p.1 < s.horizon as f64 - 1.0);
        fp.retain(|p| p.1 < s.horizon as f64 - 1.0);
        if ep.len() != fp.len() {
            bad(format!("{} exact vs {} fluid postponements", ep.len(), fp.len()));
            continue;
        }
        for (a, b) in ep.iter().zip(&fp) {
            if a.0 != b.0 || (a.1 - b.1).abs() > STEP + EPS {
                bad(format!("postponement {a:?} vs {b:?}"));
                break;
            }
        }
    }
    Report { failures, max_time_err }
}
