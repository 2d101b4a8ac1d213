//! Global EDF with GRUB reclaiming (parallel or sequential accounting).
//! Budget exhaustion only postpones the deadline; migrations are counted
//! whenever a server resumes on a different core than it last ran on.

use super::events::{Class, EventQueue};
use super::metrics::{Ema, Metrics, TimeSeries};
use super::trace::{Recorder, TraceRecord};
use super::{tick, Policy, SimOptions, SimResult, TaskRt, TaskStatus};
use crate::balance::MissWindow;
use crate::error::SimError;
use crate::global::{global_dispatch, reclaim_rate, GlobalLedger, ReclaimMode};
use crate::grub::{self, ArrivalOutcome, CompletionOutcome, GrubError, ReadyQueue, TimerOutcome};
use crate::model::{Bandwidth, CoreId, CoreLedger, ServerId, ServerRuntime, ServerState, TaskId, Tick};
use crate::rational::Rational;
use crate::workload::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    VtReached(ServerId),
    TaskRemove(TaskId),
    TaskInsert(TaskId),
    Arrival(TaskId),
    Sample,
}

pub(crate) struct GlobalEngine {
    horizon: Tick,
    debug: bool,
    now: Rational,
    tasks: Vec<TaskRt>,
    servers: Vec<ServerRuntime>,
    ledger: GlobalLedger,
    queue: ReadyQueue,
    running: Vec<Option<ServerId>>,
    /// Core each server last executed on.
    last_core: Vec<Option<CoreId>>,
    /// Core holding each active server's booking (sequential mode).
    booked_on: Vec<Option<CoreId>>,
    miss_mark: Vec<Option<Rational>>,
    events: EventQueue<Ev>,
    metrics: Metrics,
    rec: Recorder,
    series: Option<TimeSeries>,
    recent: Vec<MissWindow>,
    ema: Vec<Ema>,
    sample_stride: Option<Tick>,
    sample_due: bool,
}

impl GlobalEngine {
    pub fn new(scenario: &Scenario, mode: ReclaimMode, opts: &SimOptions) -> Result<GlobalEngine, SimError> {
        let m = scenario.cores;
        let mut e = GlobalEngine {
            horizon: opts.horizon,
            debug: opts.debug_asserts,
            now: Rational::ZERO,
            tasks: scenario
                .tasks
                .iter()
                .map(|t| TaskRt::new(t.clone(), opts.balancer.window_size))
                .collect(),
            servers: scenario
                .tasks
                .iter()
                .map(|t| ServerRuntime::new(ServerId(t.id.0), t.id, t.server.clone(), CoreId(0)))
                .collect(),
            ledger: GlobalLedger::new(mode, m),
            queue: ReadyQueue::new(),
            running: vec![None; m],
            last_core: vec![None; scenario.tasks.len()],
            booked_on: vec![None; scenario.tasks.len()],
            miss_mark: vec![None; scenario.tasks.len()],
            events: EventQueue::new(),
            metrics: Metrics::default(),
            rec: Recorder::new(opts.record_trace, opts.debug_asserts),
            series: opts.sample_stride.map(|_| TimeSeries::new(m)),
            recent: (0..m).map(|_| MissWindow::new(opts.series_window.max(1))).collect(),
            ema: vec![Ema::new(opts.ema_alpha); m],
            sample_stride: opts.sample_stride,
            sample_due: false,
        };
        for (i, t) in scenario.tasks.iter().enumerate() {
            let id = i as u64;
            if t.arrival_time == 0 {
                e.tasks[i].status = TaskStatus::Admitted;
                e.events.push(tick(0), Class::JobArrival, id, Ev::Arrival(t.id));
            } else if t.arrival_time <= e.horizon {
                e.events
                    .push(tick(t.arrival_time), Class::TaskInsert, id, Ev::TaskInsert(t.id));
            }
            if let Some(d) = t.departure_time.filter(|&d| d <= e.horizon) {
                e.events.push(tick(d), Class::TaskRemove, id, Ev::TaskRemove(t.id));
            }
        }
        if e.sample_stride.is_some() {
            e.events.push(tick(0), Class::MetricsSample, 0, Ev::Sample);
        }
        Ok(e)
    }

    pub fn run(mut self, policy: Policy) -> Result<SimResult, SimError> {
        let horizon = tick(self.horizon);
        while let Some(t) = self.next_instant() {
            if t > horizon {
                break;
            }
            self.advance_to(&t);
            self.process_completions()?;
            while let Some(ev) = self.events.pop_at(&t) {
                self.handle(ev)?;
            }
            self.check_server_deadlines();
            self.handle_exhaustions()?;
            self.dispatch()?;
            if self.sample_due {
                self.sample();
            }
            self.check_invariants()?;
        }
        self.metrics.jobs_unfinished = self.tasks.iter().map(|t| t.jobs.len() as u64).sum();
        Ok(SimResult {
            policy,
            metrics: self.metrics,
            trace: self.rec.into_full(),
            series: self.series,
        })
    }

    fn fail(&self, message: String) -> SimError {
        SimError::Invariant {
            time: self.now.to_string(),
            message,
            tail: self.rec.tail_lines(),
        }
    }

    fn gerr(&self, e: GrubError) -> SimError {
        match e {
            GrubError::Ledger(l) => SimError::Ledger(l),
            other => self.fail(other.to_string()),
        }
    }

    fn rate(&self, s: ServerId, core: usize) -> Rational {
        reclaim_rate(self.servers[s.0 as usize].utilization(), &self.ledger, CoreId(core))
    }

    fn remaining(&self, s: ServerId) -> &Rational {
        &self.tasks[s.0 as usize]
            .jobs
            .front()
            .expect("running server has a job")
            .remaining
    }

    fn next_instant(&self) -> Option<Rational> {
        let mut best: Option<Rational> = self.events.peek_time().cloned();
        let mut offer = |c: Rational| {
            if best.as_ref().is_none_or(|b| c < *b) {
                best = Some(c);
            }
        };
        for (j, r) in self.running.iter().enumerate() {
            if let Some(s) = *r {
                offer(&self.now + self.remaining(s));
                let srv = &self.servers[s.0 as usize];
                if !grub::is_exhausted(srv) {
                    offer(&self.now + &grub::exhaustion_horizon_at_rate(srv, &self.rate(s, j)));
                }
            }
        }
        if let Some((d, _)) = self.queue.iter().find(|&(d, _)| *d > self.now) {
            offer(d.clone());
        }
        best
    }

    fn advance_to(&mut self, t: &Rational) {
        let dt = t - &self.now;
        if dt.is_positive() {
            for j in 0..self.running.len() {
                let Some(s) = self.running[j] else { continue };
                let rate = self.rate(s, j);
                grub::advance_at_rate(&mut self.servers[s.0 as usize], &dt, &rate);
                self.tasks[s.0 as usize].jobs.front_mut().expect("job").consume(&dt);
            }
        }
        self.now = t.clone();
    }

    /// Applies a GRUB transition through a one-server scratch ledger and
    /// reports whether the server left the active set.
    fn deactivate_if_needed(&mut self, s: ServerId, was_active: bool) {
        let srv = &self.servers[s.0 as usize];
        if was_active && !srv.state.is_active() {
            let u = srv.utilization().clone();
            self.ledger.total_active = self.ledger.total_active.saturating_sub(&u);
            if let Some(c) = self.booked_on[s.0 as usize].take() {
                self.ledger.booked[c.0] = self.ledger.booked[c.0].saturating_sub(&u);
            }
        }
    }

    fn scratch(&self, s: ServerId) -> CoreLedger {
        let mut l = CoreLedger::new(CoreId(0));
        if self.servers[s.0 as usize].state.is_active() {
            l.active_util = self.servers[s.0 as usize].utilization().clone();
        }
        l
    }

    fn process_completions(&mut self) -> Result<(), SimError> {
        for j in 0..self.running.len() {
            let Some(s) = self.running[j] else { continue };
            if !self.remaining(s).is_zero() {
                continue;
            }
            let ti = s.0 as usize;
            let period = self.tasks[ti].spec.period;
            let mut job = self.tasks[ti].jobs.pop_front().expect("job");
            job.finish_at(self.now.clone(), period);
            self.metrics.jobs_total += 1;
            if job.missed {
                self.metrics.jobs_missed += 1;
            }
            self.recent[j].record(job.missed);
            let now = self.now.clone();
            let v = self.servers[ti].virtual_time.clone();
            self.rec.emit(|| TraceRecord::JobComplete {
                t: now.clone(),
                task: TaskId(ti as u32),
                job: job.index,
                server: s,
                v,
                missed: job.missed,
            });
            let pending = !self.tasks[ti].jobs.is_empty();
            let d = self.servers[ti].sched_deadline.clone();
            let mut scratch = self.scratch(s);
            let out = grub::on_job_completion(&mut self.servers[ti], &now, pending, &mut scratch)
                .map_err(|e| self.gerr(e))?;
            if out != CompletionOutcome::NextJob {
                self.queue.remove(&d, s);
                self.running[j] = None;
            }
            match out {
                CompletionOutcome::NextJob => {}
                CompletionOutcome::NonContending => {
                    let v = self.servers[ti].virtual_time.clone();
                    self.events
                        .push(v, Class::VirtualTimeReached, ti as u64, Ev::VtReached(s));
                }
                CompletionOutcome::Inactive => {
                    self.deactivate_if_needed(s, true);
                    self.on_inactive(ti);
                }
            }
        }
        Ok(())
    }

    fn on_inactive(&mut self, ti: usize) {
        let t = &mut self.tasks[ti];
        if t.departing && t.status == TaskStatus::Admitted && t.jobs.is_empty() {
            t.status = TaskStatus::Departed;
            let now = self.now.clone();
            self.rec.emit(|| TraceRecord::TaskDeparted {
                task: TaskId(ti as u32),
                t: now,
            });
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::VtReached(s) => {
                let mut scratch = self.scratch(s);
                let out = grub::on_virtual_time_reached(&mut self.servers[s.0 as usize], &self.now, &mut scratch)
                    .map_err(|e| self.gerr(e))?;
                if out == TimerOutcome::Deactivated {
                    self.deactivate_if_needed(s, true);
                    self.on_inactive(s.0 as usize);
                }
            }
            Ev::TaskRemove(task) => {
                let ti = task.0 as usize;
                self.tasks[ti].departing = true;
                if self.servers[ti].state == ServerState::Inactive {
                    self.on_inactive(ti);
                }
            }
            Ev::TaskInsert(task) => {
                let ti = task.0 as usize;
                self.tasks[ti].status = TaskStatus::Admitted;
                self.events
                    .push(self.now.clone(), Class::JobArrival, ti as u64, Ev::Arrival(task));
            }
            Ev::Arrival(task) => self.on_arrival(task.0 as usize),
            Ev::Sample => self.sample_due = true,
        }
        Ok(())
    }

    fn on_arrival(&mut self, ti: usize) {
        let t = &mut self.tasks[ti];
        if t.status != TaskStatus::Admitted || t.departing {
            return;
        }
        let (job, next) = t.release(self.horizon);
        let was_idle = t.jobs.is_empty();
        let (idx, arrival, demand) = (job.index, job.arrival, job.exec_demand);
        t.jobs.push_back(job);
        if let Some(next) = next {
            self.events
                .push(tick(next), Class::JobArrival, ti as u64, Ev::Arrival(TaskId(ti as u32)));
        }
        self.rec.emit(|| TraceRecord::JobArrival {
            t: tick(arrival),
            task: TaskId(ti as u32),
            job: idx,
            demand,
        });
        if !was_idle {
            return;
        }
        let s = ServerId(ti as u32);
        let mut scratch = self.scratch(s);
        match grub::on_job_arrival(&mut self.servers[ti], &self.now, &mut scratch) {
            ArrivalOutcome::Activated => {
                let u = self.servers[ti].utilization().clone();
                self.ledger.total_active = &self.ledger.total_active + &u;
                let c = self.last_core[ti].unwrap_or_else(|| self.ledger.least_booked_core());
                self.ledger.booked[c.0] = &self.ledger.booked[c.0] + &u;
                self.booked_on[ti] = Some(c);
                self.queue.insert(self.servers[ti].sched_deadline.clone(), s);
            }
            ArrivalOutcome::Resumed => {
                self.queue.insert(self.servers[ti].sched_deadline.clone(), s);
            }
            ArrivalOutcome::Queued => {}
        }
    }

    fn check_server_deadlines(&mut self) {
        let mut missed = Vec::new();
        for (d, s) in self.queue.iter() {
            if *d > self.now {
                break;
            }
            if *d == self.now
                && self.servers[s.0 as usize].virtual_time < *d
                && self.miss_mark[s.0 as usize].as_ref() != Some(d)
            {
                missed.push(s);
            }
        }
        for s in missed {
            self.miss_mark[s.0 as usize] = Some(self.now.clone());
            self.metrics.server_deadline_misses += 1;
            let now = self.now.clone();
            self.rec.emit(|| TraceRecord::ServerDeadlineMiss { server: s, t: now });
        }
    }

    fn handle_exhaustions(&mut self) -> Result<(), SimError> {
        let exhausted: Vec<ServerId> = self
            .queue
            .iter()
            .map(|(_, s)| s)
            .filter(|s| grub::is_exhausted(&self.servers[s.0 as usize]))
            .collect();
        for s in exhausted {
            let srv = &mut self.servers[s.0 as usize];
            let old = srv.sched_deadline.clone();
            srv.migrated_flag = false;
            grub::postpone_deadline(srv).map_err(|e| self.gerr(e))?;
            let srv = &self.servers[s.0 as usize];
            let (v, d) = (srv.virtual_time.clone(), srv.sched_deadline.clone());
            self.queue.rekey(&old, d.clone(), s);
            self.metrics.postponements += 1;
            let now = self.now.clone();
            self.rec.emit(|| TraceRecord::Postpone {
                t: now,
                server: s,
                v,
                d,
            });
        }
        Ok(())
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        let ready: Vec<ServerId> = self.queue.iter().map(|(_, s)| s).collect();
        let next = global_dispatch(&ready, &self.running);
        for (j, slot) in next.iter().enumerate() {
            if self.running[j] == *slot {
                continue;
            }
            if let Some(old) = self.running[j] {
                let srv = &mut self.servers[old.0 as usize];
                if srv.state == ServerState::Executing {
                    srv.state = ServerState::Ready;
                }
            }
            if let Some(s) = *slot {
                let si = s.0 as usize;
                self.servers[si].state = ServerState::Executing;
                let core = CoreId(j);
                if let Some(prev) = self.last_core[si] {
                    if prev != core {
                        self.metrics.gedf_migrations += 1;
                        let now = self.now.clone();
                        self.rec.emit(|| TraceRecord::GedfMigration {
                            server: s,
                            from: prev,
                            to: core,
                            t: now,
                        });
                    }
                }
                self.last_core[si] = Some(core);
                if let Some(b) = self.booked_on[si] {
                    if b != core {
                        let u = self.servers[si].utilization().clone();
                        self.ledger.booked[b.0] = self.ledger.booked[b.0].checked_sub(&u)?;
                        self.ledger.booked[j] = &self.ledger.booked[j] + &u;
                        self.booked_on[si] = Some(core);
                    }
                }
            }
        }
        // a server displaced from one core may have been placed on another
        for (j, slot) in next.iter().enumerate() {
            if let Some(s) = slot {
                self.servers[s.0 as usize].state = ServerState::Executing;
            }
            self.running[j] = *slot;
        }
        Ok(())
    }

    fn sample(&mut self) {
        self.sample_due = false;
        let Some(series) = &mut self.series else { return };
        let t = self.now.to_u64().expect("samples fall on integer ticks");
        series.t.push(t);
        for j in 0..self.running.len() {
            let x = self.ledger.booked[j].to_f64();
            series.active[j].push(x);
            series.ema[j].push(self.ema[j].update(x));
            series.miss_ratio[j].push(self.recent[j].miss_ratio());
        }
        let next = t + self.sample_stride.expect("sampling enabled");
        if next <= self.horizon {
            self.events.push(tick(next), Class::MetricsSample, 0, Ev::Sample);
        }
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        if !self.debug {
            return Ok(());
        }
        let active: Bandwidth = self
            .servers
            .iter()
            .filter(|s| s.state.is_active())
            .map(|s| s.utilization())
            .sum();
        if active != self.ledger.total_active {
            return Err(self.fail(format!(
                "global active ledger {} but servers sum to {active}",
                self.ledger.total_active
            )));
        }
        let booked: Bandwidth = self.ledger.booked.iter().sum();
        if booked != active {
            return Err(self.fail(format!("bookings sum to {booked}, active is {active}")));
        }
        let m = Rational::from(self.running.len() as u64);
        if &self.ledger.spare() + active.value() != m && active.value() <= &m {
            return Err(self.fail("spare + active != m".into()));
        }
        let ready: Vec<ServerId> = self.queue.iter().map(|(_, s)| s).collect();
        let expected = &ready[..ready.len().min(self.running.len())];
        let mut running: Vec<ServerId> = self.running.iter().flatten().copied().collect();
        let mut want = expected.to_vec();
        running.sort();
        want.sort();
        if running != want {
            return Err(self.fail("running set differs from the earliest-deadline servers".into()));
        }
        Ok(())
    }
}
