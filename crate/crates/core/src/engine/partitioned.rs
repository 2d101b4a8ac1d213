//! Partitioned GRUB: one EDF ready queue and one ledger per core, with
//! optional temporary migration and miss-driven permanent migration.

use std::collections::VecDeque;

use super::events::{Class, EventQueue};
use super::metrics::{Ema, Metrics, TimeSeries};
use super::trace::{Recorder, TraceRecord};
use super::{tick, Policy, SimOptions, SimResult, TaskRt, TaskStatus};
use crate::balance::{
    allocate_new_task, partition, pending_can_complete, try_permanent_migration, BalancerConfig, Heuristic, MissWindow,
    PlacementDecision, PlacementKind,
};
use crate::error::SimError;
use crate::grub::{self, ArrivalOutcome, CompletionOutcome, GrubError, ReadyQueue, TimerOutcome};
use crate::migration::{self, MigrationConfig, MigrationDecision};
use crate::model::{Bandwidth, CoreId, CoreLedger, ServerId, ServerRuntime, ServerState, TaskId, Tick};
use crate::rational::Rational;
use crate::workload::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    VtReached(ServerId),
    ResidueDrain(usize),
    TaskRemove(TaskId),
    LbTimeout(u64, CoreId),
    TaskInsert(TaskId),
    Arrival(TaskId),
    Sample,
}

struct Core {
    queue: ReadyQueue,
    running: Option<ServerId>,
    /// Outcomes of the latest jobs of tasks homed here (series only).
    recent: MissWindow,
    ema: Ema,
}

struct Pending {
    id: u64,
    task: TaskId,
    kind: PlacementKind,
}

/// Bandwidth a permanently migrated server leaves on its old core until its
/// virtual time catches up with the clock.
struct Residue {
    core: CoreId,
    util: Bandwidth,
    live: bool,
}

pub(crate) struct Partitioned {
    heuristic: Heuristic,
    mig: MigrationConfig,
    bal: BalancerConfig,
    timeout: Tick,
    horizon: Tick,
    debug: bool,
    now: Rational,
    tasks: Vec<TaskRt>,
    /// Indexed by server id; home server ids equal task ids.
    servers: Vec<ServerRuntime>,
    /// Temporary server currently carrying the front job of each task.
    serving_temp: Vec<Option<ServerId>>,
    /// Scheduling deadline for which a miss was already recorded.
    miss_mark: Vec<Option<Rational>>,
    lb_pending: Vec<bool>,
    ledgers: Vec<CoreLedger>,
    cores: Vec<Core>,
    pending: Vec<VecDeque<Pending>>,
    next_pending_id: u64,
    residues: Vec<Residue>,
    events: EventQueue<Ev>,
    metrics: Metrics,
    rec: Recorder,
    series: Option<TimeSeries>,
    sample_stride: Option<Tick>,
    sample_due: bool,
}

fn grub_err(e: GrubError, now: &Rational, tail: Vec<String>) -> SimError {
    match e {
        GrubError::Ledger(l) => SimError::Ledger(l),
        other => SimError::Invariant {
            time: now.to_string(),
            message: other.to_string(),
            tail,
        },
    }
}

impl Partitioned {
    pub fn new(
        scenario: &Scenario,
        heuristic: Heuristic,
        migration: bool,
        balancing: bool,
        opts: &SimOptions,
    ) -> Result<Partitioned, SimError> {
        let m = scenario.cores;
        let mut mig = opts.migration.clone();
        mig.enabled = migration;
        let mut bal = opts.balancer.clone();
        bal.enabled = balancing;
        let timeout = bal.deferred_timeout.unwrap_or(2 * scenario.max_period());

        let mut tasks: Vec<TaskRt> = scenario
            .tasks
            .iter()
            .map(|t| TaskRt::new(t.clone(), bal.window_size))
            .collect();
        let servers: Vec<ServerRuntime> = scenario
            .tasks
            .iter()
            .map(|t| ServerRuntime::new(ServerId(t.id.0), t.id, t.server.clone(), CoreId(0)))
            .collect();
        let n = tasks.len();
        let mut e = Partitioned {
            heuristic,
            mig,
            bal,
            timeout,
            horizon: opts.horizon,
            debug: opts.debug_asserts,
            now: Rational::ZERO,
            servers,
            serving_temp: vec![None; n],
            miss_mark: vec![None; n],
            lb_pending: vec![false; n],
            ledgers: (0..m).map(|j| CoreLedger::new(CoreId(j))).collect(),
            cores: (0..m)
                .map(|_| Core {
                    queue: ReadyQueue::new(),
                    running: None,
                    recent: MissWindow::new(opts.series_window.max(1)),
                    ema: Ema::new(opts.ema_alpha),
                })
                .collect(),
            pending: (0..m).map(|_| VecDeque::new()).collect(),
            next_pending_id: 0,
            residues: Vec::new(),
            events: EventQueue::new(),
            metrics: Metrics::default(),
            rec: Recorder::new(opts.record_trace, opts.debug_asserts),
            series: opts.sample_stride.map(|_| TimeSeries::new(m)),
            sample_stride: opts.sample_stride,
            sample_due: false,
            tasks: Vec::new(),
        };

        // static allocation of the tasks present at time zero
        let base: Vec<usize> = (0..n).filter(|&i| tasks[i].spec.arrival_time == 0).collect();
        let utils: Vec<Bandwidth> = base.iter().map(|&i| tasks[i].spec.server.utilization.clone()).collect();
        let placement = partition(&utils, m, heuristic)
            .ok_or_else(|| SimError::Config(format!("{heuristic} cannot partition the initial task set")))?;
        for ((&i, u), core) in base.iter().zip(&utils).zip(placement) {
            e.ledgers[core.0].add_allocated(u);
            e.servers[i].bound_core = core;
            tasks[i].status = TaskStatus::Admitted;
            e.events
                .push(tick(0), Class::JobArrival, i as u64, Ev::Arrival(TaskId(i as u32)));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.spec.arrival_time > 0 && t.spec.arrival_time <= e.horizon {
                e.events.push(
                    tick(t.spec.arrival_time),
                    Class::TaskInsert,
                    i as u64,
                    Ev::TaskInsert(t.spec.id),
                );
            }
            if let Some(d) = t.spec.departure_time.filter(|&d| d <= e.horizon) {
                e.events
                    .push(tick(d), Class::TaskRemove, i as u64, Ev::TaskRemove(t.spec.id));
            }
        }
        if e.sample_stride.is_some() {
            e.events.push(tick(0), Class::MetricsSample, 0, Ev::Sample);
        }
        e.tasks = tasks;
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
            self.progress_pending()?;
            self.dispatch();
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
        grub_err(e, &self.now, self.rec.tail_lines())
    }

    fn front_remaining(&self, s: ServerId) -> &Rational {
        let task = self.servers[s.0 as usize].task;
        &self.tasks[task.0 as usize]
            .jobs
            .front()
            .expect("running server has a job")
            .remaining
    }

    /// Earliest of: queued events, job completions, budget exhaustions and
    /// scheduling deadlines of contending servers.
    fn next_instant(&self) -> Option<Rational> {
        let mut best: Option<Rational> = self.events.peek_time().cloned();
        let mut offer = |c: Rational| {
            if best.as_ref().is_none_or(|b| c < *b) {
                best = Some(c);
            }
        };
        for (j, core) in self.cores.iter().enumerate() {
            if let Some(s) = core.running {
                offer(&self.now + self.front_remaining(s));
                let srv = &self.servers[s.0 as usize];
                if !grub::is_exhausted(srv) {
                    offer(&self.now + &grub::exhaustion_horizon(srv, &self.ledgers[j].active_util));
                }
            }
            if let Some((d, _)) = core.queue.iter().find(|(d, _)| **d > self.now) {
                offer(d.clone());
            }
        }
        best
    }

    fn advance_to(&mut self, t: &Rational) {
        let dt = t - &self.now;
        if dt.is_positive() {
            for j in 0..self.cores.len() {
                let Some(s) = self.cores[j].running else { continue };
                let srv = &mut self.servers[s.0 as usize];
                grub::advance_executing(srv, &dt, &self.ledgers[j].active_util);
                self.tasks[srv.task.0 as usize]
                    .jobs
                    .front_mut()
                    .expect("running server has a job")
                    .consume(&dt);
            }
        }
        self.now = t.clone();
    }

    fn process_completions(&mut self) -> Result<(), SimError> {
        for j in 0..self.cores.len() {
            if let Some(s) = self.cores[j].running {
                if self.front_remaining(s).is_zero() {
                    self.complete_job(s)?;
                }
            }
        }
        Ok(())
    }

    fn remove_from_queue(&mut self, s: ServerId) {
        let srv = &self.servers[s.0 as usize];
        let core = &mut self.cores[srv.bound_core.0];
        let removed = core.queue.remove(&srv.sched_deadline, s);
        debug_assert!(removed, "server {s} missing from its queue");
        if core.running == Some(s) {
            core.running = None;
        }
    }

    fn arm_timer(&mut self, s: ServerId) {
        let v = self.servers[s.0 as usize].virtual_time.clone();
        self.events
            .push(v, Class::VirtualTimeReached, s.0 as u64, Ev::VtReached(s));
    }

    fn complete_job(&mut self, s: ServerId) -> Result<(), SimError> {
        let ti = self.servers[s.0 as usize].task.0 as usize;
        let period = self.tasks[ti].spec.period;
        let mut job = self.tasks[ti].jobs.pop_front().expect("completing job");
        job.finish_at(self.now.clone(), period);
        self.metrics.jobs_total += 1;
        if job.missed {
            self.metrics.jobs_missed += 1;
        }
        self.tasks[ti].window.record(job.missed);
        let home = self.servers[ti].bound_core;
        self.cores[home.0].recent.record(job.missed);
        let now = self.now.clone();
        let v = self.servers[s.0 as usize].virtual_time.clone();
        self.rec.emit(|| TraceRecord::JobComplete {
            t: now.clone(),
            task: TaskId(ti as u32),
            job: job.index,
            server: s,
            v,
            missed: job.missed,
        });

        let srv = &mut self.servers[s.0 as usize];
        if srv.is_temporary {
            let d = srv.sched_deadline.clone();
            let core = srv.bound_core;
            let out = grub::on_job_completion(srv, &now, false, &mut self.ledgers[core.0]).map_err(|e| self.gerr(e))?;
            self.cores[core.0].queue.remove(&d, s);
            if self.cores[core.0].running == Some(s) {
                self.cores[core.0].running = None;
            }
            if out == CompletionOutcome::NonContending {
                self.arm_timer(s);
            }
            self.serving_temp[ti] = None;
            self.rec.emit(|| TraceRecord::TempReturn {
                task: TaskId(ti as u32),
                t: now.clone(),
            });
            if !self.tasks[ti].jobs.is_empty() {
                self.wake_home(ti)?;
            }
        } else {
            let pending = !self.tasks[ti].jobs.is_empty();
            let core = srv.bound_core;
            // queue key is untouched by completion
            let out =
                grub::on_job_completion(srv, &now, pending, &mut self.ledgers[core.0]).map_err(|e| self.gerr(e))?;
            match out {
                CompletionOutcome::NextJob => {}
                CompletionOutcome::NonContending => {
                    self.remove_from_queue(s);
                    self.arm_timer(s);
                }
                CompletionOutcome::Inactive => {
                    self.remove_from_queue(s);
                    self.on_home_inactive(ti)?;
                }
            }
        }

        if self.bal.enabled
            && self.tasks[ti].status == TaskStatus::Admitted
            && !self.tasks[ti].departing
            && !self.lb_pending[ti]
            && self.tasks[ti].window.triggers(&self.bal.miss_threshold)
        {
            self.request_permanent_migration(ti)?;
        }
        Ok(())
    }

    /// Hands the front job of task `ti` to its home server.
    fn wake_home(&mut self, ti: usize) -> Result<(), SimError> {
        let srv = &mut self.servers[ti];
        let core = srv.bound_core;
        match grub::on_job_arrival(srv, &self.now, &mut self.ledgers[core.0]) {
            ArrivalOutcome::Activated | ArrivalOutcome::Resumed => {
                let d = srv.sched_deadline.clone();
                self.cores[core.0].queue.insert(d, ServerId(ti as u32));
            }
            ArrivalOutcome::Queued => {}
        }
        Ok(())
    }

    /// The home server just became Inactive: complete a pending departure.
    fn on_home_inactive(&mut self, ti: usize) -> Result<(), SimError> {
        let t = &self.tasks[ti];
        if t.departing && t.status == TaskStatus::Admitted && t.jobs.is_empty() && self.serving_temp[ti].is_none() {
            let core = self.servers[ti].bound_core;
            let u = self.servers[ti].params.utilization.clone();
            self.ledgers[core.0].sub_allocated(&u)?;
            self.tasks[ti].status = TaskStatus::Departed;
            let now = self.now.clone();
            self.rec.emit(|| TraceRecord::TaskDeparted {
                task: TaskId(ti as u32),
                t: now,
            });
        }
        Ok(())
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::VtReached(s) => {
                let srv = &mut self.servers[s.0 as usize];
                let core = srv.bound_core;
                let out = grub::on_virtual_time_reached(srv, &self.now, &mut self.ledgers[core.0])
                    .map_err(|e| grub_err(e, &self.now, self.rec.tail_lines()))?;
                if out == TimerOutcome::Deactivated {
                    self.on_home_inactive(s.0 as usize)?;
                }
            }
            Ev::ResidueDrain(r) => {
                let res = &mut self.residues[r];
                res.live = false;
                let l = &mut self.ledgers[res.core.0];
                l.sub_active(&res.util)?;
                l.sub_allocated(&res.util)?;
            }
            Ev::TaskRemove(task) => self.on_task_remove(task.0 as usize)?,
            Ev::LbTimeout(id, core) => self.on_lb_timeout(id, core),
            Ev::TaskInsert(task) => self.on_task_insert(task.0 as usize)?,
            Ev::Arrival(task) => self.on_arrival(task.0 as usize)?,
            Ev::Sample => {
                self.sample_due = true;
            }
        }
        Ok(())
    }

    fn on_arrival(&mut self, ti: usize) -> Result<(), SimError> {
        let t = &mut self.tasks[ti];
        if t.status != TaskStatus::Admitted || t.departing {
            return Ok(());
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
        if was_idle && self.serving_temp[ti].is_none() {
            self.wake_home(ti)?;
        }
        Ok(())
    }

    fn on_task_insert(&mut self, ti: usize) -> Result<(), SimError> {
        let u = self.tasks[ti].spec.server.utilization.clone();
        match allocate_new_task(&u, &self.ledgers, self.heuristic) {
            PlacementDecision::Immediate(c) => self.admit(ti, c),
            PlacementDecision::Deferred(c) => {
                self.tasks[ti].status = TaskStatus::PendingAdmission;
                self.enqueue_pending(ti, c, PlacementKind::NewTaskAdmission);
            }
            PlacementDecision::Infeasible => self.reject(ti),
        }
        Ok(())
    }

    fn admit(&mut self, ti: usize, c: CoreId) {
        let u = self.tasks[ti].spec.server.utilization.clone();
        self.ledgers[c.0].add_allocated(&u);
        self.servers[ti].bound_core = c;
        let t = &mut self.tasks[ti];
        t.status = TaskStatus::Admitted;
        // a deferred admission may complete at a fractional instant
        let first = self.now.ceil().to_u64().expect("tick fits");
        t.next_arrival = first;
        let inside = first <= self.horizon && t.spec.departure_time.is_none_or(|d| first < d);
        if inside {
            self.events.push(
                tick(first),
                Class::JobArrival,
                ti as u64,
                Ev::Arrival(TaskId(ti as u32)),
            );
        }
        let now = self.now.clone();
        self.rec.emit(|| TraceRecord::TaskAdmitted {
            task: TaskId(ti as u32),
            core: c,
            t: now,
        });
    }

    fn reject(&mut self, ti: usize) {
        self.tasks[ti].status = TaskStatus::Rejected;
        self.metrics.rejections += 1;
        let now = self.now.clone();
        self.rec.emit(|| TraceRecord::TaskRejected {
            task: TaskId(ti as u32),
            t: now,
        });
    }

    fn on_task_remove(&mut self, ti: usize) -> Result<(), SimError> {
        self.tasks[ti].departing = true;
        match self.tasks[ti].status {
            TaskStatus::PendingAdmission => {
                self.drop_pending_of(ti);
                self.tasks[ti].status = TaskStatus::Departed;
            }
            TaskStatus::Admitted => {
                if self.lb_pending[ti] {
                    self.drop_pending_of(ti);
                    self.lb_pending[ti] = false;
                }
                if self.servers[ti].state == ServerState::Inactive {
                    self.on_home_inactive(ti)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn enqueue_pending(&mut self, ti: usize, target: CoreId, kind: PlacementKind) {
        let id = self.next_pending_id;
        self.next_pending_id += 1;
        self.pending[target.0].push_back(Pending {
            id,
            task: TaskId(ti as u32),
            kind,
        });
        self.ledgers[target.0].incoming_migrations_enabled = false;
        let expires = &self.now + &tick(self.timeout);
        self.events
            .push(expires, Class::LbTimeout, id, Ev::LbTimeout(id, target));
        let now = self.now.clone();
        self.rec.emit(|| TraceRecord::LbDeferred {
            task: TaskId(ti as u32),
            target,
            t: now,
        });
    }

    fn drop_pending_of(&mut self, ti: usize) {
        for j in 0..self.pending.len() {
            self.pending[j].retain(|p| p.task.0 as usize != ti);
            if self.pending[j].is_empty() {
                self.ledgers[j].incoming_migrations_enabled = true;
            }
        }
    }

    fn on_lb_timeout(&mut self, id: u64, core: CoreId) {
        let q = &mut self.pending[core.0];
        let Some(pos) = q.iter().position(|p| p.id == id) else {
            return;
        };
        let p = q.remove(pos).expect("position is valid");
        if q.is_empty() {
            self.ledgers[core.0].incoming_migrations_enabled = true;
        }
        let ti = p.task.0 as usize;
        self.metrics.lb_aborts += 1;
        let now = self.now.clone();
        self.rec.emit(|| TraceRecord::LbAbort {
            task: p.task,
            target: core,
            t: now,
        });
        match p.kind {
            PlacementKind::PermanentMigration => {
                self.lb_pending[ti] = false;
                self.tasks[ti].window.reset();
            }
            PlacementKind::NewTaskAdmission => self.reject(ti),
        }
    }

    fn request_permanent_migration(&mut self, ti: usize) -> Result<(), SimError> {
        let u = self.servers[ti].params.utilization.clone();
        let source = self.servers[ti].bound_core;
        match try_permanent_migration(&u, source, &self.ledgers, self.heuristic) {
            PlacementDecision::Immediate(c) => self.finalize_permanent(ti, c)?,
            PlacementDecision::Deferred(c) => {
                self.lb_pending[ti] = true;
                self.enqueue_pending(ti, c, PlacementKind::PermanentMigration);
            }
            PlacementDecision::Infeasible => {}
        }
        Ok(())
    }

    /// Moves the home server of `ti` and its variables to core `to`.
    fn finalize_permanent(&mut self, ti: usize, to: CoreId) -> Result<(), SimError> {
        let s = ServerId(ti as u32);
        let from = self.servers[ti].bound_core;
        let u = self.servers[ti].params.utilization.clone();
        self.ledgers[to.0].add_allocated(&u);
        // a non-contending server whose timer is due now expires before moving
        if self.servers[ti].state == ServerState::ActNonContending && self.servers[ti].virtual_time <= self.now {
            grub::on_virtual_time_reached(&mut self.servers[ti], &self.now, &mut self.ledgers[from.0])
                .map_err(|e| grub_err(e, &self.now, self.rec.tail_lines()))?;
        }
        let state = self.servers[ti].state;
        if state.is_active() {
            if state.is_contending() {
                self.remove_from_queue(s);
            }
            let srv = &mut self.servers[ti];
            if srv.virtual_time > self.now {
                let r = self.residues.len();
                self.residues.push(Residue {
                    core: from,
                    util: u.clone(),
                    live: true,
                });
                self.events.push(
                    srv.virtual_time.clone(),
                    Class::VirtualTimeReached,
                    u64::MAX - r as u64,
                    Ev::ResidueDrain(r),
                );
            } else {
                debug_assert!(state.is_contending());
                self.ledgers[from.0].sub_active(&u)?;
                self.ledgers[from.0].sub_allocated(&u)?;
                srv.virtual_time = self.now.clone();
                srv.sched_deadline = &self.now + &srv.period();
            }
            srv.bound_core = to;
            self.ledgers[to.0].add_active(&u);
            if state.is_contending() {
                let d = self.servers[ti].sched_deadline.clone();
                self.cores[to.0].queue.insert(d, s);
            }
        } else {
            self.ledgers[from.0].sub_allocated(&u)?;
            self.servers[ti].bound_core = to;
        }
        self.tasks[ti].window.reset();
        self.lb_pending[ti] = false;
        self.metrics.perm_migrations += 1;
        let now = self.now.clone();
        self.rec.emit(|| TraceRecord::PermMigration {
            task: TaskId(ti as u32),
            from,
            to,
            t: now,
        });
        Ok(())
    }

    fn progress_pending(&mut self) -> Result<(), SimError> {
        for j in 0..self.pending.len() {
            while let Some(p) = self.pending[j].front() {
                let ti = p.task.0 as usize;
                let u = self.tasks[ti].spec.server.utilization.clone();
                if !pending_can_complete(&u, &self.ledgers[j]) {
                    break;
                }
                let p = self.pending[j].pop_front().expect("front exists");
                match p.kind {
                    PlacementKind::PermanentMigration => self.finalize_permanent(ti, CoreId(j))?,
                    PlacementKind::NewTaskAdmission => self.admit(ti, CoreId(j)),
                }
            }
            if self.pending[j].is_empty() {
                self.ledgers[j].incoming_migrations_enabled = true;
            }
        }
        Ok(())
    }

    fn check_server_deadlines(&mut self) {
        for j in 0..self.cores.len() {
            let mut missed = Vec::new();
            for (d, s) in self.cores[j].queue.iter() {
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
    }

    fn handle_exhaustions(&mut self) -> Result<(), SimError> {
        for j in 0..self.cores.len() {
            while let Some(s) = self.cores[j].queue.head() {
                let si = s.0 as usize;
                if !grub::is_exhausted(&self.servers[si]) {
                    break;
                }
                let old_d = self.servers[si].sched_deadline.clone();
                let srv = &mut self.servers[si];
                let decision = if srv.is_temporary || !self.mig.enabled {
                    srv.migrated_flag = false;
                    grub::postpone_deadline(srv).map_err(|e| grub_err(e, &self.now, Vec::new()))?;
                    MigrationDecision::Postponed
                } else {
                    migration::attempt_temporary_migration(srv, &self.now, &self.ledgers, &self.mig)
                };
                match decision {
                    MigrationDecision::Postponed => {
                        let srv = &self.servers[si];
                        let (v, d) = (srv.virtual_time.clone(), srv.sched_deadline.clone());
                        self.cores[j].queue.rekey(&old_d, d.clone(), s);
                        self.metrics.postponements += 1;
                        let now = self.now.clone();
                        self.rec.emit(|| TraceRecord::Postpone {
                            t: now,
                            server: s,
                            v,
                            d,
                        });
                    }
                    MigrationDecision::Migrate { dest, grant } => self.migrate_temporarily(s, dest, grant)?,
                }
            }
        }
        Ok(())
    }

    fn migrate_temporarily(&mut self, s: ServerId, dest: CoreId, grant: Bandwidth) -> Result<(), SimError> {
        let si = s.0 as usize;
        let source = self.servers[si].bound_core;
        self.remove_from_queue(s);
        if self.servers[si].virtual_time <= self.now {
            return Err(self.fail(format!("migrating server {s} has virtual time in the past")));
        }
        self.servers[si].state = ServerState::ActNonContending;
        self.arm_timer(s);

        let tid = ServerId(self.servers.len() as u32);
        let temp = migration::create_temporary_server(tid, &self.servers[si], dest, grant.clone(), &self.now);
        self.ledgers[dest.0].add_migrated(&grant);
        self.ledgers[dest.0].add_active(&grant);
        self.cores[dest.0].queue.insert(temp.sched_deadline.clone(), tid);
        self.servers.push(temp);
        self.miss_mark.push(None);

        let ti = self.servers[si].task.0 as usize;
        self.serving_temp[ti] = Some(tid);
        if self.mig.migration_cost > 0 {
            let job = self.tasks[ti].jobs.front_mut().expect("migrating job");
            job.remaining = &job.remaining + &tick(self.mig.migration_cost);
        }
        self.metrics.temp_migrations += 1;
        let now = self.now.clone();
        self.rec.emit(|| TraceRecord::TempMigration {
            task: TaskId(ti as u32),
            from: source,
            to: dest,
            t: now,
            grant,
        });
        Ok(())
    }

    fn dispatch(&mut self) {
        for core in &mut self.cores {
            let head = core.queue.head();
            if core.running == head {
                continue;
            }
            if let Some(old) = core.running {
                let srv = &mut self.servers[old.0 as usize];
                if srv.state == ServerState::Executing {
                    srv.state = ServerState::Ready;
                }
            }
            if let Some(h) = head {
                self.servers[h.0 as usize].state = ServerState::Executing;
            }
            core.running = head;
        }
    }

    fn sample(&mut self) {
        self.sample_due = false;
        let Some(series) = &mut self.series else { return };
        let t = self.now.to_u64().expect("samples fall on integer ticks");
        series.t.push(t);
        for (j, core) in self.cores.iter_mut().enumerate() {
            let x = self.ledgers[j].active_util.to_f64();
            series.active[j].push(x);
            series.ema[j].push(core.ema.update(x));
            series.miss_ratio[j].push(core.recent.miss_ratio());
        }
        let next = t + self.sample_stride.expect("sampling enabled");
        if next <= self.horizon {
            self.events.push(tick(next), Class::MetricsSample, 0, Ev::Sample);
        }
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        for l in &self.ledgers {
            if l.active_util > Bandwidth::ONE {
                return Err(self.fail(format!("core {}: active utilization {} > 1", l.core_id, l.active_util)));
            }
            if l.reserved() > Bandwidth::ONE {
                return Err(self.fail(format!(
                    "core {}: allocated {} + migrated {} > 1",
                    l.core_id, l.allocated_util, l.migrated_util
                )));
            }
        }
        if !self.debug {
            return Ok(());
        }
        let m = self.ledgers.len();
        let mut active = vec![Bandwidth::ZERO; m];
        let mut allocated = vec![Bandwidth::ZERO; m];
        let mut migrated = vec![Bandwidth::ZERO; m];
        for srv in &self.servers {
            let j = srv.bound_core.0;
            if srv.state.is_active() {
                active[j] = &active[j] + srv.utilization();
                if srv.is_temporary {
                    migrated[j] = &migrated[j] + srv.utilization();
                }
            }
        }
        for (ti, t) in self.tasks.iter().enumerate() {
            if t.status == TaskStatus::Admitted {
                let j = self.servers[ti].bound_core.0;
                allocated[j] = &allocated[j] + &t.spec.server.utilization;
            }
        }
        for r in self.residues.iter().filter(|r| r.live) {
            active[r.core.0] = &active[r.core.0] + &r.util;
            allocated[r.core.0] = &allocated[r.core.0] + &r.util;
        }
        for j in 0..m {
            let l = &self.ledgers[j];
            for (name, expect, got) in [
                ("active", &active[j], &l.active_util),
                ("allocated", &allocated[j], &l.allocated_util),
                ("migrated", &migrated[j], &l.migrated_util),
            ] {
                if expect != got {
                    return Err(self.fail(format!("core {j}: {name} ledger {got} but servers sum to {expect}")));
                }
            }
            let core = &self.cores[j];
            if core.running != core.queue.head() {
                return Err(self.fail(format!("core {j}: idle or wrong server with non-empty queue")));
            }
            for (d, s) in core.queue.iter() {
                let srv = &self.servers[s.0 as usize];
                if !srv.state.is_contending() || srv.bound_core.0 != j || srv.sched_deadline != *d {
                    return Err(self.fail(format!("core {j}: stale queue entry for server {s}")));
                }
            }
            if !self.pending[j].is_empty() && l.incoming_migrations_enabled {
                return Err(self.fail(format!("core {j}: pending placement with incoming migrations enabled")));
            }
        }
        for (si, srv) in self.servers.iter().enumerate() {
            if srv.state.is_contending() && !self.cores[srv.bound_core.0].queue.contains(&srv.sched_deadline, srv.id) {
                return Err(self.fail(format!("server {si} contending but not queued")));
            }
        }
        Ok(())
    }
}
