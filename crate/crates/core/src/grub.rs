//! Single-core GRUB: the server automaton, virtual-time accounting,
//! deadline postponement and active-bandwidth bookkeeping.
//!
//! Every function acts on one server and the ledger of the core it is bound
//! to. The engine is responsible for calling them at the right instants; the
//! functions only enforce the automaton edges.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::error::LedgerError;
use crate::model::{Bandwidth, CoreLedger, ServerId, ServerRuntime, ServerState, SimTime};
use crate::rational::Rational;

#[derive(Debug, Error)]
pub enum GrubError {
    #[error("server {0}: postponement requires virtual time >= deadline")]
    NotExhausted(ServerId),
    #[error("server {server}: illegal transition from {from:?} ({edge})")]
    IllegalTransition {
        server: ServerId,
        from: ServerState,
        edge: &'static str,
    },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// EDF order on `(sched_deadline, server id)`.
#[derive(Debug, Clone, Default)]
pub struct ReadyQueue {
    set: BTreeSet<(Rational, ServerId)>,
}

impl ReadyQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, deadline: Rational, id: ServerId) {
        let fresh = self.set.insert((deadline, id));
        debug_assert!(fresh, "server {id} queued twice");
    }

    pub fn remove(&mut self, deadline: &Rational, id: ServerId) -> bool {
        self.set.remove(&(deadline.clone(), id))
    }

    pub fn rekey(&mut self, old: &Rational, new: Rational, id: ServerId) {
        let present = self.remove(old, id);
        debug_assert!(present, "rekey of unqueued server {id}");
        self.insert(new, id);
    }

    pub fn head(&self) -> Option<ServerId> {
        self.set.iter().next().map(|(_, id)| *id)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn contains(&self, deadline: &Rational, id: ServerId) -> bool {
        self.set.contains(&(deadline.clone(), id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Rational, ServerId)> + '_ {
        self.set.iter().map(|(d, id)| (d, *id))
    }
}

/// Earliest scheduling deadline, ties to the lowest server id.
pub fn dispatch(queue: &ReadyQueue) -> Option<ServerId> {
    queue.head()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalOutcome {
    /// Inactive -> Ready with fresh variables.
    Activated,
    /// Act-N-Cont -> Ready, variables kept.
    Resumed,
    /// Server already contending; the job waits behind the current one.
    Queued,
}

pub fn on_job_arrival(server: &mut ServerRuntime, t: &SimTime, ledger: &mut CoreLedger) -> ArrivalOutcome {
    match server.state {
        ServerState::Inactive => {
            server.virtual_time = t.clone();
            server.sched_deadline = t + &server.period();
            server.state = ServerState::Ready;
            ledger.add_active(&server.params.utilization);
            ArrivalOutcome::Activated
        }
        ServerState::ActNonContending => {
            server.state = ServerState::Ready;
            ArrivalOutcome::Resumed
        }
        ServerState::Ready | ServerState::Executing => ArrivalOutcome::Queued,
    }
}

/// `U^a / U_i`.
pub fn virtual_time_rate(active_util: &Bandwidth, server_util: &Bandwidth) -> Rational {
    active_util.value() / server_util.value()
}

/// Advances the virtual time of an executing server over `dt` at a constant
/// active utilization and returns the new value.
pub fn advance_executing(server: &mut ServerRuntime, dt: &Rational, active_util: &Bandwidth) -> Rational {
    assert!(!dt.is_negative(), "negative execution interval {dt}");
    let rate = virtual_time_rate(active_util, &server.params.utilization);
    advance_at_rate(server, dt, &rate)
}

/// Same as [`advance_executing`] with an explicit rate, for reclaiming rules
/// other than the single-core one.
pub fn advance_at_rate(server: &mut ServerRuntime, dt: &Rational, rate: &Rational) -> Rational {
    assert!(!dt.is_negative(), "negative execution interval {dt}");
    if !dt.is_zero() {
        server.virtual_time = &server.virtual_time + &(rate * dt);
    }
    server.virtual_time.clone()
}

/// Execution time until the virtual time reaches the scheduling deadline at
/// the current rate. Zero when already exhausted.
pub fn exhaustion_horizon(server: &ServerRuntime, active_util: &Bandwidth) -> Rational {
    assert!(
        !active_util.is_zero(),
        "exhaustion horizon with zero active utilization"
    );
    let rate = virtual_time_rate(active_util, &server.params.utilization);
    exhaustion_horizon_at_rate(server, &rate)
}

pub fn exhaustion_horizon_at_rate(server: &ServerRuntime, rate: &Rational) -> Rational {
    assert!(rate.is_positive(), "non-positive virtual-time rate");
    let gap = &server.sched_deadline - &server.virtual_time;
    if gap.is_negative() || gap.is_zero() {
        Rational::ZERO
    } else {
        &gap / rate
    }
}

pub fn is_exhausted(server: &ServerRuntime) -> bool {
    server.virtual_time >= server.sched_deadline
}

/// `d_i <- V_i + P_i`. The caller re-keys the ready queue.
pub fn postpone_deadline(server: &mut ServerRuntime) -> Result<(), GrubError> {
    if !is_exhausted(server) {
        return Err(GrubError::NotExhausted(server.id));
    }
    server.sched_deadline = &server.virtual_time + &server.period();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionOutcome {
    /// Another job is pending; the server keeps contending.
    NextJob,
    /// Virtual time still in the future: bandwidth stays booked.
    NonContending,
    /// Left the active set.
    Inactive,
}

pub fn on_job_completion(
    server: &mut ServerRuntime,
    t: &SimTime,
    has_pending: bool,
    ledger: &mut CoreLedger,
) -> Result<CompletionOutcome, GrubError> {
    if !server.state.is_contending() {
        return Err(GrubError::IllegalTransition {
            server: server.id,
            from: server.state,
            edge: "job completion",
        });
    }
    server.migrated_flag = false;
    if has_pending {
        return Ok(CompletionOutcome::NextJob);
    }
    if server.virtual_time > *t {
        server.state = ServerState::ActNonContending;
        Ok(CompletionOutcome::NonContending)
    } else {
        server.state = ServerState::Inactive;
        ledger.sub_active(&server.params.utilization)?;
        if server.is_temporary {
            ledger.sub_migrated(&server.params.utilization)?;
        }
        Ok(CompletionOutcome::Inactive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerOutcome {
    /// Act-N-Cont -> Inactive.
    Deactivated,
    /// Temporary server deactivated and released from the migrated bandwidth.
    Destroyed,
    /// A job arrived first; nothing to do.
    Canceled,
}

pub fn on_virtual_time_reached(
    server: &mut ServerRuntime,
    t: &SimTime,
    ledger: &mut CoreLedger,
) -> Result<TimerOutcome, GrubError> {
    if server.state != ServerState::ActNonContending || server.virtual_time > *t {
        return Ok(TimerOutcome::Canceled);
    }
    server.state = ServerState::Inactive;
    ledger.sub_active(&server.params.utilization)?;
    if server.is_temporary {
        ledger.sub_migrated(&server.params.utilization)?;
        return Ok(TimerOutcome::Destroyed);
    }
    Ok(TimerOutcome::Deactivated)
}
