//! Domain types shared by every scheduler: tasks, jobs, servers and the
//! per-core bandwidth ledger.
//!
//! Integer quantities (periods, budgets, arrivals, execution demands) are
//! ticks. Everything that can fall between ticks (virtual times, scheduling
//! deadlines, completion instants) is an exact [`Rational`].

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::LedgerError;
use crate::rational::Rational;
use crate::workload::ExecModel;

/// Integer simulation time.
pub type Tick = u64;

/// Exact simulation instant.
pub type SimTime = Rational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoreId(pub usize);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A non-negative exact utilization.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct Bandwidth(Rational);

impl Bandwidth {
    pub const ZERO: Bandwidth = Bandwidth(Rational::ZERO);
    pub const ONE: Bandwidth = Bandwidth(Rational::ONE);

    pub fn new(value: Rational) -> Result<Bandwidth, LedgerError> {
        if value.is_negative() {
            return Err(LedgerError::Negative {
                current: "0".into(),
                amount: (-value).to_string(),
            });
        }
        Ok(Bandwidth(value))
    }

    /// `num/den`; panics on a negative ratio.
    pub fn ratio(num: u64, den: u64) -> Bandwidth {
        assert!(den > 0, "zero denominator");
        Bandwidth(Rational::new(num as i128, den as i128))
    }

    pub fn value(&self) -> &Rational {
        &self.0
    }

    pub fn into_rational(self) -> Rational {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64()
    }

    /// Exact subtraction; going below zero is a bookkeeping bug, never clamped.
    pub fn checked_sub(&self, rhs: &Bandwidth) -> Result<Bandwidth, LedgerError> {
        let v = &self.0 - &rhs.0;
        if v.is_negative() {
            return Err(LedgerError::Negative {
                current: self.0.to_string(),
                amount: rhs.0.to_string(),
            });
        }
        Ok(Bandwidth(v))
    }

    /// `max(0, self - rhs)`, for residual-capacity style quantities.
    pub fn saturating_sub(&self, rhs: &Bandwidth) -> Bandwidth {
        let v = &self.0 - &rhs.0;
        if v.is_negative() {
            Bandwidth::ZERO
        } else {
            Bandwidth(v)
        }
    }

    pub fn min(self, other: Bandwidth) -> Bandwidth {
        Bandwidth(self.0.min(other.0))
    }
}

impl Add for &Bandwidth {
    type Output = Bandwidth;
    fn add(self, rhs: &Bandwidth) -> Bandwidth {
        Bandwidth(&self.0 + &rhs.0)
    }
}

impl Add for Bandwidth {
    type Output = Bandwidth;
    fn add(self, rhs: Bandwidth) -> Bandwidth {
        &self + &rhs
    }
}

impl std::iter::Sum for Bandwidth {
    fn sum<I: Iterator<Item = Bandwidth>>(iter: I) -> Bandwidth {
        iter.fold(Bandwidth::ZERO, |a, b| a + b)
    }
}

impl<'a> std::iter::Sum<&'a Bandwidth> for Bandwidth {
    fn sum<I: Iterator<Item = &'a Bandwidth>>(iter: I) -> Bandwidth {
        iter.fold(Bandwidth::ZERO, |a, b| &a + b)
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Rational::deserialize(d)?;
        Bandwidth::new(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Periodic,
    Sporadic,
}

/// Reservation parameters of a server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerParams {
    pub budget: Tick,
    pub period: Tick,
    /// Always exactly `budget / period`.
    pub utilization: Bandwidth,
    pub migrating_utilization: Bandwidth,
}

impl ServerParams {
    pub fn new(budget: Tick, period: Tick, migrating_utilization: Bandwidth) -> ServerParams {
        assert!(
            budget > 0 && period > 0 && budget <= period,
            "invalid reservation {budget}/{period}"
        );
        ServerParams {
            budget,
            period,
            utilization: Bandwidth::ratio(budget, period),
            migrating_utilization,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.period == 0 || self.budget == 0 {
            return Err("budget and period must be positive".into());
        }
        if self.budget > self.period {
            return Err(format!("budget {} exceeds period {}", self.budget, self.period));
        }
        if self.utilization != Bandwidth::ratio(self.budget, self.period) {
            return Err(format!(
                "utilization {} differs from {}/{}",
                self.utilization, self.budget, self.period
            ));
        }
        if self.migrating_utilization > Bandwidth::ONE {
            return Err("migrating utilization above 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Period, equal to the relative deadline.
    pub period: Tick,
    pub kind: TaskKind,
    pub exec_model: ExecModel,
    pub server: ServerParams,
    #[serde(default)]
    pub arrival_time: Tick,
    #[serde(default)]
    pub departure_time: Option<Tick>,
    /// Seed of the task's private job stream.
    pub job_seed: u64,
}

impl TaskSpec {
    pub fn utilization(&self) -> &Bandwidth {
        &self.server.utilization
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub task: TaskId,
    pub index: u64,
    pub arrival: Tick,
    pub exec_demand: Tick,
    pub remaining: Rational,
    pub finish: Option<SimTime>,
    pub missed: bool,
}

impl Job {
    pub fn new(task: TaskId, index: u64, arrival: Tick, exec_demand: Tick) -> Job {
        Job {
            task,
            index,
            arrival,
            exec_demand,
            remaining: Rational::from(exec_demand),
            finish: None,
            missed: false,
        }
    }

    pub fn absolute_deadline(&self, relative: Tick) -> Tick {
        self.arrival + relative
    }

    /// Consumes `amount` of service; panics if it exceeds the remaining demand.
    pub fn consume(&mut self, amount: &Rational) {
        let rem = &self.remaining - amount;
        assert!(!rem.is_negative(), "job {}#{} over-served", self.task, self.index);
        self.remaining = rem;
    }

    pub fn finish_at(&mut self, t: SimTime, relative_deadline: Tick) {
        debug_assert!(self.remaining.is_zero());
        self.missed = t > Rational::from(self.arrival + relative_deadline);
        self.finish = Some(t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerState {
    Inactive,
    Ready,
    Executing,
    ActNonContending,
}

impl ServerState {
    /// Counted in the active utilization.
    pub fn is_active(self) -> bool {
        !matches!(self, ServerState::Inactive)
    }

    /// Has a job to run.
    pub fn is_contending(self) -> bool {
        matches!(self, ServerState::Ready | ServerState::Executing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRuntime {
    pub id: ServerId,
    pub task: TaskId,
    pub params: ServerParams,
    pub state: ServerState,
    pub virtual_time: Rational,
    pub sched_deadline: Rational,
    pub migrated_flag: bool,
    pub is_temporary: bool,
    pub bound_core: CoreId,
}

impl ServerRuntime {
    pub fn new(id: ServerId, task: TaskId, params: ServerParams, core: CoreId) -> ServerRuntime {
        ServerRuntime {
            id,
            task,
            params,
            state: ServerState::Inactive,
            virtual_time: Rational::ZERO,
            sched_deadline: Rational::ZERO,
            migrated_flag: false,
            is_temporary: false,
            bound_core: core,
        }
    }

    pub fn utilization(&self) -> &Bandwidth {
        &self.params.utilization
    }

    pub fn period(&self) -> Rational {
        Rational::from(self.params.period)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoreLedger {
    pub core_id: CoreId,
    /// Permanent servers allocated here.
    pub allocated_util: Bandwidth,
    /// Live temporary servers hosted here.
    pub migrated_util: Bandwidth,
    /// Every active server on the core, temporaries included.
    pub active_util: Bandwidth,
    pub incoming_migrations_enabled: bool,
}

impl CoreLedger {
    pub fn new(core_id: CoreId) -> CoreLedger {
        CoreLedger {
            core_id,
            allocated_util: Bandwidth::ZERO,
            migrated_util: Bandwidth::ZERO,
            active_util: Bandwidth::ZERO,
            incoming_migrations_enabled: true,
        }
    }

    /// `U_j + U_j^m`.
    pub fn reserved(&self) -> Bandwidth {
        &self.allocated_util + &self.migrated_util
    }

    /// `1 - (U_j + U_j^m)`, floored at zero.
    pub fn residual(&self) -> Bandwidth {
        Bandwidth::ONE.saturating_sub(&self.reserved())
    }

    /// `1 - U_j`, floored at zero.
    pub fn residual_allocated(&self) -> Bandwidth {
        Bandwidth::ONE.saturating_sub(&self.allocated_util)
    }

    fn sub_field(
        core: CoreId,
        field: &'static str,
        current: &Bandwidth,
        amount: &Bandwidth,
    ) -> Result<Bandwidth, LedgerError> {
        current.checked_sub(amount).map_err(|_| LedgerError::Underflow {
            core,
            field,
            current: current.to_string(),
            amount: amount.to_string(),
        })
    }

    pub fn add_active(&mut self, u: &Bandwidth) {
        self.active_util = &self.active_util + u;
    }

    pub fn sub_active(&mut self, u: &Bandwidth) -> Result<(), LedgerError> {
        self.active_util = Self::sub_field(self.core_id, "active_util", &self.active_util, u)?;
        Ok(())
    }

    pub fn add_allocated(&mut self, u: &Bandwidth) {
        self.allocated_util = &self.allocated_util + u;
    }

    pub fn sub_allocated(&mut self, u: &Bandwidth) -> Result<(), LedgerError> {
        self.allocated_util = Self::sub_field(self.core_id, "allocated_util", &self.allocated_util, u)?;
        Ok(())
    }

    pub fn add_migrated(&mut self, u: &Bandwidth) {
        self.migrated_util = &self.migrated_util + u;
    }

    pub fn sub_migrated(&mut self, u: &Bandwidth) -> Result<(), LedgerError> {
        self.migrated_util = Self::sub_field(self.core_id, "migrated_util", &self.migrated_util, u)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_arithmetic() {
        let a = Bandwidth::ratio(1, 2);
        let b = Bandwidth::ratio(1, 3);
        assert_eq!(&a + &b, Bandwidth::ratio(5, 6));
        assert_eq!(a.checked_sub(&a).unwrap(), Bandwidth::ZERO);
        assert_eq!(Bandwidth::ratio(2, 4).cmp(&a), std::cmp::Ordering::Equal);
    }

    #[test]
    fn bandwidth_underflow_is_an_error() {
        let a = Bandwidth::ratio(1, 3);
        assert!(a.checked_sub(&Bandwidth::ratio(1, 2)).is_err());
        let mut l = CoreLedger::new(CoreId(2));
        let err = l.sub_active(&Bandwidth::ratio(1, 10)).unwrap_err();
        assert!(err.to_string().contains("active_util"));
        assert_eq!(l.active_util, Bandwidth::ZERO);
    }

    #[test]
    fn ledger_residuals() {
        let mut l = CoreLedger::new(CoreId(0));
        l.add_allocated(&Bandwidth::ratio(17, 20));
        l.add_migrated(&Bandwidth::ratio(1, 10));
        assert_eq!(l.reserved(), Bandwidth::ratio(19, 20));
        assert_eq!(l.residual(), Bandwidth::ratio(1, 20));
        assert_eq!(l.residual_allocated(), Bandwidth::ratio(3, 20));
    }

    #[test]
    fn job_miss_is_strictly_after_deadline() {
        let mut j = Job::new(TaskId(0), 0, 10, 5);
        j.consume(&Rational::from(5u64));
        j.finish_at(Rational::from(30u64), 20);
        assert!(!j.missed);
        let mut j = Job::new(TaskId(0), 1, 10, 5);
        j.consume(&Rational::from(5u64));
        j.finish_at(Rational::new(61, 2), 20);
        assert!(j.missed);
    }

    #[test]
    fn server_params_validation() {
        let p = ServerParams::new(7, 23, Bandwidth::ratio(1, 10));
        assert_eq!(p.utilization, Bandwidth::ratio(7, 23));
        assert!(p.validate().is_ok());
        let mut bad = p.clone();
        bad.utilization = Bandwidth::ratio(3, 10);
        assert!(bad.validate().is_err());
    }
}
