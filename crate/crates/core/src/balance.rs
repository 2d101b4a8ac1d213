//! Load balancing: permanent task migration triggered by deadline-miss
//! monitoring, and the allocation strategy for tasks entering the system.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{Bandwidth, CoreId, CoreLedger, TaskId, Tick};
use crate::rational::Rational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heuristic {
    #[serde(rename = "ff")]
    FirstFit,
    #[serde(rename = "bf")]
    BestFit,
    #[serde(rename = "wf")]
    WorstFit,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Heuristic::FirstFit, Heuristic::BestFit, Heuristic::WorstFit];

    pub fn short_name(self) -> &'static str {
        match self {
            Heuristic::FirstFit => "ff",
            Heuristic::BestFit => "bf",
            Heuristic::WorstFit => "wf",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Heuristic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ff" | "first-fit" | "firstfit" => Ok(Heuristic::FirstFit),
            "bf" | "best-fit" | "bestfit" => Ok(Heuristic::BestFit),
            "wf" | "worst-fit" | "worstfit" => Ok(Heuristic::WorstFit),
            other => Err(format!("unknown heuristic `{other}`")),
        }
    }
}

/// Picks a core among candidates already filtered to `residual >= u`.
pub fn select_core_heuristic(candidates: &[(CoreId, Bandwidth)], h: Heuristic) -> Option<CoreId> {
    let by_id = |a: &&(CoreId, Bandwidth), b: &&(CoreId, Bandwidth)| a.0.cmp(&b.0);
    let chosen = match h {
        Heuristic::FirstFit => candidates.iter().min_by(by_id),
        Heuristic::BestFit => candidates.iter().min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0))),
        Heuristic::WorstFit => candidates.iter().min_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0))),
    };
    chosen.map(|(c, _)| *c)
}

/// Sliding window over the last `size` job outcomes of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct MissWindow {
    size: usize,
    outcomes: VecDeque<bool>,
    misses: usize,
}

impl MissWindow {
    pub fn new(size: usize) -> MissWindow {
        assert!(size >= 1, "window must hold at least one job");
        MissWindow {
            size,
            outcomes: VecDeque::with_capacity(size),
            misses: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.outcomes.len() == self.size
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    /// misses / min(jobs seen, size); zero before any job.
    pub fn miss_ratio(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.misses as f64 / self.outcomes.len() as f64
        }
    }

    pub fn record(&mut self, missed: bool) {
        if self.outcomes.len() == self.size && self.outcomes.pop_front() == Some(true) {
            self.misses -= 1;
        }
        self.outcomes.push_back(missed);
        if missed {
            self.misses += 1;
        }
    }

    /// Full window whose miss ratio strictly exceeds `threshold`.
    pub fn triggers(&self, threshold: &Rational) -> bool {
        self.is_full() && Rational::new(self.misses as i128, self.size as i128) > *threshold
    }

    pub fn reset(&mut self) {
        self.outcomes.clear();
        self.misses = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalancerConfig {
    pub enabled: bool,
    pub window_size: usize,
    pub miss_threshold: Rational,
    /// Wait limit for deferred placements; `None` means twice the largest
    /// server period in the scenario.
    pub deferred_timeout: Option<Tick>,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        BalancerConfig {
            enabled: false,
            window_size: 20,
            miss_threshold: Rational::new(1, 10),
            deferred_timeout: None,
        }
    }
}

impl BalancerConfig {
    pub fn enabled() -> Self {
        BalancerConfig {
            enabled: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window_size == 0 {
            return Err("window_size must be >= 1".into());
        }
        if self.deferred_timeout == Some(0) {
            return Err("deferred_timeout must be > 0".into());
        }
        if !self.miss_threshold.is_positive() || self.miss_threshold > Rational::ONE {
            return Err("miss_threshold must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    PermanentMigration,
    NewTaskAdmission,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingPlacement {
    pub task: TaskId,
    pub target: CoreId,
    /// Absolute timeout instant.
    pub deadline: Tick,
    pub kind: PlacementKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementDecision {
    /// Fits now.
    Immediate(CoreId),
    /// Fits once the target's migrated bandwidth drains.
    Deferred(CoreId),
    /// Nowhere to go.
    Infeasible,
}

fn decide(u: &Bandwidth, ledgers: &[CoreLedger], exclude: Option<CoreId>, h: Heuristic) -> PlacementDecision {
    let eligible = || ledgers.iter().filter(move |l| Some(l.core_id) != exclude);
    let now: Vec<_> = eligible()
        .filter(|l| l.incoming_migrations_enabled)
        .map(|l| (l.core_id, l.residual()))
        .filter(|(_, r)| r >= u)
        .collect();
    if let Some(c) = select_core_heuristic(&now, h) {
        return PlacementDecision::Immediate(c);
    }
    let later: Vec<_> = eligible()
        .map(|l| (l.core_id, l.residual_allocated()))
        .filter(|(_, r)| r >= u)
        .collect();
    match select_core_heuristic(&later, h) {
        Some(c) => PlacementDecision::Deferred(c),
        None => PlacementDecision::Infeasible,
    }
}

/// Destination for a task of utilization `u` leaving `source`.
pub fn try_permanent_migration(
    u: &Bandwidth,
    source: CoreId,
    ledgers: &[CoreLedger],
    h: Heuristic,
) -> PlacementDecision {
    decide(u, ledgers, Some(source), h)
}

/// Core for a task entering the system. `Infeasible` means rejection.
pub fn allocate_new_task(u: &Bandwidth, ledgers: &[CoreLedger], h: Heuristic) -> PlacementDecision {
    decide(u, ledgers, None, h)
}

/// A deferred placement may complete once `U^m <= 1 - (u + U_j)`.
pub fn pending_can_complete(u: &Bandwidth, target: &CoreLedger) -> bool {
    let needed = &target.allocated_util + u;
    needed <= Bandwidth::ONE && target.migrated_util <= Bandwidth::ONE.saturating_sub(&needed)
}

/// Static partition of `utils` onto `m` empty cores in the given order.
pub fn partition(utils: &[Bandwidth], m: usize, h: Heuristic) -> Option<Vec<CoreId>> {
    let mut ledgers: Vec<CoreLedger> = (0..m).map(|j| CoreLedger::new(CoreId(j))).collect();
    let mut out = Vec::with_capacity(utils.len());
    for u in utils {
        match allocate_new_task(u, &ledgers, h) {
            PlacementDecision::Immediate(c) => {
                ledgers[c.0].add_allocated(u);
                out.push(c);
            }
            _ => return None,
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(n: u64, d: u64) -> Bandwidth {
        Bandwidth::ratio(n, d)
    }

    fn ledgers(alloc: &[(u64, u64)], migrated: &[(u64, u64)]) -> Vec<CoreLedger> {
        alloc
            .iter()
            .zip(migrated)
            .enumerate()
            .map(|(j, (a, m))| {
                let mut l = CoreLedger::new(CoreId(j));
                l.allocated_util = bw(a.0, a.1);
                l.migrated_util = bw(m.0, m.1);
                l
            })
            .collect()
    }

    #[test]
    fn window_trigger_is_strict_and_needs_full_window() {
        let th = Rational::new(1, 10);
        let mut w = MissWindow::new(20);
        for i in 0..20 {
            w.record(i < 3);
        }
        assert!(w.triggers(&th));

        let mut w = MissWindow::new(20);
        for i in 0..20 {
            w.record(i < 2);
        }
        assert!(!w.triggers(&th));

        let mut w = MissWindow::new(20);
        for _ in 0..5 {
            w.record(true);
        }
        assert!(!w.triggers(&th));
        assert_eq!(w.miss_ratio(), 1.0);
    }

    #[test]
    fn window_slides() {
        let mut w = MissWindow::new(3);
        for m in [true, true, false, false, false] {
            w.record(m);
        }
        assert_eq!(w.len(), 3);
        assert_eq!(w.misses(), 0);
        w.record(true);
        assert_eq!(w.misses(), 1);
        w.reset();
        assert!(w.is_empty());
    }

    #[test]
    fn heuristics() {
        let c = vec![(CoreId(0), bw(4, 10)), (CoreId(1), bw(2, 10)), (CoreId(2), bw(6, 10))];
        assert_eq!(select_core_heuristic(&c, Heuristic::BestFit), Some(CoreId(1)));
        assert_eq!(select_core_heuristic(&c, Heuristic::WorstFit), Some(CoreId(2)));
        assert_eq!(select_core_heuristic(&c, Heuristic::FirstFit), Some(CoreId(0)));
        assert_eq!(select_core_heuristic(&[], Heuristic::WorstFit), None);
        let tie = vec![(CoreId(3), bw(1, 2)), (CoreId(1), bw(1, 2))];
        assert_eq!(select_core_heuristic(&tie, Heuristic::BestFit), Some(CoreId(1)));
        assert_eq!(select_core_heuristic(&tie, Heuristic::WorstFit), Some(CoreId(1)));
    }

    #[test]
    fn permanent_migration_cases() {
        let u = bw(3, 10);
        let ls = ledgers(&[(9, 10), (3, 5)], &[(0, 1), (1, 20)]);
        assert_eq!(
            try_permanent_migration(&u, CoreId(0), &ls, Heuristic::WorstFit),
            PlacementDecision::Immediate(CoreId(1))
        );

        let ls = ledgers(&[(9, 10), (3, 5)], &[(0, 1), (1, 5)]);
        assert_eq!(
            try_permanent_migration(&u, CoreId(0), &ls, Heuristic::WorstFit),
            PlacementDecision::Deferred(CoreId(1))
        );

        let ls = ledgers(&[(8, 10), (8, 10), (9, 10)], &[(0, 1), (0, 1), (0, 1)]);
        assert_eq!(
            try_permanent_migration(&u, CoreId(0), &ls, Heuristic::WorstFit),
            PlacementDecision::Infeasible
        );
    }

    #[test]
    fn source_core_is_never_a_destination() {
        let ls = ledgers(&[(1, 10), (9, 10)], &[(0, 1), (0, 1)]);
        assert_eq!(
            try_permanent_migration(&bw(3, 10), CoreId(0), &ls, Heuristic::FirstFit),
            PlacementDecision::Infeasible
        );
    }

    #[test]
    fn new_task_allocation() {
        let empty = ledgers(&[(0, 1); 4], &[(0, 1); 4]);
        assert_eq!(
            allocate_new_task(&bw(3, 10), &empty, Heuristic::WorstFit),
            PlacementDecision::Immediate(CoreId(0))
        );

        let ls = ledgers(&[(8, 10), (9, 10)], &[(15, 100), (0, 1)]);
        assert_eq!(
            allocate_new_task(&bw(1, 10), &ls, Heuristic::WorstFit),
            PlacementDecision::Immediate(CoreId(1))
        );

        let ls = ledgers(&[(95, 100), (95, 100)], &[(0, 1), (0, 1)]);
        assert_eq!(
            allocate_new_task(&bw(1, 10), &ls, Heuristic::WorstFit),
            PlacementDecision::Infeasible
        );
    }

    #[test]
    fn disabled_core_only_reachable_by_deferral() {
        let mut ls = ledgers(&[(1, 2), (1, 2)], &[(0, 1), (0, 1)]);
        ls[1].incoming_migrations_enabled = false;
        ls[0].allocated_util = bw(9, 10);
        assert_eq!(
            allocate_new_task(&bw(1, 5), &ls, Heuristic::FirstFit),
            PlacementDecision::Deferred(CoreId(1))
        );
    }

    #[test]
    fn pending_completion_condition() {
        let mut l = CoreLedger::new(CoreId(0));
        l.allocated_util = bw(3, 5);
        l.migrated_util = bw(1, 5);
        assert!(!pending_can_complete(&bw(3, 10), &l));
        l.migrated_util = bw(1, 10);
        assert!(pending_can_complete(&bw(3, 10), &l));
    }

    #[test]
    fn static_partition() {
        let us = vec![bw(1, 2), bw(1, 2), bw(1, 2)];
        assert_eq!(
            partition(&us, 2, Heuristic::FirstFit),
            Some(vec![CoreId(0), CoreId(0), CoreId(1)])
        );
        assert_eq!(
            partition(&us, 2, Heuristic::WorstFit),
            Some(vec![CoreId(0), CoreId(1), CoreId(0)])
        );
        assert_eq!(partition(&[bw(3, 5), bw(3, 5), bw(3, 5)], 2, Heuristic::BestFit), None);
    }
}
