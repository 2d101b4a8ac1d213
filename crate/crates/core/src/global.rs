//! Global-EDF GRUB baselines with parallel and sequential reclaiming.
//!
//! Both variants share one global EDF queue; they differ only in how the
//! virtual time of a running server advances. The rules are reconstructions
//! from the high-level description of the two schemes, isolated in
//! [`reclaim_rate`] so they can be replaced without touching dispatch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Bandwidth, CoreId, ServerId};
use crate::rational::Rational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReclaimMode {
    /// One system-wide active utilization shared by all running servers.
    Parallel,
    /// Active utilization booked per core.
    Sequential,
}

impl fmt::Display for ReclaimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReclaimMode::Parallel => "g-par",
            ReclaimMode::Sequential => "g-seq",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLedger {
    pub mode: ReclaimMode,
    pub cores: usize,
    /// Sum of the utilizations of all active servers.
    pub total_active: Bandwidth,
    /// Per-core booking of active bandwidth (sequential mode). Each active
    /// server is booked on the core it last ran on.
    pub booked: Vec<Bandwidth>,
}

impl GlobalLedger {
    pub fn new(mode: ReclaimMode, cores: usize) -> GlobalLedger {
        assert!(cores >= 1);
        GlobalLedger {
            mode,
            cores,
            total_active: Bandwidth::ZERO,
            booked: vec![Bandwidth::ZERO; cores],
        }
    }

    /// `m - U^a`, floored at zero.
    pub fn spare(&self) -> Rational {
        let s = &Rational::from(self.cores as u64) - self.total_active.value();
        if s.is_negative() {
            Rational::ZERO
        } else {
            s
        }
    }

    /// Core with the least booked bandwidth, lowest id on ties.
    pub fn least_booked_core(&self) -> CoreId {
        let (j, _) = self
            .booked
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("at least one core");
        CoreId(j)
    }
}

/// Virtual-time rate of a server executing on `core`.
///
/// Sequential: `booked(core) / U_i`, i.e. single-core GRUB on the core's own
/// booking. Parallel: `max(U_i, U^a - (m - 1)) / U_i`. The sustained CPU
/// share of a running server is `1 / rate`; the rule reduces to single-core
/// GRUB when `m = 1`.
pub fn reclaim_rate(server_util: &Bandwidth, ledger: &GlobalLedger, core: CoreId) -> Rational {
    let u = server_util.value();
    let rate = match ledger.mode {
        ReclaimMode::Sequential => ledger.booked[core.0].value() / u,
        ReclaimMode::Parallel => {
            let excess = ledger.total_active.value() - &Rational::from((ledger.cores - 1) as u64);
            &u.clone().max(excess) / u
        }
    };
    debug_assert!(rate.is_positive());
    rate
}

/// Density bound: `sum U <= m - (m - 1) max U`.
pub fn global_edf_admission_test(utils: &[Bandwidth], cores: usize) -> bool {
    let total: Bandwidth = utils.iter().sum();
    let max = utils.iter().max().cloned().unwrap_or(Bandwidth::ZERO);
    let m = Rational::from(cores as u64);
    let bound = &m - &(&Rational::from((cores - 1) as u64) * max.value());
    *total.value() <= bound
}

/// Assigns the first `cores` servers of `ready_in_edf_order` to cores.
///
/// A running server that stays among the earliest keeps its core; the
/// remaining selected servers take the freed cores in ascending core order.
pub fn global_dispatch(ready_in_edf_order: &[ServerId], current: &[Option<ServerId>]) -> Vec<Option<ServerId>> {
    let cores = current.len();
    let selected = &ready_in_edf_order[..ready_in_edf_order.len().min(cores)];
    let mut next: Vec<Option<ServerId>> = current.iter().map(|c| c.filter(|s| selected.contains(s))).collect();
    let kept: Vec<ServerId> = next.iter().flatten().copied().collect();
    let mut waiting = selected.iter().filter(|s| !kept.contains(s));
    for slot in next.iter_mut() {
        if slot.is_none() {
            *slot = waiting.next().copied();
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(n: u64, d: u64) -> Bandwidth {
        Bandwidth::ratio(n, d)
    }

    #[test]
    fn dispatch_keeps_running_servers_in_place() {
        let (a, b, c) = (ServerId(0), ServerId(1), ServerId(2));
        let first = global_dispatch(&[a, b, c], &[None, None]);
        assert_eq!(first, vec![Some(a), Some(b)]);
        // c's deadline becomes the earliest: it displaces b, a stays put
        let second = global_dispatch(&[c, a, b], &first);
        assert_eq!(second, vec![Some(a), Some(c)]);
        // a finishes: b takes the freed core
        let third = global_dispatch(&[c, b], &second);
        assert_eq!(third, vec![Some(b), Some(c)]);
    }

    #[test]
    fn dispatch_with_fewer_servers_than_cores() {
        let out = global_dispatch(&[ServerId(4)], &[None, Some(ServerId(9)), None]);
        assert_eq!(out, vec![Some(ServerId(4)), None, None]);
    }

    #[test]
    fn parallel_rate() {
        let mut l = GlobalLedger::new(ReclaimMode::Parallel, 4);
        l.total_active = bw(2, 1);
        let u = bw(1, 2);
        let rate = reclaim_rate(&u, &l, CoreId(0));
        // spare 2 split over 4 cores: sustained share 1/2 + 1/2 = 1 = 1/rate,
        // i.e. twice the reservation
        assert_eq!(rate, Rational::ONE);
        let share = |r: &Rational| Rational::ONE / r;
        assert_eq!(
            share(&rate),
            &Rational::new(1, 2) + &(&l.spare() / &Rational::from(4u64))
        );

        // saturated: no reclaiming, share = U_i
        l.total_active = bw(4, 1);
        let rate = reclaim_rate(&u, &l, CoreId(0));
        assert_eq!(rate, Rational::from(2u64));
        assert_eq!(share(&rate), Rational::new(1, 2));
    }

    #[test]
    fn sequential_rate() {
        let mut l = GlobalLedger::new(ReclaimMode::Sequential, 2);
        l.booked[1] = bw(1, 2);
        assert_eq!(reclaim_rate(&bw(1, 2), &l, CoreId(1)), Rational::ONE);
        l.booked[1] = bw(3, 4);
        assert_eq!(reclaim_rate(&bw(1, 4), &l, CoreId(1)), Rational::from(3u64));
    }

    #[test]
    fn single_core_modes_match_grub() {
        for (ua, ui) in [((1, 2), (1, 4)), ((9, 10), (3, 10)), ((1, 3), (1, 3))] {
            let mut par = GlobalLedger::new(ReclaimMode::Parallel, 1);
            par.total_active = bw(ua.0, ua.1);
            let mut seq = GlobalLedger::new(ReclaimMode::Sequential, 1);
            seq.booked[0] = bw(ua.0, ua.1);
            let expected = crate::grub::virtual_time_rate(&bw(ua.0, ua.1), &bw(ui.0, ui.1));
            assert_eq!(reclaim_rate(&bw(ui.0, ui.1), &par, CoreId(0)), expected);
            assert_eq!(reclaim_rate(&bw(ui.0, ui.1), &seq, CoreId(0)), expected);
        }
    }

    #[test]
    fn density_bound() {
        assert!(global_edf_admission_test(&vec![bw(1, 2); 5], 4));
        let mut us = vec![bw(1, 2)];
        us.extend(vec![bw(23, 100); 10]);
        // 0.5 + 2.3 = 2.8 > 4 - 1.5
        assert!(!global_edf_admission_test(&us, 4));
        assert!(global_edf_admission_test(&[bw(1, 2), bw(1, 2)], 1));
        assert!(!global_edf_admission_test(&[bw(1, 2), bw(3, 5)], 1));
    }
}
