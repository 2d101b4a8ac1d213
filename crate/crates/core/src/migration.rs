//! Temporary migration of an exhausted job to the least-loaded core.
//!
//! When a job exhausts its server's budget before the scheduling deadline,
//! the job may continue on another core through a short-lived temporary
//! server that keeps the same deadline and period but only the bandwidth the
//! destination can spare. The decision functions here are pure; the engine
//! applies the resulting [`MigrationDecision`].

use serde::{Deserialize, Serialize};

use crate::grub;
use crate::model::{Bandwidth, CoreId, CoreLedger, ServerId, ServerParams, ServerRuntime, ServerState, SimTime, Tick};
use crate::rational::Rational;

/// Which destination quantity the benefit test divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BenefitBasis {
    /// Destination active utilization `U^a_{j'}` at decision time.
    #[default]
    DestinationActive,
    /// Destination migrated utilization `U^m_{j'}`.
    DestinationMigrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationConfig {
    pub enabled: bool,
    /// Minimum useful execution (ticks) a migration must promise.
    pub epsilon: Rational,
    pub benefit_basis: BenefitBasis,
    /// Ticks added to the remaining demand of a migrated job.
    pub migration_cost: Tick,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        MigrationConfig {
            enabled: true,
            epsilon: Rational::from(2u64),
            benefit_basis: BenefitBasis::DestinationActive,
            migration_cost: 0,
        }
    }
}

impl MigrationConfig {
    pub fn disabled() -> Self {
        MigrationConfig {
            enabled: false,
            ..Default::default()
        }
    }
}

/// `V_i(t) >= d_i` and `d_i > t`.
pub fn is_eligible(server: &ServerRuntime, t: &SimTime) -> bool {
    server.virtual_time >= server.sched_deadline && server.sched_deadline > *t
}

/// Core other than `source` with the smallest active utilization among those
/// accepting incoming migrations; ties go to the lowest core id.
pub fn select_destination_core(ledgers: &[CoreLedger], source: CoreId) -> Option<CoreId> {
    ledgers
        .iter()
        .filter(|l| l.core_id != source && l.incoming_migrations_enabled)
        .min_by(|a, b| a.active_util.cmp(&b.active_util).then(a.core_id.cmp(&b.core_id)))
        .map(|l| l.core_id)
}

/// `min(u^m, 1 - (U_{j'} + U^m_{j'}))`; zero means no capacity.
pub fn admitted_migrating_utilization(migrating_util: &Bandwidth, dest: &CoreLedger) -> Bandwidth {
    migrating_util.clone().min(dest.residual())
}

/// `u (d - t) / (u + U_dest) > epsilon`, exact and strict.
pub fn benefit_check(
    granted: &Bandwidth,
    deadline: &SimTime,
    t: &SimTime,
    dest_util: &Bandwidth,
    cfg: &MigrationConfig,
) -> bool {
    if granted.is_zero() {
        return false;
    }
    let window = deadline - t;
    let promised = &(granted.value() * &window) / &(granted + dest_util).into_rational();
    promised > cfg.epsilon
}

#[derive(Debug, Clone, PartialEq)]
pub enum MigrationDecision {
    Migrate {
        dest: CoreId,
        grant: Bandwidth,
    },
    /// The server's deadline was postponed in place.
    Postponed,
}

/// Runs the exhaustion branch of the migration algorithm for a server whose
/// virtual time reached its deadline while executing on its home core.
///
/// On `Postponed` the server has already been updated (`migrated_flag`
/// cleared, deadline postponed); the caller must re-key its ready queue. On
/// `Migrate` only the flag is set; the caller creates the temporary server.
pub fn attempt_temporary_migration(
    server: &mut ServerRuntime,
    t: &SimTime,
    ledgers: &[CoreLedger],
    cfg: &MigrationConfig,
) -> MigrationDecision {
    debug_assert!(grub::is_exhausted(server));
    let source = server.bound_core;
    if cfg.enabled && !server.migrated_flag && is_eligible(server, t) {
        if let Some(dest) = select_destination_core(ledgers, source) {
            let ledger = &ledgers[dest.0];
            let grant = admitted_migrating_utilization(&server.params.migrating_utilization, ledger);
            let basis = match cfg.benefit_basis {
                BenefitBasis::DestinationActive => &ledger.active_util,
                BenefitBasis::DestinationMigrated => &ledger.migrated_util,
            };
            if benefit_check(&grant, &server.sched_deadline, t, basis, cfg) {
                server.migrated_flag = true;
                return MigrationDecision::Migrate { dest, grant };
            }
        }
    }
    server.migrated_flag = false;
    grub::postpone_deadline(server).expect("exhausted server postpones");
    MigrationDecision::Postponed
}

/// Temporary server for a job leaving `parent` at `t`: same period and
/// scheduling deadline, virtual time starting at `t`, already Ready.
pub fn create_temporary_server(
    id: ServerId,
    parent: &ServerRuntime,
    dest: CoreId,
    grant: Bandwidth,
    t: &SimTime,
) -> ServerRuntime {
    let params = ServerParams {
        // budget is implied by the granted utilization and never read
        budget: 0,
        period: parent.params.period,
        utilization: grant.clone(),
        migrating_utilization: Bandwidth::ZERO,
    };
    ServerRuntime {
        id,
        task: parent.task,
        params,
        state: ServerState::Ready,
        virtual_time: t.clone(),
        sched_deadline: parent.sched_deadline.clone(),
        migrated_flag: false,
        is_temporary: true,
        bound_core: dest,
    }
}
