//! Random scenario generation: UUNIFAST-discard utilizations, execution-time
//! models, budget and period derivation, and admission filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{partition, Heuristic};
use crate::error::GenError;
use crate::global::global_edf_admission_test;
use crate::model::{Bandwidth, ServerParams, TaskId, TaskKind, TaskSpec, Tick};
use crate::rational::Rational;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Denominator used when snapping floating-point utilizations.
pub const SNAP_DENOMINATOR: i128 = 1_000_000;

const MAX_UUNIFAST_DISCARDS: u64 = 100_000;
const MAX_SCENARIO_DISCARDS: u64 = 10_000;
const EXEC_LOW: Tick = 5;
const EXEC_HIGH: Tick = 200;

pub type ScenarioRng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child of `base`: `mix64(base ^ mix64(index))`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index))
}

pub fn rng_from_seed(seed: u64) -> ScenarioRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Distribution of job execution times of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecModel {
    /// `Unif[minexec, budget]` with probability `pm`, else `Unif[budget+1, maxexec]`.
    TwoLevelUniform {
        minexec: Tick,
        maxexec: Tick,
        budget: Tick,
        pm: f64,
    },
    /// Shifted Weibull truncated to `[minexec, maxexec]` by rejection.
    Weibull {
        minexec: Tick,
        maxexec: Tick,
        budget: Tick,
        pm: f64,
        shape: f64,
        scale: f64,
        location: f64,
    },
    /// Every job demands exactly `value`; used by verification scenarios.
    Constant { value: Tick, budget: Tick },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    #[default]
    TwoLevelUniform,
    Weibull,
}

/// Default two-level budget: the midpoint of the execution range. Overruns
/// then stay below `2B`, and exactly a `1 - pm` fraction of jobs overrun.
pub fn two_level_budget(minexec: Tick, maxexec: Tick) -> Tick {
    ((minexec + maxexec) / 2).clamp(minexec, maxexec.saturating_sub(1).max(minexec))
}

pub fn weibull_quantile(p: f64, shape: f64, scale: f64, location: f64) -> f64 {
    location + scale * (-(1.0 - p).ln()).powf(1.0 / shape)
}

pub fn weibull_cdf(x: f64, shape: f64, scale: f64, location: f64) -> f64 {
    if x <= location {
        0.0
    } else {
        1.0 - (-((x - location) / scale).powf(shape)).exp()
    }
}

impl ExecModel {
    pub fn two_level(minexec: Tick, maxexec: Tick, budget: Tick, pm: f64) -> Result<ExecModel, GenError> {
        let m = ExecModel::TwoLevelUniform {
            minexec,
            maxexec,
            budget,
            pm,
        };
        m.validate()?;
        Ok(m)
    }

    /// Weibull with the default shape 2, location `minexec` and a scale
    /// placing the untruncated median at the middle of the range.
    pub fn weibull_default(minexec: Tick, maxexec: Tick, pm: f64) -> Result<ExecModel, GenError> {
        let shape = 2.0;
        let location = minexec as f64;
        let mid = (minexec + maxexec) as f64 / 2.0;
        let scale = (mid - location) / std::f64::consts::LN_2.powf(1.0 / shape);
        ExecModel::weibull(minexec, maxexec, pm, shape, scale, location)
    }

    pub fn weibull(
        minexec: Tick,
        maxexec: Tick,
        pm: f64,
        shape: f64,
        scale: f64,
        location: f64,
    ) -> Result<ExecModel, GenError> {
        let mut m = ExecModel::Weibull {
            minexec,
            maxexec,
            budget: minexec,
            pm,
            shape,
            scale,
            location,
        };
        let b = derive_budget(&m);
        if let ExecModel::Weibull { budget, .. } = &mut m {
            *budget = b;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |s: String| Err(GenError::InvalidModel(s));
        match *self {
            ExecModel::TwoLevelUniform {
                minexec,
                maxexec,
                budget,
                pm,
            } => {
                if minexec == 0 || minexec > budget {
                    return bad(format!("need 0 < minexec <= budget, got {minexec}, {budget}"));
                }
                if budget + 1 > maxexec {
                    return bad(format!(
                        "budget {budget} leaves no overrun band below maxexec {maxexec}"
                    ));
                }
                if !(pm > 0.0 && pm <= 1.0) {
                    return bad(format!("pm {pm} outside (0, 1]"));
                }
            }
            ExecModel::Weibull {
                minexec,
                maxexec,
                budget,
                pm,
                shape,
                scale,
                ..
            } => {
                if minexec == 0 || minexec >= maxexec || budget < minexec || budget > maxexec {
                    return bad(format!("inconsistent range {minexec}..{maxexec} with budget {budget}"));
                }
                if !(pm > 0.0 && pm < 1.0 && shape > 0.0 && scale > 0.0) {
                    return bad("weibull needs 0 < pm < 1, shape > 0, scale > 0".into());
                }
            }
            ExecModel::Constant { value, budget } => {
                if value == 0 || budget == 0 {
                    return bad("constant demand and budget must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> Tick {
        match *self {
            ExecModel::TwoLevelUniform { budget, .. }
            | ExecModel::Weibull { budget, .. }
            | ExecModel::Constant { budget, .. } => budget,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tick {
        match self {
            ExecModel::TwoLevelUniform { .. } => sample_exec_two_level(self, rng),
            ExecModel::Weibull { .. } => sample_exec_weibull(self, rng),
            ExecModel::Constant { value, .. } => *value,
        }
    }
}

/// Two independent `Unif{lo..=hi}` draws, sorted; equal draws are redrawn.
/// The default bounds are `(5, 200)`.
pub fn gen_exec_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (Tick, Tick)) -> (Tick, Tick) {
    assert!(lo < hi, "degenerate exec range");
    loop {
        let a = rng.gen_range(lo..=hi);
        let b = rng.gen_range(lo..=hi);
        if a != b {
            return (a.min(b), a.max(b));
        }
    }
}

pub fn sample_exec_two_level<R: Rng + ?Sized>(model: &ExecModel, rng: &mut R) -> Tick {
    let ExecModel::TwoLevelUniform {
        minexec,
        maxexec,
        budget,
        pm,
    } = *model
    else {
        panic!("two-level sampler on {model:?}");
    };
    if rng.gen::<f64>() < pm {
        rng.gen_range(minexec..=budget)
    } else {
        rng.gen_range(budget + 1..=maxexec)
    }
}

pub fn sample_exec_weibull<R: Rng + ?Sized>(model: &ExecModel, rng: &mut R) -> Tick {
    let ExecModel::Weibull {
        minexec,
        maxexec,
        shape,
        scale,
        location,
        ..
    } = *model
    else {
        panic!("weibull sampler on {model:?}");
    };
    for _ in 0..1_000_000 {
        let u: f64 = rng.gen();
        let x = weibull_quantile(u, shape, scale, location).round();
        if x >= minexec as f64 && x <= maxexec as f64 {
            return x as Tick;
        }
    }
    // numerically empty window: fall back to the nearest bound
    if location >= maxexec as f64 {
        maxexec
    } else {
        minexec
    }
}

/// Reservation budget for the model: the model's own parameter for the
/// two-level law, the smallest integer with `CDF >= pm` (clamped to the
/// execution range) for Weibull.
pub fn derive_budget(model: &ExecModel) -> Tick {
    match *model {
        ExecModel::TwoLevelUniform { budget, .. } | ExecModel::Constant { budget, .. } => budget,
        ExecModel::Weibull {
            minexec,
            maxexec,
            pm,
            shape,
            scale,
            location,
            ..
        } => {
            let q = weibull_quantile(pm, shape, scale, location);
            let mut b = q.ceil().max(0.0) as Tick;
            // guard against the quantile landing a hair above an integer
            if b > 0 && weibull_cdf((b - 1) as f64, shape, scale, location) >= pm {
                b -= 1;
            }
            b.clamp(minexec, maxexec)
        }
    }
}

/// `T = P = round(B / u)` (at least `B`), with the exact utilization `B / P`.
pub fn derive_periods(budget: Tick, u: &Bandwidth) -> (Tick, Tick, Bandwidth) {
    assert!(!u.is_zero(), "zero utilization");
    let raw = (&Rational::from(budget) / u.value()).round_half_up();
    let p = raw.to_u64().expect("period fits in u64").max(budget).max(1);
    (p, p, Bandwidth::ratio(budget, p))
}

/// The UUNIFAST recurrence on explicit uniform draws (one per element but
/// the last is consumed).
pub fn uunifast_from_uniforms(n: usize, total: f64, draws: &mut impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut sum = total;
    for i in 1..n {
        let r = draws.next().expect("enough uniform draws");
        let next = sum * r.powf(1.0 / (n - i) as f64);
        out.push(sum - next);
        sum = next;
    }
    out.push(sum);
    out
}

/// Snaps to multiples of 10^-6 and puts the exact residual on the largest
/// element. `None` when an element leaves (0, 1).
pub fn snap_to_target(raw: &[f64], target: &Bandwidth) -> Option<Vec<Bandwidth>> {
    let mut snapped: Vec<Rational> = raw
        .iter()
        .map(|&u| Rational::from_f64_snapped(u, SNAP_DENOMINATOR).max(Rational::new(1, SNAP_DENOMINATOR)))
        .collect();
    let sum: Rational = snapped.iter().sum();
    let residual = target.value() - &sum;
    let largest = (0..snapped.len()).max_by(|&a, &b| snapped[a].cmp(&snapped[b]).then(b.cmp(&a)))?;
    snapped[largest] = &snapped[largest] + &residual;
    if snapped.iter().any(|u| !u.is_positive() || *u >= Rational::ONE) {
        return None;
    }
    snapped.into_iter().map(|u| Bandwidth::new(u).ok()).collect()
}

/// `n` utilizations in (0, 1) summing exactly to `target`.
pub fn uunifast_discard<R: Rng + ?Sized>(
    n: usize,
    target: &Bandwidth,
    rng: &mut R,
) -> Result<Vec<Bandwidth>, GenError> {
    if n == 0 {
        return Err(GenError::InvalidConfig("n must be >= 1".into()));
    }
    if target.is_zero() || *target.value() > Rational::from(n as u64) {
        return Err(GenError::InvalidConfig(format!(
            "target {target} unreachable with {n} tasks"
        )));
    }
    let total = target.to_f64();
    for _ in 0..MAX_UUNIFAST_DISCARDS {
        let mut draws = std::iter::repeat_with(|| rng.gen::<f64>());
        let raw = uunifast_from_uniforms(n, total, &mut draws);
        if raw.iter().any(|&u| u >= 1.0) {
            continue;
        }
        if let Some(v) = snap_to_target(&raw, target) {
            return Ok(v);
        }
    }
    Err(GenError::TooManyDiscards(MAX_UUNIFAST_DISCARDS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicTask {
    pub insert_at: Tick,
    #[serde(default)]
    pub remove_at: Option<Tick>,
    pub utilization: Bandwidth,
    /// Fixed execution model for this task instead of a generated one.
    #[serde(default)]
    pub exec_model: Option<ExecModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n: usize,
    pub m: usize,
    pub target_util: Bandwidth,
    pub exec_kind: ExecKind,
    /// Bounds of the two uniform draws that give `(minexec, maxexec)`.
    pub exec_range: (Tick, Tick),
    pub pm: f64,
    pub migrating_util: Bandwidth,
    pub seed: u64,
    pub horizon: Tick,
    pub task_kind: TaskKind,
    pub dynamic_tasks: Vec<DynamicTask>,
    /// Heuristics that must all partition the base set.
    pub require_partition: Vec<Heuristic>,
    /// Apply the global-EDF density bound.
    pub require_global_test: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n: 25,
            m: 4,
            target_util: Bandwidth::ratio(1, 2),
            exec_kind: ExecKind::TwoLevelUniform,
            exec_range: (EXEC_LOW, EXEC_HIGH),
            pm: 0.75,
            migrating_util: Bandwidth::ratio(1, 10),
            seed: 0,
            horizon: 100_000,
            task_kind: TaskKind::Periodic,
            dynamic_tasks: Vec::new(),
            require_partition: Heuristic::ALL.to_vec(),
            require_global_test: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |s: &str| Err(GenError::InvalidConfig(s.to_string()));
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        if self.m == 0 {
            return bad("m must be >= 1");
        }
        if self.target_util.is_zero() || *self.target_util.value() > Rational::from(self.m as u64) {
            return bad("target_util must lie in (0, m]");
        }
        if !(self.pm > 0.0 && self.pm < 1.0) {
            return bad("pm must lie in (0, 1)");
        }
        if self.exec_range.0 == 0 || self.exec_range.0 >= self.exec_range.1 {
            return bad("exec_range must satisfy 1 <= lo < hi");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        for d in &self.dynamic_tasks {
            if d.utilization.is_zero() || d.utilization > Bandwidth::ONE {
                return bad("dynamic task utilization must lie in (0, 1]");
            }
            if let Some(m) = &d.exec_model {
                m.validate()?;
            }
            if d.remove_at.is_some_and(|r| r <= d.insert_at) {
                return bad("dynamic task removed before insertion");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub cores: usize,
    pub horizon: Tick,
    /// Filters the task set passed; recorded for reproducibility.
    pub admission: AdmissionRecord,
    pub config: ScenarioConfig,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub partitioned_by: Vec<Heuristic>,
    /// `"density-bound"` when the global test was applied.
    pub global_test: Option<String>,
    pub discarded_attempts: u64,
}

impl Scenario {
    pub fn base_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.arrival_time == 0)
    }

    pub fn max_period(&self) -> Tick {
        self.tasks.iter().map(|t| t.server.period).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.cores == 0 {
            return Err("cores must be >= 1".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != TaskId(i as u32) {
                return Err(format!("tasks[{i}]: id {} out of sequence", t.id));
            }
            t.server.validate().map_err(|e| format!("tasks[{i}].server: {e}"))?;
            t.exec_model
                .validate()
                .map_err(|e| format!("tasks[{i}].exec_model: {e}"))?;
            if t.period != t.server.period {
                return Err(format!("tasks[{i}]: task period differs from server period"));
            }
            if t.exec_model.budget() != t.server.budget {
                return Err(format!("tasks[{i}]: model budget differs from server budget"));
            }
            if t.departure_time.is_some_and(|d| d <= t.arrival_time) {
                return Err(format!("tasks[{i}]: departure before arrival"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

fn exec_model_for<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<ExecModel, GenError> {
    let (kind, pm) = (cfg.exec_kind, cfg.pm);
    let (lo, hi) = gen_exec_range(rng, cfg.exec_range);
    match kind {
        ExecKind::TwoLevelUniform => ExecModel::two_level(lo, hi, two_level_budget(lo, hi), pm),
        ExecKind::Weibull => ExecModel::weibull_default(lo, hi, pm),
    }
}

fn build_task<R: Rng + ?Sized>(
    id: u32,
    u: &Bandwidth,
    fixed: Option<&ExecModel>,
    cfg: &ScenarioConfig,
    scenario_seed: u64,
    rng: &mut R,
) -> Result<TaskSpec, GenError> {
    let model = match fixed {
        Some(m) => m.clone(),
        None => exec_model_for(cfg, rng)?,
    };
    let budget = derive_budget(&model);
    let (period, server_period, _) = derive_periods(budget, u);
    Ok(TaskSpec {
        id: TaskId(id),
        period,
        kind: cfg.task_kind,
        exec_model: model,
        server: ServerParams::new(budget, server_period, cfg.migrating_util.clone()),
        arrival_time: 0,
        departure_time: None,
        job_seed: derive_seed(scenario_seed, 0x1_0000 + id as u64),
    })
}

/// Why one generation attempt was thrown away.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Discard {
    Partition(Heuristic),
    GlobalTest,
}

impl std::fmt::Display for Discard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Discard::Partition(h) => write!(f, "{h} cannot partition the set"),
            Discard::GlobalTest => f.write_str("global EDF density test failed"),
        }
    }
}

/// One generation attempt drawing from `rng`.
pub fn generate_scenario<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Result<Scenario, Discard>, GenError> {
    cfg.validate()?;
    let utils = uunifast_discard(cfg.n, &cfg.target_util, rng)?;
    let mut tasks = Vec::with_capacity(cfg.n + cfg.dynamic_tasks.len());
    for (i, u) in utils.iter().enumerate() {
        tasks.push(build_task(i as u32, u, None, cfg, cfg.seed, rng)?);
    }
    for (k, d) in cfg.dynamic_tasks.iter().enumerate() {
        let mut t = build_task(
            (cfg.n + k) as u32,
            &d.utilization,
            d.exec_model.as_ref(),
            cfg,
            cfg.seed,
            rng,
        )?;
        t.arrival_time = d.insert_at;
        t.departure_time = d.remove_at;
        tasks.push(t);
    }
    let base: Vec<Bandwidth> = tasks[..cfg.n].iter().map(|t| t.server.utilization.clone()).collect();
    for &h in &cfg.require_partition {
        if partition(&base, cfg.m, h).is_none() {
            return Ok(Err(Discard::Partition(h)));
        }
    }
    if cfg.require_global_test && !global_edf_admission_test(&base, cfg.m) {
        return Ok(Err(Discard::GlobalTest));
    }
    Ok(Ok(Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        seed: cfg.seed,
        cores: cfg.m,
        horizon: cfg.horizon,
        admission: AdmissionRecord {
            partitioned_by: cfg.require_partition.clone(),
            global_test: cfg.require_global_test.then(|| "density-bound".to_string()),
            discarded_attempts: 0,
        },
        config: cfg.clone(),
        tasks,
    }))
}

/// Repeats attempts from `cfg.seed` until one passes the filters.
pub fn generate_with_retries(cfg: &ScenarioConfig) -> Result<Scenario, GenError> {
    let mut rng = rng_from_seed(cfg.seed);
    let mut last = String::new();
    for attempt in 0..MAX_SCENARIO_DISCARDS {
        match generate_scenario(cfg, &mut rng)? {
            Ok(mut s) => {
                s.admission.discarded_attempts = attempt;
                return Ok(s);
            }
            Err(reason) => last = reason.to_string(),
        }
    }
    Err(GenError::Exhausted {
        attempts: MAX_SCENARIO_DISCARDS,
        reason: last,
    })
}

/// Deterministic job stream of one task: demands and inter-arrival gaps
/// come from separate generators so both task kinds see the same demands.
#[derive(Debug, Clone)]
pub struct JobStream {
    demand_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
}

impl JobStream {
    pub fn new(job_seed: u64) -> JobStream {
        JobStream {
            demand_rng: rng_from_seed(derive_seed(job_seed, 1)),
            jitter_rng: rng_from_seed(derive_seed(job_seed, 2)),
        }
    }

    pub fn next_demand(&mut self, model: &ExecModel) -> Tick {
        model.sample(&mut self.demand_rng)
    }

    /// Gap to the next arrival: `T` for periodic tasks, `T + Unif{0..=T/5}`
    /// for sporadic ones.
    pub fn next_gap(&mut self, period: Tick, kind: TaskKind) -> Tick {
        match kind {
            TaskKind::Periodic => period,
            TaskKind::Sporadic => period + self.jitter_rng.gen_range(0..=period / 5),
        }
    }
}
