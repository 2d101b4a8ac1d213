//! Sweeps over total utilization and the dynamic insertion demo, with CSV
//! output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{BalancerConfig, Heuristic};
use crate::engine::{run_simulation, Metrics, Policy, SimOptions, TimeSeries};
use crate::error::{Error, GenError, SimError};
use crate::migration::MigrationConfig;
use crate::model::{Bandwidth, TaskKind, Tick};
use crate::rational::Rational;
use crate::workload::{derive_seed, generate_with_retries, DynamicTask, ExecKind, ExecModel, Scenario, ScenarioConfig};

pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// Decimal with 9 significant digits, no exponent.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Mean and normal-approximation 95% half-width (`1.96 s / sqrt(n)`).
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub utilizations: Vec<Rational>,
    pub scenarios_per_point: usize,
    pub policies: Vec<String>,
    /// Temporary migration for partitioned policies.
    pub migration: bool,
    /// Permanent migration for partitioned policies (`wf-a` never balances).
    pub balancing: bool,
    pub window_size: usize,
    pub miss_threshold: Rational,
    pub horizon: Tick,
    pub master_seed: u64,
    pub exec_kind: ExecKind,
    pub exec_range: (Tick, Tick),
    pub pm: f64,
    pub migrating_util: Bandwidth,
    pub epsilon: Rational,
    pub task_kind: TaskKind,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            schema_version: SPEC_SCHEMA_VERSION,
            name: "sweep".into(),
            m: 4,
            n: 25,
            utilizations: (1..=6).map(|k| Rational::new(k, 2)).collect(),
            scenarios_per_point: 100,
            policies: ["g-seq", "g-par", "ff", "bf", "wf"].map(String::from).to_vec(),
            migration: true,
            balancing: false,
            window_size: 20,
            miss_threshold: Rational::new(1, 10),
            horizon: 100_000,
            master_seed: 1,
            exec_kind: ExecKind::TwoLevelUniform,
            exec_range: (5, 200),
            pm: 0.75,
            migrating_util: Bandwidth::ratio(1, 10),
            epsilon: Rational::from(2u64),
            task_kind: TaskKind::Periodic,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<Vec<Policy>, String> {
        if self.schema_version != SPEC_SCHEMA_VERSION {
            return Err(format!("schema_version: unsupported value {}", self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err("name: must be a non-empty file stem".into());
        }
        if self.utilizations.is_empty() {
            return Err("utilizations: grid must not be empty".into());
        }
        if self.scenarios_per_point == 0 {
            return Err("scenarios_per_point: must be >= 1".into());
        }
        if self.m == 0 || self.n == 0 {
            return Err("m, n: must be >= 1".into());
        }
        if self.policies.is_empty() {
            return Err("policies: must not be empty".into());
        }
        for (i, u) in self.utilizations.iter().enumerate() {
            if !u.is_positive() || *u > Rational::from(self.m as u64) {
                return Err(format!("utilizations[{i}]: {u} outside (0, m]"));
            }
        }
        self.policies
            .iter()
            .enumerate()
            .map(|(i, p)| Policy::parse(p, self.migration, self.balancing).map_err(|e| format!("policies[{i}]: {e}")))
            .collect()
    }

    fn scenario_config(&self, u: &Rational, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n: self.n,
            m: self.m,
            target_util: Bandwidth::new(u.clone()).expect("validated utilization"),
            exec_kind: self.exec_kind,
            exec_range: self.exec_range,
            pm: self.pm,
            migrating_util: self.migrating_util.clone(),
            seed,
            horizon: self.horizon,
            task_kind: self.task_kind,
            dynamic_tasks: Vec::new(),
            require_partition: Heuristic::ALL.to_vec(),
            require_global_test: true,
        }
    }

    fn sim_options(&self, debug: bool) -> SimOptions {
        SimOptions {
            horizon: self.horizon,
            debug_asserts: debug,
            migration: MigrationConfig {
                epsilon: self.epsilon.clone(),
                ..MigrationConfig::default()
            },
            balancer: BalancerConfig {
                window_size: self.window_size,
                miss_threshold: self.miss_threshold.clone(),
                ..BalancerConfig::default()
            },
            ..SimOptions::default()
        }
    }
}

/// Per-policy statistics at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyStats {
    pub policy: String,
    pub migrations_per_job: f64,
    pub migrations_ci: f64,
    pub miss_ratio: f64,
    pub miss_ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub total_util: Rational,
    /// `None` when no scenario could be generated at this point.
    pub stats: Option<Vec<PolicyStats>>,
    pub scenarios: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub policies: Vec<String>,
    pub points: Vec<PointResult>,
}

impl SweepResult {
    pub fn stat(&self, point: usize, policy: &str) -> Option<&PolicyStats> {
        self.points[point].stats.as_ref()?.iter().find(|s| s.policy == policy)
    }

    fn csv(&self, value: impl Fn(&PolicyStats) -> (f64, f64)) -> String {
        let mut out = String::from("total_util");
        for p in &self.policies {
            write!(out, ",{p}").unwrap();
        }
        for p in &self.policies {
            write!(out, ",ci_{p}").unwrap();
        }
        out.push('\n');
        for pt in &self.points {
            out.push_str(&fmt_sig9(pt.total_util.to_f64()));
            match &pt.stats {
                Some(stats) => {
                    let cells: Vec<(f64, f64)> = stats.iter().map(&value).collect();
                    for (m, _) in &cells {
                        write!(out, ",{}", fmt_sig9(*m)).unwrap();
                    }
                    for (_, c) in &cells {
                        write!(out, ",{}", fmt_sig9(*c)).unwrap();
                    }
                }
                None => out.push_str(&",".repeat(2 * self.policies.len())),
            }
            out.push('\n');
        }
        out
    }

    pub fn migrations_csv(&self) -> String {
        self.csv(|s| (s.migrations_per_job, s.migrations_ci))
    }

    pub fn miss_ratio_csv(&self) -> String {
        self.csv(|s| (s.miss_ratio, s.miss_ci))
    }
}

fn run_in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    let pool = b.build().map_err(|e| Error::Config {
        path: "--jobs".into(),
        message: e.to_string(),
    })?;
    Ok(pool.install(f))
}

/// Generates every scenario of the grid and runs all policies on each one.
/// Results are reduced in scenario-index order regardless of scheduling.
pub fn run_sweep(spec: &SweepSpec, jobs: Option<usize>, debug: bool) -> Result<SweepResult, Error> {
    let policies = spec.validate().map_err(|message| Error::Config {
        path: spec.name.clone(),
        message,
    })?;
    let opts = spec.sim_options(debug);
    let k = spec.scenarios_per_point;
    let work: Vec<(usize, usize)> = (0..spec.utilizations.len())
        .flat_map(|p| (0..k).map(move |i| (p, i)))
        .collect();

    type Outcome = Result<Result<Vec<Metrics>, GenError>, SimError>;
    let outcomes: Vec<Outcome> = run_in_pool(jobs, || {
        work.par_iter()
            .map(|&(p, i)| {
                let seed = derive_seed(derive_seed(spec.master_seed, p as u64), i as u64);
                let cfg = spec.scenario_config(&spec.utilizations[p], seed);
                let scenario = match generate_with_retries(&cfg) {
                    Ok(s) => s,
                    Err(e) => return Ok(Err(e)),
                };
                policies
                    .iter()
                    .map(|&pol| run_simulation(&scenario, pol, &opts).map(|r| r.metrics))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Ok)
            })
            .collect()
    })?;

    let mut points = Vec::with_capacity(spec.utilizations.len());
    let mut outcomes = outcomes.into_iter();
    for u in &spec.utilizations {
        let mut runs: Vec<Vec<Metrics>> = Vec::new();
        let mut warning = None;
        for o in outcomes.by_ref().take(k) {
            match o? {
                Ok(ms) => runs.push(ms),
                Err(e) => warning = Some(format!("generation failed at total utilization {u}: {e}")),
            }
        }
        let stats = (warning.is_none() && !runs.is_empty()).then(|| {
            policies
                .iter()
                .enumerate()
                .map(|(q, _)| {
                    let mig: Vec<f64> = runs.iter().map(|r| r[q].migrations_per_job()).collect();
                    let miss: Vec<f64> = runs.iter().map(|r| r[q].miss_ratio()).collect();
                    let (mm, mc) = mean_ci(&mig);
                    let (sm, sc) = mean_ci(&miss);
                    PolicyStats {
                        policy: spec.policies[q].clone(),
                        migrations_per_job: mm,
                        migrations_ci: mc,
                        miss_ratio: sm,
                        miss_ci: sc,
                    }
                })
                .collect()
        });
        points.push(PointResult {
            total_util: u.clone(),
            scenarios: runs.len(),
            stats,
            warning,
        });
    }
    Ok(SweepResult {
        name: spec.name.clone(),
        policies: spec.policies.clone(),
        points,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), Error> {
    fs::write(path, content).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `{name}_migrations.csv`, `{name}_miss_ratio.csv` and `{name}.log`.
pub fn write_sweep(result: &SweepResult, spec: &SweepSpec, dir: &Path) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mig = dir.join(format!("{}_migrations.csv", result.name));
    let miss = dir.join(format!("{}_miss_ratio.csv", result.name));
    let log = dir.join(format!("{}.log", result.name));
    write_file(&mig, &result.migrations_csv())?;
    write_file(&miss, &result.miss_ratio_csv())?;
    let mut text = format!(
        "sweep {}: m={} n={} scenarios_per_point={} horizon={} master_seed={} migration={} balancing={}\n",
        spec.name,
        spec.m,
        spec.n,
        spec.scenarios_per_point,
        spec.horizon,
        spec.master_seed,
        spec.migration,
        spec.balancing
    );
    for pt in &result.points {
        match &pt.warning {
            Some(w) => writeln!(text, "warning: {w}").unwrap(),
            None => writeln!(text, "point {}: {} scenarios", pt.total_util, pt.scenarios).unwrap(),
        }
    }
    write_file(&log, &text)?;
    Ok(vec![mig, miss, log])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicSpec {
    pub schema_version: u32,
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub base_util: Bandwidth,
    pub heuristic: Heuristic,
    pub insert_at: Tick,
    pub remove_at: Tick,
    pub insert_util: Bandwidth,
    /// Execution-time bounds; shorter than the sweep default so that a
    /// full miss window fits inside the insertion interval.
    pub exec_range: (Tick, Tick),
    /// Execution model of the inserted task; the default demands twice its
    /// budget on every job.
    pub insert_exec: ExecModel,
    pub horizon: Tick,
    pub seed: u64,
    pub window_size: usize,
    pub miss_threshold: Rational,
    pub ema_alpha: f64,
    pub sample_stride: Tick,
    pub migration: bool,
}

impl Default for DynamicSpec {
    fn default() -> Self {
        DynamicSpec {
            schema_version: SPEC_SCHEMA_VERSION,
            name: "dynamic".into(),
            m: 2,
            n: 6,
            base_util: Bandwidth::ratio(6, 5),
            heuristic: Heuristic::WorstFit,
            insert_at: 2000,
            remove_at: 6000,
            insert_util: Bandwidth::ratio(3, 10),
            exec_range: (2, 20),
            insert_exec: ExecModel::Constant { value: 20, budget: 10 },
            horizon: 10_000,
            seed: 1,
            window_size: 20,
            miss_threshold: Rational::new(1, 10),
            ema_alpha: 1.0 / 200.0,
            sample_stride: 1,
            migration: true,
        }
    }
}

impl DynamicSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SPEC_SCHEMA_VERSION {
            return Err(format!("schema_version: unsupported value {}", self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err("name: must be a non-empty file stem".into());
        }
        if self.remove_at <= self.insert_at {
            return Err("remove_at: must follow insert_at".into());
        }
        if self.sample_stride == 0 {
            return Err("sample_stride: must be >= 1".into());
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err("ema_alpha: must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario, GenError> {
        generate_with_retries(&ScenarioConfig {
            n: self.n,
            m: self.m,
            target_util: self.base_util.clone(),
            exec_range: self.exec_range,
            seed: self.seed,
            horizon: self.horizon,
            dynamic_tasks: vec![DynamicTask {
                insert_at: self.insert_at,
                remove_at: Some(self.remove_at),
                utilization: self.insert_util.clone(),
                exec_model: Some(self.insert_exec.clone()),
            }],
            require_partition: vec![self.heuristic],
            require_global_test: false,
            ..ScenarioConfig::default()
        })
    }

    fn options(&self, debug: bool) -> SimOptions {
        SimOptions {
            horizon: self.horizon,
            debug_asserts: debug,
            sample_stride: Some(self.sample_stride),
            ema_alpha: self.ema_alpha,
            series_window: self.window_size,
            balancer: BalancerConfig {
                window_size: self.window_size,
                miss_threshold: self.miss_threshold.clone(),
                ..BalancerConfig::default()
            },
            ..SimOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicRun {
    pub balancing: bool,
    pub metrics: Metrics,
    pub series: TimeSeries,
}

#[derive(Debug, Clone)]
pub struct DynamicResult {
    pub on: DynamicRun,
    pub off: DynamicRun,
}

impl DynamicResult {
    /// Time-averaged `|EMA core0 - EMA core1|` over `[from, to]`.
    pub fn ema_gaps(&self, from: Tick, to: Tick) -> (Option<f64>, Option<f64>) {
        (
            self.on.series.mean_ema_gap(0, 1, from, to),
            self.off.series.mean_ema_gap(0, 1, from, to),
        )
    }
}

/// Runs the insertion scenario twice, with and without balancing, on the
/// same task set and job streams.
pub fn run_dynamic(spec: &DynamicSpec, debug: bool) -> Result<DynamicResult, Error> {
    spec.validate().map_err(|message| Error::Config {
        path: spec.name.clone(),
        message,
    })?;
    let scenario = spec.scenario()?;
    let opts = spec.options(debug);
    let run = |balancing: bool| -> Result<DynamicRun, Error> {
        let policy = Policy::partitioned(spec.heuristic, spec.migration, balancing);
        let r = run_simulation(&scenario, policy, &opts)?;
        Ok(DynamicRun {
            balancing,
            metrics: r.metrics,
            series: r.series.expect("sampling enabled"),
        })
    };
    Ok(DynamicResult {
        on: run(true)?,
        off: run(false)?,
    })
}

pub fn dynamic_csv(spec: &DynamicSpec, run: &DynamicRun) -> String {
    let mut out = String::new();
    writeln!(out, "# name: {}", spec.name).unwrap();
    writeln!(out, "# balancing: {}", if run.balancing { "on" } else { "off" }).unwrap();
    writeln!(out, "# heuristic: {}", spec.heuristic).unwrap();
    writeln!(
        out,
        "# insert: u={} at t={}, removed at t={}",
        spec.insert_util, spec.insert_at, spec.remove_at
    )
    .unwrap();
    writeln!(out, "# rejections: {}", run.metrics.rejections).unwrap();
    writeln!(
        out,
        "# jobs_missed: {} of {}",
        run.metrics.jobs_missed, run.metrics.jobs_total
    )
    .unwrap();
    if run.metrics.rejections > 0 {
        writeln!(out, "# inserted task rejected").unwrap();
    }
    writeln!(
        out,
        "# temp_migrations: {} perm_migrations: {}",
        run.metrics.temp_migrations, run.metrics.perm_migrations
    )
    .unwrap();
    let m = run.series.ema.len();
    out.push('t');
    for j in 0..m {
        write!(out, ",ema_active_core{j}").unwrap();
    }
    for j in 0..m {
        write!(out, ",miss_ratio_core{j}").unwrap();
    }
    out.push('\n');
    for (k, t) in run.series.t.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for j in 0..m {
            write!(out, ",{}", fmt_sig9(run.series.ema[j][k])).unwrap();
        }
        for j in 0..m {
            write!(out, ",{}", fmt_sig9(run.series.miss_ratio[j][k])).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes `{name}_balancing_on.csv` and `{name}_balancing_off.csv`.
pub fn write_dynamic(result: &DynamicResult, spec: &DynamicSpec, dir: &Path) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths = Vec::new();
    for run in [&result.on, &result.off] {
        let tag = if run.balancing { "on" } else { "off" };
        let path = dir.join(format!("{}_balancing_{tag}.csv", spec.name));
        write_file(&path, &dynamic_csv(spec, run))?;
        paths.push(path);
    }
    Ok(paths)
}
