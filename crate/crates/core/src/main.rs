use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use grubsim::engine::{run_simulation, write_ndjson, Policy, SimOptions};
use grubsim::error::{Error, SimError};
use grubsim::experiments::{run_dynamic, run_sweep, write_dynamic, write_sweep, DynamicSpec, SweepSpec};
use grubsim::model::Tick;
use grubsim::workload::{generate_with_retries, Scenario, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "grubsim",
    version,
    about = "Partitioned and global GRUB reservation simulator"
)]
struct Cli {
    /// Overrides the seed in the spec, config or generator input.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Check every invariant after every event.
    #[arg(long, global = true)]
    debug_asserts: bool,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for sweeps (defaults to all hardware threads).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a utilization sweep and write one CSV per metric.
    Sweep { spec: PathBuf },
    /// Run the insertion/removal demo with balancing on and off.
    Dynamic { config: PathBuf },
    /// Simulate one scenario under one policy; metrics go to stdout as JSON.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        policy: String,
        #[arg(long, value_enum, default_value = "on")]
        migration: Switch,
        #[arg(long, value_enum, default_value = "off")]
        balancing: Switch,
        /// Write the event trace (one JSON record per line) to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<Tick>,
    },
    /// Generate a scenario from a generator config.
    Generate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

struct Failure {
    kind: &'static str,
    msg: String,
    detail: Vec<String>,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure {
            kind: "config",
            msg: msg.into(),
            detail: Vec::new(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            "config" | "usage" => 2,
            "invariant" => 3,
            _ => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Sim(SimError::Invariant { tail, .. }) => Failure {
                kind: "invariant",
                msg,
                detail: tail,
            },
            Error::Sim(SimError::Config(_)) | Error::Config { .. } => Failure::config(msg),
            Error::Gen(_) => Failure {
                kind: "generation",
                msg,
                detail: Vec::new(),
            },
            Error::Sim(_) => Failure {
                kind: "simulation",
                msg,
                detail: Vec::new(),
            },
            Error::Io { .. } => Failure {
                kind: "io",
                msg,
                detail: Vec::new(),
            },
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Error::from(e).into()
    }
}

fn io_err(path: &Path, source: io::Error) -> Failure {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
    .into()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Failure::config(format!("{}: field `{field}`: {}", path.display(), e.inner()))
    })
}

fn write_out(path: &Path, content: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, content).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sweep { spec } => {
            let mut s: SweepSpec = read_json(&spec)?;
            if let Some(seed) = cli.seed {
                s.master_seed = seed;
            }
            let result = run_sweep(&s, cli.jobs, cli.debug_asserts)?;
            for p in result.points.iter().filter_map(|p| p.warning.as_ref()) {
                eprintln!("warning: {p}");
            }
            for path in write_sweep(&result, &s, &cli.out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Dynamic { config } => {
            let mut s: DynamicSpec = read_json(&config)?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let result = run_dynamic(&s, cli.debug_asserts)?;
            for path in write_dynamic(&result, &s, &cli.out_dir)? {
                println!("{}", path.display());
            }
            let (on, off) = result.ema_gaps(s.insert_at + 500, s.remove_at);
            let show = |g: Option<f64>| g.map_or("n/a".to_string(), |g| format!("{g:.6}"));
            println!("mean_ema_gap on={} off={}", show(on), show(off));
        }
        Command::Simulate {
            scenario,
            policy,
            migration,
            balancing,
            trace,
            horizon,
        } => {
            let sc: Scenario = read_json(&scenario)?;
            let policy = Policy::parse(&policy, migration.on(), balancing.on())
                .map_err(|m| Failure::config(format!("--policy: {m}")))?;
            let opts = SimOptions {
                horizon: horizon.unwrap_or(sc.horizon),
                debug_asserts: cli.debug_asserts,
                record_trace: trace.is_some(),
                ..SimOptions::default()
            };
            let result = run_simulation(&sc, policy, &opts)?;
            if let (Some(path), Some(records)) = (trace, &result.trace) {
                let mut buf = Vec::new();
                write_ndjson(records, &mut buf).expect("write to memory");
                write_out(&path, std::str::from_utf8(&buf).expect("utf-8 trace"))?;
            }
            let line = serde_json::json!({ "policy": policy.to_string(), "metrics": result.metrics });
            println!("{line}");
        }
        Command::Generate { config, out } => {
            let mut cfg: ScenarioConfig = read_json(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.validate()
                .map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
            let sc = generate_with_retries(&cfg).map_err(Error::from)?;
            write_out(&out, &(sc.to_json() + "\n"))?;
            println!("{}", out.display());
        }
        Command::Validate { scenario } => {
            let sc: Scenario = read_json(&scenario)?;
            sc.validate()
                .map_err(|m| Failure::config(format!("{}: {m}", scenario.display())))?;
            println!("ok: {} tasks on {} cores", sc.tasks.len(), sc.cores);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("error: kind=usage msg={:?}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut err = io::stderr().lock();
            let _ = writeln!(err, "error: kind={} msg={:?}", f.kind, f.msg);
            for d in &f.detail {
                let _ = writeln!(err, "  {d}");
            }
            ExitCode::from(f.exit_code())
        }
    }
}
