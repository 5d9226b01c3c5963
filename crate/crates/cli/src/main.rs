use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smrsim_core::harness::{
    builtin, builtin_names, check_run, compare_modes, comparison_csv, comparison_table, load, run_campaign,
    ConfigError, Scenario,
};
use smrsim_core::lincheck::read_history;
use smrsim_core::trace::read_jsonl;
use smrsim_core::{HistoryEntry, PatchMode, TraceRecord};

#[derive(Parser)]
#[command(
    name = "smrsim",
    version,
    about = "Deterministic BFT state machine replication simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Replace the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the scenario's horizon (simulated time units).
    #[arg(long)]
    horizon: Option<u64>,
}

impl Overrides {
    fn apply(&self, s: &mut Scenario) -> Result<(), ConfigError> {
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(h) = self.horizon {
            s.horizon = h;
        }
        s.validate().map_err(|message| ConfigError::Invalid {
            origin: "command line".into(),
            message,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, write its artifacts and check them.
    Run {
        /// Shipped scenario name or path to a scenario file.
        scenario: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Replace the patch mode.
        #[arg(long)]
        mode: Option<PatchMode>,
        /// Output directory for trace.jsonl, metrics.csv and history.jsonl.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run scenarios under several patch modes and tabulate the results.
    Compare {
        #[arg(required = true)]
        scenarios: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "baseline,broadcast,forward")]
        modes: Vec<PatchMode>,
        /// Repeat every run with this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Also write the table as CSV into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check artifacts written by `run`.
    Check {
        scenario: String,
        /// Directory holding trace.jsonl, history.jsonl and optionally metrics.csv.
        #[arg(long)]
        dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List the shipped scenarios.
    ListScenarios,
    /// Randomized safety campaign over seeds and patch modes.
    Campaign {
        #[arg(long, default_value_t = 100)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "broadcast,forward")]
        modes: Vec<PatchMode>,
    },
}

enum Failure {
    Config(String),
    Check,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_with(name: &str, o: &Overrides) -> Result<Scenario, Failure> {
    let mut s = load(name)?;
    o.apply(&mut s)?;
    Ok(s)
}

/// Trace, history and (if present) the metrics file of a run directory.
type Artifacts = (Vec<TraceRecord>, Vec<HistoryEntry>, Option<String>);

fn read_dir_artifacts(dir: &Path) -> Result<Artifacts, Failure> {
    let open = |f: &str| std::fs::File::open(dir.join(f)).map(BufReader::new);
    let trace = read_jsonl(open("trace.jsonl")?)?;
    let history = read_history(open("history.jsonl")?)?;
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).ok();
    Ok((trace, history, metrics))
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::ListScenarios => {
            for name in builtin_names() {
                let s = builtin(name)?;
                println!("{name:<24} {}", s.description);
            }
            Ok(())
        }
        Command::Run {
            scenario,
            overrides,
            mode,
            out,
        } => {
            let mut s = load_with(&scenario, &overrides)?;
            if let Some(m) = mode {
                s.replica.mode = m;
            }
            let run = smrsim_core::harness::run_scenario(&s);
            run.persist(&out)?;
            let m = &run.metrics;
            println!(
                "{}: mode={} seed={} end={} events={} ops={}/{} regency_changes={}",
                s.name,
                s.replica.mode,
                s.seed,
                run.end_time,
                run.events,
                m.completed(),
                m.invoked(),
                m.regency_changes
            );
            let csv = m.to_csv();
            let report = check_run(&s, Some(&csv), &run.history, &run.trace);
            print!("{report}");
            println!("artifacts in {}", out.display());
            if report.ok() {
                Ok(())
            } else {
                Err(Failure::Check)
            }
        }
        Command::Check {
            scenario,
            dir,
            overrides,
        } => {
            let s = load_with(&scenario, &overrides)?;
            let (trace, history, metrics) = read_dir_artifacts(&dir)?;
            let report = check_run(&s, metrics.as_deref(), &history, &trace);
            print!("{report}");
            if report.ok() {
                Ok(())
            } else {
                Err(Failure::Check)
            }
        }
        Command::Compare {
            scenarios,
            overrides,
            modes,
            seeds,
            out,
        } => {
            let mut matrix = Vec::new();
            for name in &scenarios {
                let base = load_with(name, &overrides)?;
                for i in 0..seeds {
                    let mut s = base.clone();
                    s.seed = base.seed + i;
                    matrix.push(s);
                }
            }
            let rows = compare_modes(&matrix, &modes);
            print!("{}", comparison_table(&rows));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("comparison.csv"), comparison_csv(&rows))?;
            }
            Ok(())
        }
        Command::Campaign { runs, seed, modes } => {
            let report = run_campaign(seed, runs, &modes);
            println!("{}", report.summary());
            if report.conflicting_instances()
                + report.double_decides()
                + report.execution_errors()
                + report.checkpoint_mismatches()
                > 0
                || !report.linearizability_failures().is_empty()
            {
                Err(Failure::Check)
            } else {
                Ok(())
            }
        }
    }
}
