use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};

use zwsim::engine::{self, EngineError};
use zwsim::report::{self, MetricRow, RunReport};
use zwsim::scenario::{load_scenario, Scenario};
use zwsim::presets;

const OUT_DIR_ENV: &str = "ZWSIM_OUT_DIR";

/// Exit statuses, ordered so the most serious failure of a batch wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Status {
    Ok = 0,
    Validation = 1,
    Invariant = 2,
    Io = 3,
}

#[derive(Parser)]
#[command(name = "zwsim", version, about = "Z-Wave battery-drain and DoS attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check scenario files without running them.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run scenario files; several files run concurrently.
    Run {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Output root; each run writes to <out>/<scenario name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the summary of each run.
        #[arg(long)]
        summary: bool,
    },
    /// Summarize the outputs of a finished run.
    Report { dir: PathBuf },
    /// Run, print or list built-in scenarios. A prefix such as `fig8` selects a group.
    Preset {
        name: Option<String>,
        #[arg(long)]
        list: bool,
        /// Print the scenario text instead of running it.
        #[arg(long)]
        print: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        summary: bool,
    },
}

fn out_root(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
}

fn run_dir(root: &Option<PathBuf>, s: &Scenario) -> PathBuf {
    match (root, &s.output_dir) {
        (Some(r), _) => r.join(&s.name),
        (None, Some(d)) => d.clone(),
        (None, None) => Path::new("runs").join(&s.name),
    }
}

fn load(path: &Path) -> Result<Scenario, Status> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        Status::Io
    })?;
    load_scenario(&text).map_err(|e| {
        for d in e.diagnostics() {
            eprintln!("{}: {d}", path.display());
        }
        Status::Validation
    })
}

fn run_all(scenarios: Vec<Scenario>, root: Option<PathBuf>, summary: bool) -> Status {
    let results: Vec<(String, PathBuf, Result<RunReport, EngineError>)> = thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| {
                let dir = run_dir(&root, s);
                scope.spawn(move || {
                    let r = engine::run_to_dir(s, &dir);
                    (s.name.clone(), dir, r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut status = Status::Ok;
    for (name, dir, r) in results {
        match r {
            Ok(rep) => {
                println!(
                    "{name}: ok, {} events, hash {} -> {}",
                    rep.events,
                    rep.log_hash,
                    dir.display()
                );
                if summary {
                    println!("{}", report::summarize(&rep));
                }
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                status = status.max(match e {
                    EngineError::Invalid(_) => Status::Validation,
                    EngineError::Invariant { .. } => Status::Invariant,
                    EngineError::Io(_) => Status::Io,
                });
            }
        }
    }
    status
}

/// Energy implied by the metrics rows for each node, in mJ.
fn metrics_energy(dir: &Path) -> Result<Vec<(String, f64)>, csv::Error> {
    let mut reader = csv::Reader::from_path(dir.join("metrics.csv"))?;
    let mut totals: Vec<(String, f64)> = Vec::new();
    let mut last_t: Vec<(String, f64)> = Vec::new();
    for row in reader.deserialize::<MetricRow>() {
        let row = row?;
        let Some(p) = row.avg_power_mw else { continue };
        let prev = match last_t.iter_mut().find(|(n, _)| *n == row.node) {
            Some((_, t)) => std::mem::replace(t, row.time_s),
            None => {
                last_t.push((row.node.clone(), row.time_s));
                0.0
            }
        };
        let e = p * (row.time_s - prev);
        match totals.iter_mut().find(|(n, _)| *n == row.node) {
            Some((_, t)) => *t += e,
            None => totals.push((row.node, e)),
        }
    }
    Ok(totals)
}

fn report_dir(dir: &Path) -> Status {
    let text = match fs::read_to_string(dir.join("report.json")) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", dir.join("report.json").display());
            return Status::Io;
        }
    };
    let rep: RunReport = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: malformed report: {e}", dir.display());
            return Status::Io;
        }
    };
    print!("{}", report::summarize(&rep));
    match metrics_energy(dir) {
        Ok(totals) => {
            for d in &rep.devices {
                let label = format!("dev{:02x}", d.node_id);
                if let Some((_, e)) = totals.iter().find(|(n, _)| *n == label) {
                    let err = if d.energy_mj > 0.0 {
                        (e - d.energy_mj).abs() / d.energy_mj
                    } else {
                        0.0
                    };
                    println!(
                        "metrics check {label}: {e:.1} mJ from metrics.csv vs {:.1} mJ reported ({:.4}%)",
                        d.energy_mj,
                        err * 100.0
                    );
                }
            }
            Status::Ok
        }
        Err(e) => {
            eprintln!("{}: metrics.csv unreadable: {e}", dir.display());
            Status::Io
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Status::Validation } else { Status::Ok };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let status = match cli.command {
        Command::Validate { files } => {
            let mut status = Status::Ok;
            for f in &files {
                match load(f) {
                    Ok(s) => println!("{}: ok ({}, {} devices)", f.display(), s.name, s.devices.len()),
                    Err(st) => status = status.max(st),
                }
            }
            status
        }
        Command::Run { files, out, summary } => {
            let mut scenarios = Vec::new();
            let mut status = Status::Ok;
            for f in &files {
                match load(f) {
                    Ok(s) => scenarios.push(s),
                    Err(st) => status = status.max(st),
                }
            }
            if status != Status::Ok {
                return ExitCode::from(status as u8);
            }
            run_all(scenarios, out_root(out), summary)
        }
        Command::Report { dir } => report_dir(&dir),
        Command::Preset {
            name,
            list,
            print,
            out,
            summary,
        } => {
            if list || name.is_none() {
                for p in presets::all() {
                    println!("{:<24} {}", p.name, p.summary);
                }
                Status::Ok
            } else {
                let name = name.unwrap_or_default();
                let chosen = presets::group(&name);
                if chosen.is_empty() {
                    eprintln!("unknown preset `{name}`; try --list");
                    Status::Validation
                } else if print {
                    for p in &chosen {
                        print!("{}", p.text);
                        println!();
                    }
                    Status::Ok
                } else {
                    let root = out_root(out).or_else(|| Some(PathBuf::from("runs")));
                    run_all(chosen.iter().map(|p| p.scenario()).collect(), root, summary)
                }
            }
        }
    };
    ExitCode::from(status as u8)
}
