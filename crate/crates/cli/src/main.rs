use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harvest_core::config::{LoadedConfig, TraceSection};
use harvest_core::ensemble::Ensemble;
use harvest_core::error::{Error, Result};
use harvest_core::pipeline;
use harvest_core::scheduler::QTable;
use harvest_core::sim::{self, ComparisonRow, Policy, PolicySpec, ReportFormat, SimReport};
use harvest_core::store;

#[derive(Parser)]
#[command(
    name = "harvest",
    version,
    about = "Boosted ensembles on an energy-harvesting device"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Project config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the pool, scheduler and simulation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// text, csv or json.
    #[arg(long, default_value = "text")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Train and prune the pool, select the ensemble, write both.
    BuildEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a Q-table for an ensemble; writes qtable.json and curve.csv.
    TrainScheduler {
        #[command(flatten)]
        common: Common,
        /// Build directory, ensemble directory or ensemble.json.
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Power trace CSV to train on instead of the configured one.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Replay a trace under one or more policies; `all` always runs as the baseline.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ensemble: PathBuf,
        /// qtable:PATH, fixed:k or all. Repeatable.
        #[arg(long = "policy", default_value = "all")]
        policies: Vec<PolicySpec>,
        #[arg(long)]
        out: PathBuf,
        /// Power trace CSV to replay instead of the configured one.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Policies evaluated in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare finished simulate runs.
    Report {
        /// Run directories (a simulate --out, or one policy directory in it).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::BuildEnsemble { common, out } => build_ensemble(&common, &out),
        Command::TrainScheduler {
            common,
            ensemble,
            out,
            trace,
        } => train_scheduler(&common, &ensemble, &out, trace.as_deref()),
        Command::Simulate {
            common,
            ensemble,
            policies,
            out,
            trace,
            jobs,
        } => simulate(&common, &ensemble, &policies, &out, trace.as_deref(), jobs),
        Command::Report { runs, format } => report(&runs, format),
    }
}

fn load_config(c: &Common) -> Result<LoadedConfig> {
    let cfg = LoadedConfig::from_file(&c.config)?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn trace_override(path: &Path) -> Result<TraceSection> {
    let path = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "trace file {} not found",
            path.display()
        )));
    }
    Ok(TraceSection::File {
        path,
        efficiency: 1.0,
    })
}

/// Accepts a build directory, an ensemble directory or a manifest path.
fn load_ensemble(path: &Path) -> Result<Ensemble> {
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "ensemble {} not found",
            path.display()
        )));
    }
    let nested = path.join("ensemble");
    Ensemble::load(if nested.is_dir() { &nested } else { path })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_ensemble(common: &Common, out: &Path) -> Result<String> {
    let cfg = load_config(common)?;
    let a = pipeline::build_ensemble(&cfg)?;
    pipeline::write_build(&a, out)?;
    let s = &a.summary;
    Ok(match common.format {
        ReportFormat::Text => pipeline::render_summary(s),
        ReportFormat::Json => {
            let mut t = serde_json::to_string_pretty(s)?;
            t.push('\n');
            t
        }
        ReportFormat::Csv => {
            let mut t = String::from(
                "pool_index,macs,param_count,eval_accuracy,test_accuracy,generation,selected\n",
            );
            for l in &s.learners {
                let _ = writeln!(
                    t,
                    "{},{},{},{},{},{},{}",
                    l.pool_index,
                    l.macs,
                    l.param_count,
                    l.eval_accuracy,
                    l.test_accuracy,
                    l.generation,
                    l.selected
                );
            }
            t
        }
    })
}

fn train_scheduler(
    common: &Common,
    ensemble: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<String> {
    let mut cfg = load_config(common)?;
    if let Some(t) = trace {
        cfg.config.scheduler.trace = Some(trace_override(t)?);
    }
    let ens = load_ensemble(ensemble)?;
    let env = pipeline::scheduler_env(&cfg, &ens)?;
    env.validate()?;
    let (table, curve) = pipeline::train_scheduler(&cfg, &ens)?;
    create_dir(out)?;
    table.save(&out.join("qtable.json"))?;
    write(&out.join("curve.csv"), &pipeline::curve_csv(&curve))?;

    let tail = curve.len().div_ceil(10).max(1);
    let mean = |xs: &[harvest_core::scheduler::EpisodeStats]| {
        (!xs.is_empty()).then(|| xs.iter().map(|e| e.total_reward).sum::<f64>() / xs.len() as f64)
    };
    let first = mean(&curve[..tail.min(curve.len())]);
    let last = mean(&curve[curve.len().saturating_sub(tail)..]);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    Ok(match common.format {
        ReportFormat::Text => format!(
            "{} episodes, N = {}; mean episode reward {} (first 10%) -> {} (last 10%)\n",
            curve.len(),
            table.ensemble_size,
            fmt(first),
            fmt(last),
        ),
        ReportFormat::Csv => format!(
            "episodes,ensemble_size,first_reward,last_reward\n{},{},{},{}\n",
            curve.len(),
            table.ensemble_size,
            fmt(first),
            fmt(last)
        ),
        ReportFormat::Json => {
            let v = serde_json::json!({
                "episodes": curve.len(),
                "ensemble_size": table.ensemble_size,
                "first_reward": first,
                "last_reward": last,
            });
            let mut t = serde_json::to_string_pretty(&v)?;
            t.push('\n');
            t
        }
    })
}

/// Directory names for each policy, made unique in order.
fn run_names(policies: &[Policy]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for p in policies {
        let base = p.label().replace(':', "-");
        let mut name = base.clone();
        let mut i = 2;
        while names.contains(&name) {
            name = format!("{base}-{i}");
            i += 1;
        }
        names.push(name);
    }
    names
}

fn simulate(
    common: &Common,
    ensemble: &Path,
    specs: &[PolicySpec],
    out: &Path,
    trace: Option<&Path>,
    jobs: usize,
) -> Result<String> {
    if jobs == 0 {
        return Err(Error::InvalidInput("--jobs must be at least 1".into()));
    }
    let mut cfg = load_config(common)?;
    if let Some(t) = trace {
        cfg.config.energy.trace = trace_override(t)?;
    }
    let ens = load_ensemble(ensemble)?;
    let mut policies = vec![Policy::All];
    for s in specs {
        let p = match s {
            PolicySpec::All => continue,
            PolicySpec::Fixed(k) => Policy::Fixed(*k),
            PolicySpec::QTable(path) => {
                Policy::QTable(Box::new(QTable::load_for(path, ens.len())?))
            }
        };
        policies.push(p);
    }
    let eval_trace = cfg.eval_trace()?;
    let sim_cfg = cfg.sim_config();
    sim_cfg.validate(&eval_trace)?;
    let dataset = cfg.dataset()?;
    let samples = pipeline::request_samples(&cfg, &dataset);

    let run_one = |p: &Policy| sim::run(&sim_cfg, &ens, &eval_trace, &samples, p).map(|o| o.report);
    let mut results: Vec<Option<Result<SimReport>>> = policies.iter().map(|_| None).collect();
    let jobs = jobs.min(policies.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let policies = &policies;
                let run_one = &run_one;
                scope.spawn(move || {
                    (w..policies.len())
                        .step_by(jobs)
                        .map(|i| (i, run_one(&policies[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("simulation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r.expect("every policy evaluated")?);
    }
    let base = reports[0].clone();
    for r in &mut reports {
        r.compare_with(&base);
    }

    create_dir(out)?;
    let names = run_names(&policies);
    let mut rows = Vec::new();
    for (name, r) in names.iter().zip(&reports) {
        let dir = out.join(name);
        create_dir(&dir)?;
        write(
            &dir.join("report.json"),
            &sim::render(r, ReportFormat::Json)?,
        )?;
        write(
            &dir.join("report.txt"),
            &sim::render(r, ReportFormat::Text)?,
        )?;
        write(&dir.join("report.csv"), &sim::render(r, ReportFormat::Csv)?)?;
        sim::write_events_csv(&r.events, &dir.join("events.csv"))?;
        rows.push(ComparisonRow::from_report(name.clone(), r));
    }
    sim::render_comparison(&rows, common.format)
}

fn report(runs: &[PathBuf], format: ReportFormat) -> Result<String> {
    let mut rows = Vec::new();
    for dir in runs {
        let label = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!(
                "run directory {} not found",
                dir.display()
            )));
        }
        let direct = dir.join("report.json");
        if direct.is_file() {
            let r: SimReport = store::read_json(&direct)?;
            rows.push(ComparisonRow::from_report(label, &r));
            continue;
        }
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("report.json").is_file())
            .collect();
        subs.sort();
        if subs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no report.json under {}",
                dir.display()
            )));
        }
        for s in subs {
            let r: SimReport = store::read_json(&s.join("report.json"))?;
            let name = s
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            rows.push(ComparisonRow::from_report(format!("{label}/{name}"), &r));
        }
    }
    sim::render_comparison(&rows, format)
}
