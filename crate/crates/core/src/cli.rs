//! Command-line front end. [`run`] returns the process exit code so the
//! binary stays a one-liner and tests can drive it in-process.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::controller::Expert;
use crate::dataset::{load_dataset, record_episodes, save_dataset, seed_range, Dataset, Terminal};
use crate::eval::{bench_latency, count_goals, export_trajectory, EvalSummary, LATENCY_GATE};
use crate::policy::{load_model, save_model, Model};
use crate::train::{eval_error, format_summary, train_model, ModelKind, SummaryRow, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GATE: i32 = 3;

/// Model id accepted by `eval` and `bench` in place of a file.
pub const EXPERT_MODEL_ID: &str = "expert";
pub const SEED_ENV: &str = "PITCHPILOT_SEED";

const DEFAULT_DATA_SEED: u64 = 1;
const DEFAULT_TRAIN_SEED: u64 = 0;
const DEFAULT_EVAL_SEED: u64 = 10_000;
/// Minimum expert goal rate for recorded data and expert evaluation.
const EXPERT_GATE: f64 = 0.9;

#[derive(Parser, Debug)]
#[command(name = "pitchpilot", version, about = "Imitation learning for a simulated soccer robot")]
pub struct Cli {
    /// Worker threads for parallel episodes (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Cnn,
    Hcnn,
    Rcnn,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Cnn => ModelKind::Cnn,
            KindArg::Hcnn => ModelKind::Hcnn,
            KindArg::Rcnn => ModelKind::Rcnn,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record expert episodes with seeds S..S+N-1.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Alternate camera refreshes between ticks.
        #[arg(long)]
        staggered: bool,
    },
    /// Train a policy; writes the model and `<out>.csv` with the curve.
    Train {
        #[arg(long, value_enum)]
        model: KindArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the original iteration budgets.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        iters: Option<u64>,
        /// Held-out dataset for test error.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        clusters: Option<u64>,
    },
    /// Closed-loop goals and action error on held-out seeds.
    Eval {
        /// Model file, or `expert`.
        #[arg(long)]
        model: String,
        /// First seed.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Write a CSV and an SVG per episode here.
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long)]
        staggered: bool,
    },
    /// Single-sample forward-pass latency.
    Bench {
        /// Model file, or `expert`.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Data(String),
    Gate(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Data(_) => EXIT_DATA,
            Failure::Gate(_) => EXIT_GATE,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn seed_or_env(flag: Option<u64>, default: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Data(format!("{SEED_ENV}={v:?} is not a seed"))),
        Err(_) => Ok(default),
    }
}

fn provenance(command: &str, config: &str) -> String {
    format!("pitchpilot {} {command} {config}", env!("CARGO_PKG_VERSION"))
}

fn writable(path: &Path) -> Result<(), Failure> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    match parent {
        Some(p) if !p.is_dir() => Err(Failure::Data(format!("directory {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

fn readable(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{} is not a readable file", path.display())))
    }
}

enum Policy {
    Expert,
    Learned(Model),
}

fn load_policy(id: &str) -> Result<Policy, Failure> {
    if id == EXPERT_MODEL_ID {
        return Ok(Policy::Expert);
    }
    readable(Path::new(id))?;
    load_model(id).map(Policy::Learned).map_err(data_err)
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        builder = builder.num_threads(j as usize);
    }
    let result = match builder.build() {
        Ok(pool) => pool.install(|| dispatch(&cli, out)),
        Err(e) => Err(data_err(e)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = match &f {
                Failure::Data(m) => format!("error: {m}"),
                Failure::Gate(m) => format!("gate failed: {m}"),
            };
            let _ = writeln!(err, "{msg}");
            f.code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let jobs = cli.jobs.map(|j| j.to_string()).unwrap_or_else(|| "auto".into());
    match &cli.command {
        Command::GenData {
            episodes,
            seed,
            out: path,
            staggered,
        } => {
            let seed = seed_or_env(*seed, DEFAULT_DATA_SEED)?;
            let config = format!(
                "episodes={episodes} seed={seed} out={} staggered={staggered} jobs={jobs}",
                path.display()
            );
            say(out, &format!("config: command=gen-data {config}"));
            writable(path)?;
            gen_data(*episodes as usize, seed, path, *staggered, out)
        }
        Command::Train {
            model,
            data,
            out: path,
            paper_scale,
            iters,
            test_data,
            seed,
            clusters,
        } => {
            let kind = ModelKind::from(*model);
            let mut cfg = if *paper_scale {
                TrainConfig::paper_scale(kind)
            } else {
                TrainConfig::desk(kind)
            };
            if let Some(n) = iters {
                cfg.max_iterations = *n as usize;
            }
            if let Some(k) = clusters {
                cfg.clusters = *k as usize;
            }
            cfg.seed = seed_or_env(*seed, DEFAULT_TRAIN_SEED)?;
            let test = test_data
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into());
            let config = format!(
                "{} data={} test_data={test} out={} jobs={jobs}",
                cfg.describe(),
                data.display(),
                path.display()
            );
            say(out, &format!("config: command=train {config}"));
            readable(data)?;
            if let Some(t) = test_data {
                readable(t)?;
            }
            writable(path)?;
            train(&cfg, data, test_data.as_deref(), path, &provenance("train", &config), out)
        }
        Command::Eval {
            model,
            seeds,
            n,
            export,
            staggered,
        } => {
            let first = seed_or_env(*seeds, DEFAULT_EVAL_SEED)?;
            let export_s = export
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into());
            let config = format!("model={model} seeds={first} n={n} export={export_s} staggered={staggered} jobs={jobs}");
            say(out, &format!("config: command=eval {config}"));
            if let Some(dir) = export {
                if !dir.is_dir() {
                    fs::create_dir_all(dir).map_err(data_err)?;
                }
            }
            let policy = load_policy(model)?;
            evaluate(&policy, first, *n as usize, export.as_deref(), *staggered, &provenance("eval", &config), out)
        }
        Command::Bench { model, n } => {
            say(out, &format!("config: command=bench model={model} n={n} jobs={jobs}"));
            let policy = load_policy(model)?;
            bench(&policy, *n as usize, out)
        }
    }
}

fn say(out: &mut (dyn Write + Send), line: &str) {
    let _ = writeln!(out, "{line}");
}

fn gen_data(episodes: usize, seed: u64, path: &Path, staggered: bool, out: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let seeds = seed_range(seed, episodes);
    let eps = record_episodes(&seeds, Expert::default, staggered).map_err(data_err)?;
    for ep in &eps {
        let t = match ep.terminal {
            Terminal::Goal => "goal",
            Terminal::Timeout => "timeout",
        };
        say(out, &format!("episode seed={} steps={} terminal={t}", ep.seed, ep.steps.len()));
    }
    let goals = eps.iter().filter(|e| e.terminal == Terminal::Goal).count();
    let data = Dataset {
        staggered,
        episodes: eps,
    };
    save_dataset(&data, path).map_err(data_err)?;
    say(
        out,
        &format!(
            "wrote {} ({} episodes, {} records, {} bytes); expert goals {goals}/{episodes}",
            path.display(),
            data.episodes.len(),
            data.total_steps(),
            data.file_size()
        ),
    );
    if (goals as f64) < EXPERT_GATE * episodes as f64 {
        return Err(Failure::Gate(format!(
            "expert scored {goals}/{episodes}, below {:.0}%",
            EXPERT_GATE * 100.0
        )));
    }
    Ok(())
}

fn report_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

fn train(
    cfg: &TrainConfig,
    data: &Path,
    test: Option<&Path>,
    path: &Path,
    header: &str,
    out: &mut (dyn Write + Send),
) -> Result<(), Failure> {
    let train_set = load_dataset(data).map_err(data_err)?;
    let test_set = test.map(load_dataset).transpose().map_err(data_err)?;
    let (model, report) = train_model(&train_set, test_set.as_ref(), cfg).map_err(data_err)?;
    save_model(&model, path, Some(header)).map_err(data_err)?;
    let csv_path = report_path(path);
    fs::write(&csv_path, report.to_csv(header)).map_err(data_err)?;
    say(
        out,
        &format_summary(&[SummaryRow {
            model: report.model.clone(),
            iterations: report.iterations,
            train: report.train,
            test: report.test,
            goals: None,
            episodes: 0,
        }]),
    );
    if !report.contingency.is_empty() {
        say(out, "cluster vs expert state:");
        say(out, &report.contingency_table());
    }
    say(
        out,
        &format!(
            "wrote {} and {} in {:.1} s",
            path.display(),
            csv_path.display(),
            report.wall_seconds
        ),
    );
    Ok(())
}

fn evaluate(
    policy: &Policy,
    first: u64,
    n: usize,
    export: Option<&Path>,
    staggered: bool,
    header: &str,
    out: &mut (dyn Write + Send),
) -> Result<(), Failure> {
    let seeds = seed_range(first, n);
    let (name, trajs) = match policy {
        Policy::Expert => (EXPERT_MODEL_ID.to_string(), count_goals(Expert::default, &seeds, staggered)),
        Policy::Learned(m) => (m.arch().to_string(), count_goals(|| m.controller(), &seeds, staggered)),
    };
    let (_, trajs) = trajs.map_err(data_err)?;
    let mut summary = EvalSummary::from_trajectories(&name, &trajs);
    if let Policy::Learned(m) = policy {
        let held_out = record_episodes(&seeds, Expert::default, staggered).map_err(data_err)?;
        summary.error = Some(eval_error(m, &held_out).map_err(data_err)?);
    }
    for t in &trajs {
        say(
            out,
            &format!("episode seed={} ticks={} terminal={}", t.seed, t.len(), t.status.name()),
        );
        if let Some(dir) = export {
            let stem = format!("{name}_seed{}", t.seed);
            export_trajectory(t, dir, &stem, Some(header)).map_err(data_err)?;
        }
    }
    let err = |f: fn(&crate::train::ErrorStats) -> f64| summary.error.as_ref().map(f);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    say(out, &format!("{:<8} {:>10} {:>10} {:>8}", "model", "test_rms", "test_mean", "goals"));
    say(
        out,
        &format!(
            "{:<8} {:>10} {:>10} {:>8}",
            name,
            fmt(err(|e| e.e_rms)),
            fmt(err(|e| e.e_mean)),
            format!("{}/{n}", summary.goals)
        ),
    );
    say(out, &format!("summary: {}", summary.to_json()));
    if matches!(policy, Policy::Expert) && (summary.goals as f64) < EXPERT_GATE * n as f64 {
        return Err(Failure::Gate(format!("expert scored {}/{n}", summary.goals)));
    }
    Ok(())
}

fn bench(policy: &Policy, n: usize, out: &mut (dyn Write + Send)) -> Result<(), Failure> {
    let stats = match policy {
        Policy::Expert => bench_latency(&mut Expert::default(), n, DEFAULT_EVAL_SEED),
        Policy::Learned(m) => bench_latency(&mut m.controller(), n, DEFAULT_EVAL_SEED),
    };
    say(
        out,
        &format!(
            "mean_ms={:.4} p50_ms={:.4} p99_ms={:.4} n={}",
            stats.mean * 1e3,
            stats.p50 * 1e3,
            stats.p99 * 1e3,
            stats.n
        ),
    );
    let pass = stats.mean < LATENCY_GATE;
    say(
        out,
        &format!(
            "latency gate (mean < {:.0} ms): {}",
            LATENCY_GATE * 1e3,
            if pass { "PASS" } else { "FAIL" }
        ),
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Gate(format!("mean latency {:.3} ms", stats.mean * 1e3)))
    }
}
