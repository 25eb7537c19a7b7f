//! `sdar`: train, evaluate and inspect act-or-repeat agents.
//!
//! Exit status is 0 on success, 1 when a run or check fails, 2 on bad usage.
//! Log verbosity follows `SDAR_LOG` (`error`, `warn`, `info`, `debug`), default `info`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sdar::harness::checkpoint;
use sdar::harness::matrix::{aggregate, random_policy_return, render_table, write_table_csv, MatrixConfig};
use sdar::harness::records::export_curve;
use sdar::harness::{
    preset, read_run, resume_experiment, run_experiment, EnvSelector, ExperimentConfig, RunHeader, RunOptions,
    CHECKPOINT_FILE, LOG_FILE, PRESET_NAMES,
};
use sdar::metrics::export_selection_trace;
use sdar::trainer::{eval_seeds, run_episodes, summarize, Mode, TrainConfig};

const LOG_ENV: &str = "SDAR_LOG";

#[derive(Parser)]
#[command(name = "sdar", version, about = "Act-or-repeat soft actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train one run, or every run of a preset.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint and write its selection trace.
    Eval(EvalArgs),
    /// Run a grid of environments, modes and seeds and summarize it.
    Matrix(MatrixArgs),
    /// Run the built-in property suites.
    Check(CheckArgs),
    /// Convert a run log to CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct Overrides {
    /// `builtin:<name>`, `bridge:<command>` or a bare built-in name.
    #[arg(long)]
    env: Option<String>,
    /// `sdar`, `sac`, `nrep:<n>` or `coupled`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `PRESET_NAMES`).
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory (default `runs/<run id>`); with a preset, the root of
    /// one directory per run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run in `--out` from its checkpoint.
    #[arg(long, requires = "out")]
    resume: bool,
    /// Save a checkpoint every this many steps (in addition to the end).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Checkpoint and stop at the first evaluation at or past this step.
    #[arg(long)]
    halt_at: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `log.jsonl` and `checkpoint.bin`.
    #[arg(long)]
    run: PathBuf,
    /// Environment override (required when the run has no log).
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Directory for `selection.csv` and `eval.json` (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// TOML matrix config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "matrix")]
    out: PathBuf,
    /// Runs trained concurrently, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Run only suites whose name contains this text.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory, or a path to a `log.jsonl`.
    #[arg(long)]
    run: PathBuf,
    /// Output directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<sdar::Error> for Failure {
    fn from(e: sdar::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Verb::Train(a) => train(a),
        Verb::Eval(a) => eval(a),
        Verb::Matrix(a) => matrix(a),
        Verb::Check(a) => check(a),
        Verb::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn apply(overrides: &Overrides, config: &mut ExperimentConfig) -> Result<(), Failure> {
    if let Some(env) = &overrides.env {
        env.parse::<EnvSelector>().map_err(|e| usage(e.to_string()))?;
        config.env = env.clone();
    }
    if let Some(mode) = &overrides.mode {
        config.train.mode = mode.parse::<Mode>().map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = overrides.seed {
        config.train.seed = seed;
    }
    if let Some(steps) = overrides.steps {
        config.train.total_steps = steps;
    }
    config.validate().map_err(|e| usage(e.to_string()))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let options = RunOptions {
        checkpoint_every: a.checkpoint_every,
        halt_at: a.halt_at,
    };
    if a.resume {
        let dir = a.out.expect("clap requires --out");
        let out = resume_experiment(&dir, &options)?;
        report(&out.header, &out.state.step, &dir);
        return Ok(());
    }
    if let Some(name) = &a.preset {
        let runs = preset(name).map_err(|_| {
            usage(format!("unknown preset {name:?}; known: {}", PRESET_NAMES.join(", ")))
        })?;
        let root = a.out.unwrap_or_else(|| PathBuf::from("runs").join(name));
        for run in runs {
            let seeds = match a.overrides.seed {
                Some(s) => vec![s],
                None => run.seeds.clone(),
            };
            for seed in seeds {
                let mut config = run.experiment.clone();
                config.train.seed = seed;
                apply(&Overrides { seed: None, ..clone_overrides(&a.overrides) }, &mut config)?;
                let dir = root.join(&run.label).join(format!("seed{seed}"));
                let out = run_experiment(&config, &dir, &options)?;
                report(&out.header, &out.state.step, &dir);
            }
        }
        return Ok(());
    }
    let mut config = match &a.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => {
            let env = a
                .overrides
                .env
                .clone()
                .ok_or_else(|| usage("train needs --config, --preset or --env"))?;
            ExperimentConfig {
                env,
                train: TrainConfig::default(),
            }
        }
    };
    apply(&a.overrides, &mut config)?;
    let header = RunHeader::new(&config)?;
    let dir = a.out.unwrap_or_else(|| PathBuf::from("runs").join(&header.run_id));
    let out = run_experiment(&config, &dir, &options)?;
    report(&out.header, &out.state.step, &dir);
    Ok(())
}

fn clone_overrides(o: &Overrides) -> Overrides {
    Overrides {
        env: o.env.clone(),
        mode: o.mode.clone(),
        seed: o.seed,
        steps: o.steps,
    }
}

fn report(header: &RunHeader, step: &u64, dir: &Path) {
    println!("{} finished at step {step} in {}", header.run_id, dir.display());
}

/// Log path and run directory for a `--run` argument.
fn run_paths(run: &Path) -> (PathBuf, PathBuf) {
    if run.is_dir() {
        (run.join(LOG_FILE), run.to_owned())
    } else {
        let dir = run.parent().map(Path::to_owned).unwrap_or_default();
        (run.to_owned(), dir)
    }
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (log, dir) = run_paths(&a.run);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        return Err(usage(format!("no checkpoint at {}", ckpt_path.display())));
    }
    let env = match &a.env {
        Some(e) => e.clone(),
        None if log.exists() => read_run(&log)?.header.env,
        None => return Err(usage("the run has no log; pass --env")),
    };
    let selector: EnvSelector = env.parse().map_err(|e: sdar::Error| usage(e.to_string()))?;
    let ckpt = checkpoint::load(&ckpt_path)?;
    let episodes = a.episodes.unwrap_or(ckpt.config.eval_episodes);
    if episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let mut eval_env = selector.make()?;
    let traces = run_episodes(
        &ckpt.agent.policy,
        ckpt.config.mode,
        eval_env.as_mut(),
        &eval_seeds(ckpt.config.seed, episodes),
        None,
    )?;
    let summary = summarize(&traces)?;
    let out = a.out.unwrap_or(dir);
    std::fs::create_dir_all(&out).context("creating the output directory")?;
    export_selection_trace(&traces, &out.join("selection.csv"))?;
    let text = serde_json::to_string_pretty(&summary).context("serializing the summary")?;
    std::fs::write(out.join("eval.json"), &text).context("writing eval.json")?;
    println!("{text}");
    Ok(())
}

fn matrix(a: MatrixArgs) -> Result<(), Failure> {
    let config = MatrixConfig::load(&a.config).map_err(|e| usage(e.to_string()))?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let runs = config.runs()?;
    let mut pending = Vec::new();
    for run in &runs {
        let dir = a.out.join(&run.name);
        if finished(&dir, &run.experiment) {
            log::info!("{} already finished, skipping", run.name);
            continue;
        }
        pending.push((run, dir));
    }
    if a.jobs == 1 {
        for (run, dir) in &pending {
            run_experiment(&run.experiment, dir, &RunOptions::default())?;
        }
    } else {
        let exe = std::env::current_exe().context("locating the sdar executable")?;
        for chunk in pending.chunks(a.jobs) {
            let mut children = Vec::new();
            for (run, dir) in chunk {
                std::fs::create_dir_all(dir).context("creating a run directory")?;
                let cfg_path = dir.join("config.toml");
                std::fs::write(&cfg_path, run.experiment.to_toml()?).context("writing a run config")?;
                let child = Command::new(&exe)
                    .args(["train", "--config"])
                    .arg(&cfg_path)
                    .arg("--out")
                    .arg(dir)
                    .spawn()
                    .context("spawning a training process")?;
                children.push((run.name.clone(), child));
            }
            for (name, mut child) in children {
                let status = child.wait().context("waiting for a training process")?;
                if !status.success() {
                    return Err(Failure::Run(anyhow::anyhow!("run {name} failed with {status}")));
                }
            }
        }
    }

    let mut records = Vec::new();
    for run in &runs {
        records.push(read_run(&a.out.join(&run.name).join(LOG_FILE))?);
    }
    let mut z0 = BTreeMap::new();
    for env in &config.envs {
        let selector: EnvSelector = env.parse()?;
        let short = selector.short_name();
        if !config.references.contains_key(&short) {
            z0.insert(short, random_policy_return(&selector, &config.train)?);
        }
    }
    let rows = aggregate(&records, &config.references, &z0)?;
    write_table_csv(&rows, &a.out.join("table.csv"))?;
    print!("{}", render_table(&rows));
    Ok(())
}

/// True when `dir` holds a complete run of exactly `experiment`.
fn finished(dir: &Path, experiment: &ExperimentConfig) -> bool {
    let Ok(run) = read_run(&dir.join(LOG_FILE)) else {
        return false;
    };
    let Ok(ckpt) = checkpoint::load(&dir.join(CHECKPOINT_FILE)) else {
        return false;
    };
    run.header.config == *experiment
        && (ckpt.stopped || ckpt.step >= experiment.train.total_steps)
        && run.final_eval().is_some_and(|e| e.step == ckpt.step)
}

fn check(a: CheckArgs) -> Result<(), Failure> {
    let mut failed = 0;
    let mut ran = 0;
    for outcome in sdar::checks::run_all_filtered(a.only.as_deref()) {
        ran += 1;
        if !outcome.passed {
            failed += 1;
        }
        println!("{}", outcome.line());
    }
    if ran == 0 {
        return Err(usage("no suite matches --only"));
    }
    if failed > 0 {
        return Err(Failure::Run(anyhow::anyhow!("{failed} of {ran} checks failed")));
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), Failure> {
    let (log, dir) = run_paths(&a.run);
    if !log.exists() {
        return Err(usage(format!("no log at {}", log.display())));
    }
    let run = read_run(&log)?;
    let out = a.out.unwrap_or_else(|| dir.clone());
    std::fs::create_dir_all(&out).context("creating the output directory")?;
    export_curve(&run, &out.join("curve.csv"))?;
    println!("wrote {}", out.join("curve.csv").display());
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if ckpt_path.exists() {
        let ckpt = checkpoint::load(&ckpt_path)?;
        let selector: EnvSelector = run.header.env.parse()?;
        let mut env = selector.make()?;
        let traces = run_episodes(
            &ckpt.agent.policy,
            ckpt.config.mode,
            env.as_mut(),
            &eval_seeds(ckpt.config.seed, ckpt.config.eval_episodes),
            None,
        )?;
        export_selection_trace(&traces, &out.join("selection.csv"))?;
        println!("wrote {}", out.join("selection.csv").display());
    }
    Ok(())
}
