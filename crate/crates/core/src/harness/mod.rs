//! Experiment plumbing: config files, run logs, checkpoints and the run
//! driver used by the command line.
//!
//! A run directory holds:
//!
//! ```text
//! log.jsonl            header + one record per evaluation
//! log.jsonl.wallclock  seconds since start per evaluation
//! checkpoint.bin       full training state at the last checkpoint
//! ```

pub mod checkpoint;
pub mod config;
pub mod matrix;
pub mod records;

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::trainer::{EvalRecord, TrainState};

pub use checkpoint::Checkpoint;
pub use config::{config_hash, preset, EnvSelector, ExperimentConfig, PresetRun, PRESET_NAMES};
pub use records::{read_run, LogLine, LogWriter, RunHeader, RunRecord};

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Save a checkpoint after every evaluation at or past each multiple.
    pub checkpoint_every: Option<u64>,
    /// Stop (after checkpointing) at the first evaluation at or past this
    /// step, leaving the run resumable.
    pub halt_at: Option<u64>,
}

pub struct RunOutcome {
    pub state: TrainState,
    pub header: RunHeader,
    pub dir: PathBuf,
}

impl RunOutcome {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }
}

/// Trains a fresh run, writing its artifacts into `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path, options: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let selector = config.selector()?;
    std::fs::create_dir_all(dir)?;
    let header = RunHeader::new(config)?;
    let state = TrainState::new(config.train.clone(), selector.make()?, selector.make()?)?;
    let writer = LogWriter::create(&dir.join(LOG_FILE), &header)?;
    drive(state, header, writer, dir, options)
}

/// Continues the run in `dir` from its checkpoint.
pub fn resume_experiment(dir: &Path, options: &RunOptions) -> Result<RunOutcome> {
    let log = dir.join(LOG_FILE);
    let header = read_run(&log)?.header;
    let ckpt = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    if ckpt.config != header.config.train {
        return Err(Error::config(format!(
            "checkpoint in {} belongs to a different config than its log",
            dir.display()
        )));
    }
    let selector = header.config.selector()?;
    let step = ckpt.step;
    let state = ckpt.into_state(selector.make()?, selector.make()?)?;
    let writer = LogWriter::resume(&log, step)?;
    drive(state, header, writer, dir, options)
}

fn drive(
    mut state: TrainState,
    header: RunHeader,
    mut writer: LogWriter,
    dir: &Path,
    options: &RunOptions,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut next_ckpt = options.checkpoint_every.map(|k| (state.step / k.max(1) + 1) * k.max(1));
    while let Some(record) = state.advance()? {
        writer.eval(&record, start.elapsed().as_secs_f64())?;
        log_progress(&header, &record);
        if let Some(due) = next_ckpt {
            if state.step >= due {
                checkpoint::save(&state, &ckpt_path)?;
                let k = options.checkpoint_every.unwrap_or(1).max(1);
                next_ckpt = Some((state.step / k + 1) * k);
            }
        }
        if options.halt_at.is_some_and(|h| state.step >= h) && !state.finished() {
            checkpoint::save(&state, &ckpt_path)?;
            return Ok(RunOutcome { state, header, dir: dir.to_owned() });
        }
    }
    checkpoint::save(&state, &ckpt_path)?;
    Ok(RunOutcome { state, header, dir: dir.to_owned() })
}

fn log_progress(header: &RunHeader, r: &EvalRecord) {
    log::info!(
        "{} step {} return {:.2} ± {:.2} apr {:.2} alpha_beta {:.4} alpha_pi {:.4}",
        header.run_id,
        r.step,
        r.summary.return_mean,
        r.summary.return_stderr,
        r.summary.apr,
        r.alpha_beta,
        r.alpha_pi
    );
}
