//! JSONL run logs and CSV exports.
//!
//! A log holds one JSON object per line. The first is a header, the rest are
//! evaluation records:
//!
//! ```text
//! {"type":"header","run_id":...,"config_hash":...,"seed":...,"env":...,"mode":...,"config":{...}}
//! {"type":"eval","step":0,"episodes":5,"return_mean":...,"apr":...,...}
//! ```
//!
//! Wall-clock times go to a sidecar file (`<log>.wallclock`, one
//! `{"step":..,"seconds":..}` object per line) so that the log itself is a
//! pure function of the config.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EvalRecord;

use super::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub env: String,
    pub mode: String,
    pub config: ExperimentConfig,
}

impl RunHeader {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let hash = config.hash()?;
        let selector = config.selector()?;
        Ok(RunHeader {
            run_id: format!(
                "{}-{}-s{}-{}",
                selector.short_name(),
                config.train.mode.to_string().replace(':', ""),
                config.train.seed,
                &hash[..8]
            ),
            config_hash: hash,
            seed: config.train.seed,
            env: config.env.clone(),
            mode: config.train.mode.to_string(),
            config: config.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(RunHeader),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub step: u64,
    pub seconds: f64,
}

/// A parsed run log.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub evals: Vec<EvalRecord>,
    /// From the sidecar, when present.
    pub wallclock: Vec<WallClock>,
}

impl RunRecord {
    /// `(step, mean eval return)` pairs.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.evals.iter().map(|e| (e.step as f64, e.summary.return_mean)).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

pub fn wallclock_path(log: &Path) -> PathBuf {
    let mut name = log.as_os_str().to_owned();
    name.push(".wallclock");
    PathBuf::from(name)
}

pub fn to_line(line: &LogLine) -> Result<String> {
    Ok(serde_json::to_string(line)?)
}

/// Appends records to a log and its wall-clock sidecar.
pub struct LogWriter {
    log: File,
    clock: File,
}

impl LogWriter {
    /// Starts a new log, replacing any existing one, and writes the header.
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self> {
        let mut log = File::create(path)?;
        let clock = File::create(wallclock_path(path))?;
        writeln!(log, "{}", to_line(&LogLine::Header(header.clone()))?)?;
        Ok(LogWriter { log, clock })
    }

    /// Reopens an existing log for a resumed run. Records after `step` are
    /// dropped first, so the log continues exactly where the checkpoint was
    /// taken.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept = truncate_after(path, step)?;
        let clock_path = wallclock_path(path);
        let clock_lines: Vec<String> = match std::fs::read_to_string(&clock_path) {
            Ok(text) => text
                .lines()
                .filter(|l| serde_json::from_str::<WallClock>(l).is_ok_and(|w| w.step <= step))
                .map(str::to_owned)
                .collect(),
            Err(_) => Vec::new(),
        };
        let mut clock = File::create(&clock_path)?;
        for l in clock_lines {
            writeln!(clock, "{l}")?;
        }
        std::fs::write(path, kept)?;
        let log = OpenOptions::new().append(true).open(path)?;
        Ok(LogWriter { log, clock })
    }

    pub fn eval(&mut self, record: &EvalRecord, seconds: f64) -> Result<()> {
        writeln!(self.log, "{}", to_line(&LogLine::Eval(record.clone()))?)?;
        let w = WallClock { step: record.step, seconds };
        writeln!(self.clock, "{}", serde_json::to_string(&w)?)?;
        self.log.flush()?;
        Ok(())
    }
}

fn truncate_after(path: &Path, step: u64) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let parsed: LogLine = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let LogLine::Eval(r) = &parsed {
            if r.step > step {
                break;
            }
        }
        kept.push_str(line);
        kept.push('\n');
    }
    Ok(kept)
}

/// Parses a log (and its sidecar, if any).
pub fn read_run(path: &Path) -> Result<RunRecord> {
    let file = File::open(path).map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;
    let mut header = None;
    let mut evals = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let parsed: LogLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        match (parsed, i) {
            (LogLine::Header(h), 0) => header = Some(h),
            (LogLine::Eval(r), i) if i > 0 => evals.push(r),
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: the header must be the first line and appear once",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    let header = header.ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let mut wallclock = Vec::new();
    if let Ok(text) = std::fs::read_to_string(wallclock_path(path)) {
        for line in text.lines() {
            wallclock.push(serde_json::from_str(line)?);
        }
    }
    Ok(RunRecord { header, evals, wallclock })
}

/// Learning curve CSV: one row per evaluation.
pub fn export_curve(run: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record([
        "step",
        "return_mean",
        "return_stderr",
        "apr",
        "afr",
        "mean_length",
        "alpha_beta",
        "alpha_pi",
        "critic_loss",
        "seconds",
    ])
    .map_err(csv_error)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &run.evals {
        let seconds = run.wallclock.iter().find(|w| w.step == e.step).map(|w| w.seconds);
        w.write_record([
            e.step.to_string(),
            e.summary.return_mean.to_string(),
            e.summary.return_stderr.to_string(),
            e.summary.apr.to_string(),
            e.summary.afr.to_string(),
            e.summary.mean_length.to_string(),
            e.alpha_beta.to_string(),
            e.alpha_pi.to_string(),
            opt(e.critic_loss),
            opt(seconds),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
