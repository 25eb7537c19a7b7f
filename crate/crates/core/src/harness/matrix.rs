//! Grids of runs over environments, modes and seeds, and their summary
//! table.
//!
//! ```toml
//! envs = ["builtin:mountain_car"]
//! modes = ["sac", "sdar"]
//! seeds = [0, 1, 2]
//!
//! [train]
//! total_steps = 20000
//!
//! # Optional: fixes the normalization instead of measuring it.
//! [references.mountain_car]
//! z0 = -40.0
//! z1 = 90.0
//! ```
//!
//! Without a reference, `z0` is the mean return of a uniform random policy
//! on the evaluation seeds and `z1` is the mean final return of the `sac`
//! runs of the grid.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auc, best_normalized, n_score, NormalizationRef};
use crate::seeds::{stream_rng, Stream};
use crate::trainer::{eval_seeds, Mode, TrainConfig};

use super::config::{EnvSelector, ExperimentConfig};
use super::records::RunRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub envs: Vec<String>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub references: BTreeMap<String, NormalizationRef>,
}

/// One cell of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRun {
    pub experiment: ExperimentConfig,
    /// Directory name relative to the matrix output.
    pub name: String,
}

impl MatrixConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MatrixConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.envs.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("a matrix needs at least one env, mode and seed"));
        }
        for e in &self.envs {
            e.parse::<EnvSelector>()?;
        }
        self.train.validate()
    }

    /// Every (env, mode, seed) combination, env-major.
    pub fn runs(&self) -> Result<Vec<MatrixRun>> {
        let mut out = Vec::new();
        for env in &self.envs {
            let selector: EnvSelector = env.parse()?;
            for &mode in &self.modes {
                for &seed in &self.seeds {
                    let train = TrainConfig { mode, seed, ..self.train.clone() };
                    out.push(MatrixRun {
                        name: format!("{}/{}/seed{seed}", selector.short_name(), mode.to_string().replace(':', "")),
                        experiment: ExperimentConfig { env: env.clone(), train },
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Mean return of uniformly random actions over the evaluation seeds of
/// `config`.
pub fn random_policy_return(selector: &EnvSelector, config: &TrainConfig) -> Result<f64> {
    let mut env = selector.make()?;
    let spec = env.spec();
    let mut rng = stream_rng(config.seed, Stream::Policy);
    let seeds = eval_seeds(config.seed, config.eval_episodes);
    let mut total = 0.0;
    for &seed in &seeds {
        env.reset(seed)?;
        for _ in 0..spec.max_episode_steps {
            let a: Vec<_> = (0..spec.act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = env.step(&a)?;
            total += r.reward as f64;
            if r.terminated || r.truncated {
                break;
            }
        }
    }
    Ok(total / seeds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub env: String,
    pub mode: String,
    pub seeds: usize,
    pub final_return: f64,
    pub final_return_stderr: f64,
    pub final_apr: f64,
    /// Mean over seeds of the mean-height learning-curve area.
    pub auc: f64,
    /// `auc` divided by the best of its environment (after subtracting
    /// `z0` when one is known).
    pub auc_best_normalized: f64,
    pub n_score: Option<f64>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Summarizes finished runs, one row per (env, mode). `z0` holds measured
/// random-policy returns for environments without an explicit reference.
pub fn aggregate(
    runs: &[RunRecord],
    references: &BTreeMap<String, NormalizationRef>,
    z0: &BTreeMap<String, f64>,
) -> Result<Vec<MatrixRow>> {
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.header.env.clone(), r.header.mode.clone())).or_default().push(r);
    }
    let mut rows = Vec::new();
    let mut envs: Vec<String> = Vec::new();
    for ((env, mode), members) in &groups {
        let finals: Vec<f64> = members
            .iter()
            .map(|r| r.final_eval().map(|e| e.summary.return_mean))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Precondition(format!("a {env}/{mode} run has no evaluations")))?;
        let aprs: Vec<f64> = members.iter().filter_map(|r| r.final_eval()).map(|e| e.summary.apr).collect();
        let aucs: Vec<f64> = members.iter().map(|r| auc(&r.curve())).collect::<Result<_>>()?;
        let (final_return, final_return_stderr) = mean_stderr(&finals);
        rows.push(MatrixRow {
            env: env.clone(),
            mode: mode.clone(),
            seeds: members.len(),
            final_return,
            final_return_stderr,
            final_apr: mean_stderr(&aprs).0,
            auc: mean_stderr(&aucs).0,
            auc_best_normalized: 0.0,
            n_score: None,
        });
        if !envs.contains(env) {
            envs.push(env.clone());
        }
    }
    for env in envs {
        let short = env.parse::<EnvSelector>().map(|s| s.short_name()).unwrap_or(env.clone());
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].env == env).collect();
        let sac = idx
            .iter()
            .find(|&&i| rows[i].mode == Mode::Sac.to_string())
            .map(|&i| rows[i].final_return);
        let reference = references.get(&short).copied().or_else(|| {
            let z0 = *z0.get(&short)?;
            Some(NormalizationRef { z0, z1: sac? })
        });
        let shift = reference.map(|r| r.z0).or_else(|| z0.get(&short).copied()).unwrap_or(0.0);
        let shifted: Vec<f64> = idx.iter().map(|&i| rows[i].auc - shift).collect();
        let normalized = best_normalized(&shifted)?;
        for (&i, v) in idx.iter().zip(normalized) {
            rows[i].auc_best_normalized = v;
            rows[i].n_score = match reference {
                Some(r) => n_score(rows[i].final_return, r).ok(),
                None => None,
            };
        }
    }
    Ok(rows)
}

/// Plain-text table of `rows`.
pub fn render_table(rows: &[MatrixRow]) -> String {
    let mut s = format!(
        "{:<24} {:<8} {:>5} {:>18} {:>8} {:>10} {:>9} {:>8}\n",
        "env", "mode", "seeds", "final return", "APR", "AUC", "AUC/best", "n-score"
    );
    for r in rows {
        let ns = r.n_score.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<24} {:<8} {:>5} {:>9.2} ± {:<6.2} {:>8.2} {:>10.2} {:>9.3} {:>8}\n",
            r.env, r.mode, r.seeds, r.final_return, r.final_return_stderr, r.final_apr, r.auc, r.auc_best_normalized, ns
        ));
    }
    s
}

/// Writes the rows as CSV.
pub fn write_table_csv(rows: &[MatrixRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
