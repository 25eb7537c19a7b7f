//! Episode return, repetition metrics, score normalization and learning-curve
//! area.
//!
//! APR compares each executed action with the one in force before it,
//! component by component, using exact equality: repeated components are
//! bitwise copies. The action in force before an episode's first step is the
//! zero vector, so a trace of `T` steps contributes `T·|A|` comparisons.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approximator::Real;
use crate::error::{Error, Result};
use crate::policy::Schema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// `actions[0]` is the action in force before the first step; the
    /// following `T` entries are the executed actions.
    pub actions: Vec<Vec<Real>>,
    /// Schema of each executed step (`T` entries).
    pub schemas: Vec<Schema>,
    /// Reward of each executed step (`T` entries).
    pub rewards: Vec<Real>,
}

impl EpisodeTrace {
    pub fn new(initial_action: Vec<Real>) -> Self {
        EpisodeTrace {
            actions: vec![initial_action],
            schemas: Vec::new(),
            rewards: Vec::new(),
        }
    }

    pub fn record(&mut self, action: Vec<Real>, schema: Schema, reward: Real) {
        self.actions.push(action);
        self.schemas.push(schema);
        self.rewards.push(reward);
    }

    /// Number of executed steps.
    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn act_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn episode_return(&self) -> Real {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.schemas.len();
        if t == 0 {
            return Err(Error::Precondition("trace has no steps".into()));
        }
        if self.actions.len() != t + 1 || self.rewards.len() != t {
            return Err(Error::Precondition(format!(
                "trace lengths disagree: {} actions, {} schemas, {} rewards",
                self.actions.len(),
                t,
                self.rewards.len()
            )));
        }
        let dim = self.act_dim();
        if self.actions.iter().any(|a| a.len() != dim) || self.schemas.iter().any(|b| b.len() != dim) {
            return Err(Error::Precondition("trace action widths disagree".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprReport {
    pub apr: Real,
    pub p: Real,
    pub per_dim_apr: Vec<Real>,
    pub per_dim_p: Vec<Real>,
}

fn apr_from_p(p: Real, mean_len: Real) -> Real {
    if p >= 1.0 {
        mean_len
    } else {
        1.0 / (1.0 - p)
    }
}

/// Action persistence rate `1 / (1 − p)`, with `p` the mean repeat frequency
/// per trace averaged over traces. `tolerance` relaxes exact equality for
/// actions that went through a lossy channel. A fully constant trajectory
/// (`p = 1`) reports the mean trace length.
pub fn apr(traces: &[EpisodeTrace], tolerance: Option<Real>) -> Result<AprReport> {
    if traces.is_empty() {
        return Err(Error::Precondition("APR needs at least one trace".into()));
    }
    let dim = traces[0].act_dim();
    let same = |a: Real, b: Real| match tolerance {
        None => a == b,
        Some(tol) => (a - b).abs() <= tol,
    };
    let mut p_sum = 0.0;
    let mut dim_sum = vec![0.0; dim];
    let mut len_sum = 0.0;
    for trace in traces {
        trace.validate()?;
        if trace.act_dim() != dim {
            return Err(Error::Precondition("traces have different action dims".into()));
        }
        let t = trace.len();
        let mut per_dim = vec![0usize; dim];
        for w in trace.actions.windows(2) {
            for i in 0..dim {
                if same(w[1][i], w[0][i]) {
                    per_dim[i] += 1;
                }
            }
        }
        let total: usize = per_dim.iter().sum();
        p_sum += total as Real / (t * dim) as Real;
        for i in 0..dim {
            dim_sum[i] += per_dim[i] as Real / t as Real;
        }
        len_sum += t as Real;
    }
    let n = traces.len() as Real;
    let p = p_sum / n;
    let mean_len = len_sum / n;
    let per_dim_p: Vec<Real> = dim_sum.iter().map(|s| s / n).collect();
    Ok(AprReport {
        apr: apr_from_p(p, mean_len),
        p,
        per_dim_apr: per_dim_p.iter().map(|&q| apr_from_p(q, mean_len)).collect(),
        per_dim_p,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfrNorm {
    #[default]
    Euclidean,
    MeanAbsolute,
}

/// Action fluctuation rate: mean step-to-step action change per trace,
/// averaged over traces.
pub fn afr(traces: &[EpisodeTrace], norm: AfrNorm) -> Result<Real> {
    if traces.is_empty() {
        return Err(Error::Precondition("AFR needs at least one trace".into()));
    }
    let mut sum = 0.0;
    for trace in traces {
        trace.validate()?;
        let per_trace: Real = trace
            .actions
            .windows(2)
            .map(|w| step_magnitude(&w[0], &w[1], norm))
            .sum();
        sum += per_trace / trace.len() as Real;
    }
    Ok(sum / traces.len() as Real)
}

fn step_magnitude(prev: &[Real], next: &[Real], norm: AfrNorm) -> Real {
    let diffs = prev.iter().zip(next).map(|(a, b)| b - a);
    match norm {
        AfrNorm::Euclidean => diffs.map(|d| d * d).sum::<Real>().sqrt(),
        AfrNorm::MeanAbsolute => diffs.map(Real::abs).sum::<Real>() / prev.len() as Real,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRef {
    /// Score of a random policy.
    pub z0: f64,
    /// Score of the vanilla reference agent.
    pub z1: f64,
}

/// `(z − z0) / (z1 − z0)`, not clamped.
pub fn n_score(z: f64, reference: NormalizationRef) -> Result<f64> {
    let span = reference.z1 - reference.z0;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::Precondition(format!(
            "normalization reference has z1 == z0 ({})",
            reference.z0
        )));
    }
    Ok((z - reference.z0) / span)
}

/// Trapezoidal area under `(step, score)` divided by the step span.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Precondition("AUC needs at least two points".into()));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Precondition("AUC steps must be strictly increasing".into()));
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    Ok(area / (curve[curve.len() - 1].0 - curve[0].0))
}

/// Divides every value by the maximum, so the best entry becomes 1.0.
pub fn best_normalized(values: &[f64]) -> Result<Vec<f64>> {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() || best == 0.0 {
        return Err(Error::Precondition(format!(
            "cannot best-normalize with maximum {best}"
        )));
    }
    Ok(values.iter().map(|v| v / best).collect())
}

/// Writes one row per `(episode, step, dim)` with the act (1) / repeat (0)
/// choice. Steps are 0-based executed-step indices.
pub fn export_selection_trace(traces: &[EpisodeTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["episode", "step", "dim", "b"]).map_err(csv_err)?;
    for (e, trace) in traces.iter().enumerate() {
        for (t, schema) in trace.schemas.iter().enumerate() {
            for (i, &act) in schema.iter().enumerate() {
                w.write_record([
                    e.to_string(),
                    t.to_string(),
                    i.to_string(),
                    u8::from(act).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a selection-trace CSV back into per-episode schema sequences.
pub fn read_selection_trace(path: &Path) -> Result<Vec<Vec<Schema>>> {
    #[derive(Deserialize)]
    struct Row {
        episode: usize,
        step: usize,
        dim: usize,
        b: u8,
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut episodes: Vec<Vec<Schema>> = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(csv_err)?;
        if row.episode >= episodes.len() {
            episodes.resize(row.episode + 1, Vec::new());
        }
        let ep = &mut episodes[row.episode];
        if row.step >= ep.len() {
            ep.resize(row.step + 1, Schema(Vec::new()));
        }
        let schema = &mut ep[row.step].0;
        if row.dim >= schema.len() {
            schema.resize(row.dim + 1, false);
        }
        schema[row.dim] = row.b != 0;
    }
    Ok(episodes)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
