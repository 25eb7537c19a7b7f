//! Environment interface and the built-in continuous-control tasks.
//!
//! Every task takes actions in `[-1, 1]^act_dim`; out-of-range components are
//! clamped and counted. Episodes end either by termination (no bootstrap) or
//! by truncation at `max_episode_steps`.

mod mountain_car;
mod pendulum;
mod point_mass;

pub use mountain_car::MountainCar;
pub use pendulum::Pendulum;
pub use point_mass::{PointMass, LATCH_HOLD};

use serde::{Deserialize, Serialize};

use crate::approximator::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub max_episode_steps: usize,
    /// Informative only.
    pub reward_range: (f64, f64),
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.max_episode_steps == 0 {
            return Err(Error::config(format!("invalid environment spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Real>,
    pub reward: Real,
    pub terminated: bool,
    pub truncated: bool,
}

/// Serializable mid-episode state of a built-in task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub values: Vec<f64>,
    pub steps: u64,
    pub done: bool,
    pub clamped: u64,
}

pub trait Environment {
    fn spec(&self) -> EnvSpec;

    fn reset(&mut self, seed: u64) -> Result<Vec<Real>>;

    fn step(&mut self, action: &[Real]) -> Result<StepResult>;

    /// Name used in logs.
    fn name(&self) -> String;

    /// Internal state for checkpoints. `None` when the task cannot be
    /// captured (e.g. an external process).
    fn snapshot(&self) -> Option<EnvSnapshot> {
        None
    }

    fn restore(&mut self, _snapshot: &EnvSnapshot) -> Result<()> {
        Err(Error::config(format!(
            "environment {} cannot be restored from a checkpoint",
            self.name()
        )))
    }

    /// Number of action components clamped into range so far.
    fn clamped_actions(&self) -> u64 {
        0
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn spec(&self) -> EnvSpec {
        (**self).spec()
    }
    fn reset(&mut self, seed: u64) -> Result<Vec<Real>> {
        (**self).reset(seed)
    }
    fn step(&mut self, action: &[Real]) -> Result<StepResult> {
        (**self).step(action)
    }
    fn name(&self) -> String {
        (**self).name()
    }
    fn snapshot(&self) -> Option<EnvSnapshot> {
        (**self).snapshot()
    }
    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        (**self).restore(snapshot)
    }
    fn clamped_actions(&self) -> u64 {
        (**self).clamped_actions()
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["mountain_car", "pendulum", "point_mass"];

pub fn make_builtin(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "mountain_car" => Ok(Box::new(MountainCar::new())),
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "point_mass" => Ok(Box::new(PointMass::new())),
        other => Err(Error::config(format!(
            "unknown built-in environment '{other}' (expected one of {BUILTIN_NAMES:?})"
        ))),
    }
}

/// Step bookkeeping shared by the built-in tasks.
#[derive(Clone, Debug, Default)]
pub(crate) struct EpisodeClock {
    pub steps: u64,
    pub done: bool,
    pub live: bool,
    pub clamped: u64,
}

impl EpisodeClock {
    pub fn reset(&mut self) {
        self.steps = 0;
        self.done = false;
        self.live = true;
    }

    /// Validates the call and clamps the action into `[-1, 1]`.
    pub fn begin_step(&mut self, action: &[Real], act_dim: usize) -> Result<Vec<Real>> {
        if !self.live {
            return Err(Error::Protocol("step before reset".into()));
        }
        if self.done {
            return Err(Error::Protocol("step after episode end without reset".into()));
        }
        if action.len() != act_dim {
            return Err(Error::Protocol(format!(
                "action has {} components, expected {act_dim}",
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Protocol("non-finite action".into()));
        }
        Ok(action
            .iter()
            .map(|&a| {
                if !(-1.0..=1.0).contains(&a) {
                    self.clamped += 1;
                }
                a.clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Advances the counter; returns `truncated`.
    pub fn end_step(&mut self, terminated: bool, max_steps: usize) -> bool {
        self.steps += 1;
        let truncated = !terminated && self.steps >= max_steps as u64;
        self.done = terminated || truncated;
        truncated
    }

    pub fn snapshot(&self, values: Vec<f64>) -> EnvSnapshot {
        EnvSnapshot {
            values,
            steps: self.steps,
            done: self.done,
            clamped: self.clamped,
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) {
        self.steps = snap.steps;
        self.done = snap.done;
        self.clamped = snap.clamped;
        self.live = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_truncates_at_its_limit() {
        for name in BUILTIN_NAMES {
            let mut env = make_builtin(name).unwrap();
            let spec = env.spec();
            spec.validate().unwrap();
            env.reset(3).unwrap();
            let mut last = None;
            for _ in 0..spec.max_episode_steps {
                let r = env.step(&vec![0.0; spec.act_dim]).unwrap();
                let end = r.terminated || r.truncated;
                last = Some(r);
                if end {
                    break;
                }
            }
            let last = last.unwrap();
            assert!(last.terminated || last.truncated, "{name}");
            if !last.terminated {
                assert!(last.truncated);
            }
            assert!(matches!(env.step(&vec![0.0; spec.act_dim]), Err(Error::Protocol(_))));
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        for name in BUILTIN_NAMES {
            let mut a = make_builtin(name).unwrap();
            let mut b = make_builtin(name).unwrap();
            assert_eq!(a.reset(42).unwrap(), b.reset(42).unwrap());
            let dim = a.spec().act_dim;
            for t in 0..50 {
                let act: Vec<Real> = (0..dim).map(|i| ((t * 7 + i * 3) % 11) as Real / 5.5 - 1.0).collect();
                assert_eq!(a.step(&act).unwrap(), b.step(&act).unwrap());
            }
        }
    }

    #[test]
    fn snapshot_restores_mid_episode() {
        for name in BUILTIN_NAMES {
            let mut a = make_builtin(name).unwrap();
            a.reset(5).unwrap();
            let dim = a.spec().act_dim;
            for _ in 0..10 {
                a.step(&vec![0.3; dim]).unwrap();
            }
            let snap = a.snapshot().unwrap();
            let mut b = make_builtin(name).unwrap();
            b.restore(&snap).unwrap();
            for _ in 0..10 {
                assert_eq!(a.step(&vec![-0.2; dim]).unwrap(), b.step(&vec![-0.2; dim]).unwrap());
            }
        }
    }

    #[test]
    fn out_of_range_actions_are_clamped_and_counted() {
        let mut env = make_builtin("pendulum").unwrap();
        env.reset(0).unwrap();
        env.step(&[3.0]).unwrap();
        assert_eq!(env.clamped_actions(), 1);
    }

    #[test]
    fn unknown_builtin_is_config_error() {
        assert!(matches!(make_builtin("cartpole"), Err(Error::Config(_))));
    }
}
