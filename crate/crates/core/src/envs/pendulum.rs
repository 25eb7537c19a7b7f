use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSnapshot, EnvSpec, Environment, EpisodeClock, StepResult};
use crate::approximator::Real;
use crate::error::{Error, Result};

const MAX_SPEED: Real = 8.0;
const MAX_TORQUE: Real = 2.0;
const DT: Real = 0.05;
const G: Real = 10.0;
const MASS: Real = 1.0;
const LENGTH: Real = 1.0;
const MAX_STEPS: usize = 200;

/// Pendulum swing-up. θ = 0 is upright; the action is torque / 2.
///
/// ```text
/// u = 2a
/// ω ← clip(ω + (3g/(2l)·sin θ + 3/(m l²)·u)·dt, ±8)
/// θ ← θ + ω·dt
/// r = −(norm(θ)² + 0.1·ω² + 0.001·u²)     (evaluated before the update)
/// obs = (cos θ, sin θ, ω)
/// ```
#[derive(Clone, Debug, Default)]
pub struct Pendulum {
    theta: Real,
    omega: Real,
    clock: EpisodeClock,
}

fn angle_normalize(x: Real) -> Real {
    let two_pi = 2.0 * PI as Real;
    (x + PI as Real).rem_euclid(two_pi) - PI as Real
}

impl Pendulum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_state(&mut self, theta: Real, omega: Real) {
        self.theta = theta;
        self.omega = omega;
        self.clock.reset();
    }

    pub fn state(&self) -> (Real, Real) {
        (self.theta, self.omega)
    }

    fn obs(&self) -> Vec<Real> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 3,
            act_dim: 1,
            max_episode_steps: MAX_STEPS,
            reward_range: (-16.273_604_400_622_24, 0.0),
        }
    }

    fn name(&self) -> String {
        "pendulum".into()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI as Real..PI as Real);
        self.omega = rng.random_range(-1.0..1.0);
        self.clock.reset();
        Ok(self.obs())
    }

    fn step(&mut self, action: &[Real]) -> Result<StepResult> {
        let a = self.clock.begin_step(action, 1)?;
        let u = a[0] * MAX_TORQUE;
        let th = self.theta;
        let cost = angle_normalize(th).powi(2) + 0.1 * self.omega.powi(2) + 0.001 * u * u;
        let accel = 3.0 * G / (2.0 * LENGTH) * th.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.omega = (self.omega + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta = th + self.omega * DT;
        let truncated = self.clock.end_step(false, MAX_STEPS);
        Ok(StepResult {
            obs: self.obs(),
            reward: -cost,
            terminated: false,
            truncated,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(self.clock.snapshot(vec![self.theta as f64, self.omega as f64]))
    }

    fn restore(&mut self, snap: &EnvSnapshot) -> Result<()> {
        if snap.values.len() != 2 {
            return Err(Error::Format("pendulum snapshot needs 2 values".into()));
        }
        self.theta = snap.values[0] as Real;
        self.omega = snap.values[1] as Real;
        self.clock.restore(snap);
        Ok(())
    }

    fn clamped_actions(&self) -> u64 {
        self.clock.clamped
    }
}
