use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSnapshot, EnvSpec, Environment, EpisodeClock, StepResult};
use crate::approximator::Real;
use crate::error::{Error, Result};

/// Ticks a freshly latched trim is held before a new command is accepted.
pub const LATCH_HOLD: u32 = 5;

const DT: Real = 0.1;
const DAMPING: Real = 1.0;
const THRUST_GAIN: Real = 1.0;
const TRIM_GAIN: Real = 1.0;
const THRUST_COST: Real = 0.1;
const LATCH_COST: Real = 4.0;
const WIND_MIN: Real = 0.3;
const WIND_MAX: Real = 0.8;
const MAX_STEPS: usize = 300;

/// Planar point mass with two actuator rates.
///
/// Action dims 0–1 are thrust applied on the current tick. Dims 2–3 command a
/// trim force. When the commanded trim differs from the latched one and no
/// hold is active, the simulator latches the command and ignores further trim
/// commands for `LATCH_HOLD` ticks. Moving the trim command costs
/// `LATCH_COST` per unit of L1 distance from the previous tick's command,
/// held or not. A constant wind, fixed per episode, pushes the mass.
///
/// ```text
/// F = THRUST_GAIN·thrust + TRIM_GAIN·trim + wind
/// v ← v + (F − DAMPING·v)·dt;  p ← p + v·dt
/// r = −‖p − goal‖ − THRUST_COST·‖thrust‖² − LATCH_COST·‖command − command_prev‖₁
/// obs = (p, v, goal, wind, trim, command_prev, hold / LATCH_HOLD)
/// ```
///
/// Reset puts the mass at rest at the origin with zero trim and zero previous
/// command, the goal uniformly on the unit circle, and the wind with uniform
/// direction and magnitude in `[0.3, 0.8)`.
#[derive(Clone, Debug, Default)]
pub struct PointMass {
    position: [Real; 2],
    velocity: [Real; 2],
    goal: [Real; 2],
    wind: [Real; 2],
    trim: [Real; 2],
    command: [Real; 2],
    hold: u32,
    latches: u64,
    clock: EpisodeClock,
}

impl PointMass {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn goal(&self) -> [Real; 2] {
        self.goal
    }

    pub fn trim(&self) -> [Real; 2] {
        self.trim
    }

    /// Latch events since construction.
    pub fn latches(&self) -> u64 {
        self.latches
    }

    fn obs(&self) -> Vec<Real> {
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.goal[0],
            self.goal[1],
            self.wind[0],
            self.wind[1],
            self.trim[0],
            self.trim[1],
            self.command[0],
            self.command[1],
            self.hold as Real / LATCH_HOLD as Real,
        ]
    }
}

impl Environment for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 13,
            act_dim: 4,
            max_episode_steps: MAX_STEPS,
            reward_range: (-1.0e3, 0.0),
        }
    }

    fn name(&self) -> String {
        "point_mass".into()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal_angle: Real = rng.random_range(0.0..2.0 * PI as Real);
        let wind_angle: Real = rng.random_range(0.0..2.0 * PI as Real);
        let wind_mag: Real = rng.random_range(WIND_MIN..WIND_MAX);
        self.position = [0.0; 2];
        self.velocity = [0.0; 2];
        self.goal = [goal_angle.cos(), goal_angle.sin()];
        self.wind = [wind_mag * wind_angle.cos(), wind_mag * wind_angle.sin()];
        self.trim = [0.0; 2];
        self.command = [0.0; 2];
        self.hold = 0;
        self.clock.reset();
        Ok(self.obs())
    }

    fn step(&mut self, action: &[Real]) -> Result<StepResult> {
        let a = self.clock.begin_step(action, 4)?;
        let thrust = [a[0], a[1]];
        let command = [a[2], a[3]];
        let change = (command[0] - self.command[0]).abs() + (command[1] - self.command[1]).abs();
        let mut reward = -LATCH_COST * change;
        self.command = command;
        if self.hold > 0 {
            self.hold -= 1;
        } else if command != self.trim {
            self.trim = command;
            self.hold = LATCH_HOLD - 1;
            self.latches += 1;
        }
        for k in 0..2 {
            let force = THRUST_GAIN * thrust[k] + TRIM_GAIN * self.trim[k] + self.wind[k];
            self.velocity[k] += (force - DAMPING * self.velocity[k]) * DT;
            self.position[k] += self.velocity[k] * DT;
        }
        let dx = self.position[0] - self.goal[0];
        let dy = self.position[1] - self.goal[1];
        reward -= (dx * dx + dy * dy).sqrt();
        reward -= THRUST_COST * (thrust[0] * thrust[0] + thrust[1] * thrust[1]);
        let truncated = self.clock.end_step(false, MAX_STEPS);
        Ok(StepResult {
            obs: self.obs(),
            reward,
            terminated: false,
            truncated,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        let mut values: Vec<f64> = Vec::with_capacity(13);
        for arr in [&self.position, &self.velocity, &self.goal, &self.wind, &self.trim, &self.command] {
            values.extend(arr.iter().map(|&v| v as f64));
        }
        values.push(self.hold as f64);
        Some(self.clock.snapshot(values))
    }

    fn restore(&mut self, snap: &EnvSnapshot) -> Result<()> {
        let v = &snap.values;
        if v.len() != 13 {
            return Err(Error::Format("point mass snapshot needs 13 values".into()));
        }
        let pair = |i: usize| [v[i] as Real, v[i + 1] as Real];
        self.position = pair(0);
        self.velocity = pair(2);
        self.goal = pair(4);
        self.wind = pair(6);
        self.trim = pair(8);
        self.command = pair(10);
        self.hold = v[12] as u32;
        self.clock.restore(snap);
        Ok(())
    }

    fn clamped_actions(&self) -> u64 {
        self.clock.clamped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_starts_at_origin_with_goal_on_unit_circle() {
        let mut env = PointMass::new();
        for seed in 0..50 {
            let obs = env.reset(seed).unwrap();
            assert_eq!(&obs[..4], &[0.0; 4]);
            let g = env.goal();
            assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trim_latches_and_holds() {
        let mut env = PointMass::new();
        env.reset(1).unwrap();
        let r0 = env.step(&[0.0, 0.0, 0.5, -0.5]).unwrap();
        assert_eq!(env.trim(), [0.5, -0.5]);
        assert_eq!(env.latches(), 1);
        // New commands are ignored while the hold lasts.
        for _ in 1..LATCH_HOLD {
            env.step(&[0.0, 0.0, -0.9, 0.9]).unwrap();
            assert_eq!(env.trim(), [0.5, -0.5]);
        }
        env.step(&[0.0, 0.0, -0.9, 0.9]).unwrap();
        assert_eq!(env.trim(), [-0.9, 0.9]);
        assert_eq!(env.latches(), 2);
        assert!(r0.reward <= -LATCH_COST);
    }

    #[test]
    fn repeating_the_trim_costs_nothing() {
        let mut a = PointMass::new();
        let mut b = PointMass::new();
        a.reset(4).unwrap();
        b.reset(4).unwrap();
        a.step(&[0.0, 0.0, 0.2, 0.2]).unwrap();
        b.step(&[0.0, 0.0, 0.2, 0.2]).unwrap();
        let mut ra = 0.0;
        let mut rb = 0.0;
        for t in 0..40 {
            ra += a.step(&[0.1, 0.1, 0.2, 0.2]).unwrap().reward;
            // Jittering the trim command pays on every tick and re-latches after every hold.
            let jitter = if t % 2 == 0 { 0.2 } else { 0.21 };
            rb += b.step(&[0.1, 0.1, jitter, 0.2]).unwrap().reward;
        }
        assert_eq!(a.latches(), 1);
        assert!(b.latches() > 1);
        assert!(ra > rb);
    }
}
