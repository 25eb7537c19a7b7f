use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSnapshot, EnvSpec, Environment, EpisodeClock, StepResult};
use crate::approximator::Real;
use crate::error::{Error, Result};

const MIN_POSITION: Real = -1.2;
const MAX_POSITION: Real = 0.6;
const MAX_SPEED: Real = 0.07;
const GOAL_POSITION: Real = 0.45;
const GOAL_VELOCITY: Real = 0.0;
const POWER: Real = 0.0015;
const GRAVITY: Real = 0.0025;
const MAX_STEPS: usize = 999;

/// Continuous mountain car.
///
/// ```text
/// v ← clip(v + a·0.0015 − 0.0025·cos(3x), ±0.07)
/// x ← clip(x + v, [−1.2, 0.6]);  v ← 0 if x hit the left wall moving left
/// terminated ⇔ x ≥ 0.45 ∧ v ≥ 0
/// r = 100·[terminated] − 0.1·a²
/// ```
#[derive(Clone, Debug, Default)]
pub struct MountainCar {
    position: Real,
    velocity: Real,
    clock: EpisodeClock,
}

impl MountainCar {
    pub fn new() -> Self {
        Self::default()
    }

    /// Puts the car at an explicit state (for tests and diagnostics).
    pub fn set_state(&mut self, position: Real, velocity: Real) {
        self.position = position;
        self.velocity = velocity;
        self.clock.reset();
    }

    fn obs(&self) -> Vec<Real> {
        vec![self.position, self.velocity]
    }
}

impl Environment for MountainCar {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 2,
            act_dim: 1,
            max_episode_steps: MAX_STEPS,
            reward_range: (-0.1 * MAX_STEPS as f64, 100.0),
        }
    }

    fn name(&self) -> String {
        "mountain_car".into()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = rng.random_range(-0.6..-0.4);
        self.velocity = 0.0;
        self.clock.reset();
        Ok(self.obs())
    }

    fn step(&mut self, action: &[Real]) -> Result<StepResult> {
        let a = self.clock.begin_step(action, 1)?;
        let force = a[0];
        let mut v = self.velocity + force * POWER - GRAVITY * (3.0 * self.position).cos();
        v = v.clamp(-MAX_SPEED, MAX_SPEED);
        let mut x = self.position + v;
        x = x.clamp(MIN_POSITION, MAX_POSITION);
        if x == MIN_POSITION && v < 0.0 {
            v = 0.0;
        }
        self.position = x;
        self.velocity = v;
        let terminated = x >= GOAL_POSITION && v >= GOAL_VELOCITY;
        let mut reward = if terminated { 100.0 } else { 0.0 };
        reward -= force * force * 0.1;
        let truncated = self.clock.end_step(terminated, MAX_STEPS);
        Ok(StepResult {
            obs: self.obs(),
            reward,
            terminated,
            truncated,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(self.clock.snapshot(vec![self.position as f64, self.velocity as f64]))
    }

    fn restore(&mut self, snap: &EnvSnapshot) -> Result<()> {
        if snap.values.len() != 2 {
            return Err(Error::Format("mountain car snapshot needs 2 values".into()));
        }
        self.position = snap.values[0] as Real;
        self.velocity = snap.values[1] as Real;
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
    fn reset_range_and_rest() {
        let mut env = MountainCar::new();
        for seed in 0..200 {
            let obs = env.reset(seed).unwrap();
            assert!((-0.6..=-0.4).contains(&obs[0]));
            assert_eq!(obs[1], 0.0);
        }
        assert_eq!(env.reset(9).unwrap(), env.reset(9).unwrap());
    }

    #[test]
    fn zero_action_near_valley_bottom_rolls_back() {
        let mut env = MountainCar::new();
        env.set_state(-0.5, 0.0);
        let r = env.step(&[0.0]).unwrap();
        // Hand evaluation of one tick.
        let v = -0.0025 * (-1.5 as Real).cos();
        assert!(v < 0.0);
        assert_eq!(r.obs[1], v);
        assert_eq!(r.obs[0], -0.5 + v);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn reaching_goal_terminates_with_bonus() {
        let mut env = MountainCar::new();
        env.set_state(0.44, 0.05);
        let r = env.step(&[1.0]).unwrap();
        assert!(r.terminated);
        assert!(!r.truncated);
        assert!((r.reward - 99.9).abs() < 1e-12);
    }

    #[test]
    fn left_wall_stops_the_car() {
        let mut env = MountainCar::new();
        env.set_state(-1.19, -0.07);
        let r = env.step(&[-1.0]).unwrap();
        assert_eq!(r.obs[0], MIN_POSITION);
        assert_eq!(r.obs[1], 0.0);
    }
}
