use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{MaskConstant, SelectionKind};

/// Training mode. `sac` and `nrep` are degenerate settings of the same agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// Per-dimension act-or-repeat selection.
    Sdar,
    /// Every dimension acts at every step.
    Sac,
    /// Act on every `n`-th step of an episode, repeat otherwise.
    Nrep(u32),
    /// One learned switch gates all dimensions together.
    Coupled,
}

impl Mode {
    /// Whether the selection network is trained and consulted.
    pub fn learns_selection(self) -> bool {
        matches!(self, Mode::Sdar | Mode::Coupled)
    }

    pub fn selection_kind(self) -> SelectionKind {
        match self {
            Mode::Coupled => SelectionKind::Coupled,
            _ => SelectionKind::Decoupled,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Sdar => f.write_str("sdar"),
            Mode::Sac => f.write_str("sac"),
            Mode::Nrep(n) => write!(f, "nrep:{n}"),
            Mode::Coupled => f.write_str("coupled"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts `sdar`, `sac`, `coupled`, `nrep:N` and `nrep(N)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "sdar" => return Ok(Mode::Sdar),
            "sac" => return Ok(Mode::Sac),
            "coupled" => return Ok(Mode::Coupled),
            _ => {}
        }
        let n = s
            .strip_prefix("nrep:")
            .or_else(|| s.strip_prefix("nrep(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::config(format!("unknown mode '{s}' (sdar, sac, nrep:N, coupled)")))?;
        let n: u32 = n
            .parse()
            .map_err(|_| Error::config(format!("nrep needs a positive integer, got '{n}'")))?;
        if n == 0 {
            return Err(Error::config("nrep period must be at least 1"));
        }
        Ok(Mode::Nrep(n))
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// Which estimator trains the selection network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaUpdate {
    /// Enumerate every schema.
    Exact,
    /// Importance-weighted draws from the current selection policy.
    Sampled,
    /// Exact for at most `AUTO_EXACT_MAX_SWITCHES` switches, else sampled.
    Auto,
}

pub const AUTO_EXACT_MAX_SWITCHES: usize = 3;

/// Every hyperparameter of a run. Defaults follow the published settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub beta_update: BetaUpdate,
    /// Schema draws per state for the sampled selection update.
    pub sample_count: usize,
    /// Exact enumeration is refused above this many switches.
    pub enumeration_cap: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub lr_pi: f64,
    pub lr_beta: f64,
    pub lr_q: f64,
    pub lr_alpha: f64,
    pub policy_delay: u64,
    pub tau: f64,
    /// Fraction of the maximal selection entropy used as its target.
    pub lambda: f64,
    pub init_log_alpha: f64,
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub xi: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub soft_target_entropy: bool,
    pub mask_pi_entropy: bool,
    pub stochastic_eval: bool,
    /// End the run once a scheduled evaluation reaches this mean return.
    pub stop_at_return: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Sdar,
            beta_update: BetaUpdate::Auto,
            sample_count: 10,
            enumeration_cap: 8,
            batch_size: 256,
            gamma: 0.99,
            lr_pi: 3e-4,
            lr_beta: 3e-4,
            lr_q: 1e-3,
            lr_alpha: 1e-3,
            policy_delay: 2,
            tau: 0.005,
            lambda: 0.5,
            init_log_alpha: 0.0,
            hidden: vec![256, 256],
            replay_capacity: 1_000_000,
            xi: -2.0,
            total_steps: 100_000,
            warmup_steps: 5_000,
            eval_every: 5_000,
            eval_episodes: 5,
            seed: 0,
            soft_target_entropy: true,
            mask_pi_entropy: false,
            stochastic_eval: false,
            stop_at_return: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_pi", self.lr_pi),
            ("lr_beta", self.lr_beta),
            ("lr_q", self.lr_q),
            ("lr_alpha", self.lr_alpha),
        ] {
            positive(name, v)?;
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !self.init_log_alpha.is_finite() {
            return Err(Error::config("init_log_alpha must be finite"));
        }
        if self.sample_count == 0 {
            return Err(Error::config("sample_count must be at least 1"));
        }
        if self.batch_size == 0 || self.policy_delay == 0 || self.eval_episodes == 0 {
            return Err(Error::config("batch_size, policy_delay and eval_episodes must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        MaskConstant::try_from(self.xi)?;
        Ok(())
    }

    /// Resolves `beta_update` for a task with `act_dim` action dimensions.
    /// Returns `None` in modes that do not train a selection network.
    pub fn resolve_beta_update(&self, act_dim: usize) -> Result<Option<BetaUpdate>> {
        if !self.mode.learns_selection() {
            return Ok(None);
        }
        let switches = match self.mode {
            Mode::Coupled => 1,
            _ => act_dim,
        };
        let resolved = match self.beta_update {
            BetaUpdate::Auto if switches <= AUTO_EXACT_MAX_SWITCHES => BetaUpdate::Exact,
            BetaUpdate::Auto => BetaUpdate::Sampled,
            other => other,
        };
        if resolved == BetaUpdate::Exact && switches > self.enumeration_cap {
            return Err(Error::config(format!(
                "exact selection update would enumerate 2^{switches} schemas, above enumeration_cap {}; \
                 use beta_update = \"sampled\"",
                self.enumeration_cap
            )));
        }
        Ok(Some(resolved))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_strings_round_trip() {
        for m in [Mode::Sdar, Mode::Sac, Mode::Nrep(4), Mode::Coupled] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("nrep(3)".parse::<Mode>().unwrap(), Mode::Nrep(3));
        assert!("nrep:0".parse::<Mode>().is_err());
        assert!("td3".parse::<Mode>().is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.sample_count, 10);
        assert_eq!(c.policy_delay, 2);
    }

    #[test]
    fn auto_picks_exact_for_small_action_spaces() {
        let c = TrainConfig::default();
        assert_eq!(c.resolve_beta_update(1).unwrap(), Some(BetaUpdate::Exact));
        assert_eq!(c.resolve_beta_update(3).unwrap(), Some(BetaUpdate::Exact));
        assert_eq!(c.resolve_beta_update(4).unwrap(), Some(BetaUpdate::Sampled));
        let coupled = TrainConfig {
            mode: Mode::Coupled,
            ..c.clone()
        };
        assert_eq!(coupled.resolve_beta_update(17).unwrap(), Some(BetaUpdate::Exact));
        let sac = TrainConfig { mode: Mode::Sac, ..c };
        assert_eq!(sac.resolve_beta_update(2).unwrap(), None);
    }

    #[test]
    fn exact_above_cap_is_rejected() {
        let c = TrainConfig {
            beta_update: BetaUpdate::Exact,
            enumeration_cap: 4,
            ..TrainConfig::default()
        };
        assert!(c.resolve_beta_update(4).is_ok());
        let err = c.resolve_beta_update(5).unwrap_err();
        assert!(err.to_string().contains("sampled"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = [
            TrainConfig { lr_q: 0.0, ..TrainConfig::default() },
            TrainConfig { sample_count: 0, ..TrainConfig::default() },
            TrainConfig { gamma: 1.5, ..TrainConfig::default() },
            TrainConfig { xi: 0.5, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
