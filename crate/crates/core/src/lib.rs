//! Two-stage act-or-repeat soft actor-critic.
//!
//! A selection policy chooses, per action dimension, whether to act or to
//! repeat the previous action; an action policy proposes values for the
//! dimensions that act. Both are trained against twin soft critics with
//! automatically tuned temperatures.

pub mod approximator;
pub mod bridge;
pub mod checks;
pub mod critic;
pub mod envs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod replay;
pub mod seeds;
pub mod trainer;

pub use approximator::Real;
pub use error::{Error, Result};
