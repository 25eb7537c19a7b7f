//! Seed derivation. A run seed expands into independent named streams with
//! SplitMix64, so adding draws to one component never shifts another.
//!
//! ```text
//! stream_seed = splitmix64(run_seed ^ splitmix64(tag))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Episode reset seeds during training.
    Env,
    /// Exploration and update noise.
    Policy,
    /// Minibatch indices.
    Replay,
    /// Network initialization.
    Init,
    /// Evaluation episode seeds.
    Eval,
}

impl Stream {
    pub const ALL: [Stream; 5] = [Stream::Env, Stream::Policy, Stream::Replay, Stream::Init, Stream::Eval];

    fn tag(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::Policy => 2,
            Stream::Replay => 3,
            Stream::Init => 4,
            Stream::Eval => 5,
        }
    }
}

/// One SplitMix64 output step for state `z`.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(run_seed: u64, stream: Stream) -> u64 {
    splitmix64(run_seed ^ splitmix64(stream.tag()))
}

pub fn stream_rng(run_seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, stream))
}
