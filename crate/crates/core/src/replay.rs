//! Fixed-capacity FIFO replay of transitions that carry the previous action.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Real>,
    /// Action executed at the previous step; zeros at an episode's first step.
    pub a_prev: Vec<Real>,
    pub action: Vec<Real>,
    pub reward: Real,
    pub next_obs: Vec<Real>,
    pub terminal: bool,
    pub truncated: bool,
    /// `obs` is the first state of an episode, where every dimension acts.
    pub episode_start: bool,
    /// `next_obs` must be treated as a forced all-act state when bootstrapping.
    pub episode_start_next: bool,
}

/// Column-wise view of sampled transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<Real>,
    pub a_prev: Array2<Real>,
    pub action: Array2<Real>,
    pub reward: Array1<Real>,
    pub next_obs: Array2<Real>,
    pub terminal: Array1<Real>,
    pub truncated: Array1<Real>,
    pub episode_start: Array1<Real>,
    pub episode_start_next: Array1<Real>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Precondition("cannot build an empty batch".into()))?;
        let (n, obs_dim, act_dim) = (items.len(), first.obs.len(), first.action.len());
        let mut b = Batch {
            obs: Array2::zeros((n, obs_dim)),
            a_prev: Array2::zeros((n, act_dim)),
            action: Array2::zeros((n, act_dim)),
            reward: Array1::zeros(n),
            next_obs: Array2::zeros((n, obs_dim)),
            terminal: Array1::zeros(n),
            truncated: Array1::zeros(n),
            episode_start: Array1::zeros(n),
            episode_start_next: Array1::zeros(n),
        };
        let flag = |x: bool| if x { 1.0 } else { 0.0 };
        for (r, t) in items.iter().enumerate() {
            b.obs.row_mut(r).assign(&ndarray::aview1(&t.obs));
            b.a_prev.row_mut(r).assign(&ndarray::aview1(&t.a_prev));
            b.action.row_mut(r).assign(&ndarray::aview1(&t.action));
            b.next_obs.row_mut(r).assign(&ndarray::aview1(&t.next_obs));
            b.reward[r] = t.reward;
            b.terminal[r] = flag(t.terminal);
            b.truncated[r] = flag(t.truncated);
            b.episode_start[r] = flag(t.episode_start);
            b.episode_start_next[r] = flag(t.episode_start_next);
        }
        Ok(b)
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    items: Vec<Transition>,
    /// Index of the oldest transition once the buffer is full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Physical storage order and the eviction cursor, for persistence.
    pub fn storage(&self) -> (&[Transition], usize) {
        (&self.items, self.head)
    }

    /// Inverse of [`ReplayBuffer::storage`].
    pub fn from_storage(
        capacity: usize,
        obs_dim: usize,
        act_dim: usize,
        items: Vec<Transition>,
        head: usize,
    ) -> Result<Self> {
        let mut b = ReplayBuffer::new(capacity, obs_dim, act_dim)?;
        if items.len() > capacity || (head != 0 && head >= items.len()) {
            return Err(Error::Format(format!(
                "replay storage of {} items with cursor {head} exceeds capacity {capacity}",
                items.len()
            )));
        }
        for t in &items {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim || t.action.len() != act_dim || t.a_prev.len() != act_dim {
                return Err(Error::Format("stored transition has the wrong dims".into()));
            }
        }
        b.items = items;
        b.head = head;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim
            || t.next_obs.len() != self.obs_dim
            || t.action.len() != self.act_dim
            || t.a_prev.len() != self.act_dim
        {
            return Err(Error::config(format!(
                "transition dims (obs {}, next {}, action {}, prev {}) do not match buffer ({}, {})",
                t.obs.len(),
                t.next_obs.len(),
                t.action.len(),
                t.a_prev.len(),
                self.obs_dim,
                self.act_dim
            )));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(Error::Precondition("sampling from an empty replay buffer".into()));
        }
        let picks: Vec<&Transition> = (0..batch_size)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect();
        Batch::from_transitions(&picks)
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect()
    }
}

/// Checks that within each episode `a_prev` of step t equals `action` of
/// step t−1, and that episode starts carry a zero previous action. Returns
/// the offending position on failure.
pub fn validate_chain<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Result<(), usize> {
    let mut prev: Option<&Transition> = None;
    for (i, t) in transitions.into_iter().enumerate() {
        if t.episode_start {
            if t.a_prev.iter().any(|&x| x != 0.0) {
                return Err(i);
            }
        } else if let Some(p) = prev {
            if p.terminal || p.truncated || p.action != t.a_prev {
                return Err(i);
            }
        }
        prev = Some(t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: Real) -> Transition {
        Transition {
            obs: vec![tag, 0.0],
            a_prev: vec![0.0],
            action: vec![tag / 1000.0],
            reward: tag,
            next_obs: vec![tag + 1.0, 0.0],
            terminal: false,
            truncated: false,
            episode_start: false,
            episode_start_next: false,
        }
    }

    #[test]
    fn push_and_evict() {
        let mut b = ReplayBuffer::new(2, 2, 1).unwrap();
        b.push(tr(1.0)).unwrap();
        assert_eq!(b.len(), 1);
        b.push(tr(2.0)).unwrap();
        b.push(tr(3.0)).unwrap();
        assert_eq!(b.len(), 2);
        let rewards: Vec<Real> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0]);
    }

    #[test]
    fn wrong_dims_rejected() {
        let mut b = ReplayBuffer::new(4, 3, 1).unwrap();
        assert!(matches!(b.push(tr(0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn long_run_keeps_last_capacity_items_in_order() {
        let capacity = 100_000;
        let mut b = ReplayBuffer::new(capacity, 2, 1).unwrap();
        let mut oracle: Vec<Real> = Vec::new();
        for i in 0..1_000_000 {
            b.push(tr(i as Real)).unwrap();
            oracle.push(i as Real);
        }
        assert_eq!(b.len(), capacity);
        let got: Vec<Real> = b.iter().map(|t| t.reward).collect();
        assert_eq!(got, oracle[oracle.len() - capacity..]);
    }

    #[test]
    fn empty_sample_is_precondition_error() {
        let b = ReplayBuffer::new(4, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(8, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn single_item_batch_repeats_it() {
        let mut b = ReplayBuffer::new(4, 2, 1).unwrap();
        b.push(tr(5.0)).unwrap();
        let batch = b.sample(6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(batch.reward.iter().all(|&r| r == 5.0));
        assert_eq!(batch.obs.nrows(), 6);
    }

    #[test]
    fn cloned_rng_gives_identical_batch() {
        let mut b = ReplayBuffer::new(50, 2, 1).unwrap();
        for i in 0..50 {
            b.push(tr(i as Real)).unwrap();
        }
        let rng = ChaCha8Rng::seed_from_u64(17);
        let x = b.sample(32, &mut rng.clone()).unwrap();
        let y = b.sample(32, &mut rng.clone()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100, 2, 1).unwrap();
        for i in 0..100 {
            b.push(tr(i as Real)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1_000_000;
        let mut counts = vec![0usize; 100];
        for i in b.sample_indices(draws, &mut rng) {
            counts[i] += 1;
        }
        let p = 0.01;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        // Chi-square over 100 cells has mean 99 and sd sqrt(198).
        let mut chi2 = 0.0;
        for &c in &counts {
            chi2 += (c as f64 - mean).powi(2) / mean;
        }
        assert!((chi2 - 99.0).abs() < 3.0 * 198f64.sqrt(), "chi2 = {chi2}");
        // Each cell within 3σ after a Bonferroni correction over 100 cells.
        let z = 3.0 + (100f64).ln().sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() < z * sigma, "count {c}");
        }
    }

    #[test]
    fn chain_validator_flags_breaks() {
        let mut a = tr(1.0);
        a.episode_start = true;
        let mut b = tr(2.0);
        b.a_prev = a.action.clone();
        assert_eq!(validate_chain([&a, &b]), Ok(()));
        b.a_prev = vec![0.5];
        assert_eq!(validate_chain([&a, &b]), Err(1));
    }
}
