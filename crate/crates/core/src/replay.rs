//! Fixed-capacity experience replay with uniform sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, QvpoError, Result};

/// One environment step `(s, a, r, s', done)`.
///
/// `done` stops bootstrapping in the TD target, so it must only be set for
/// true terminal states, not for time-limit cut-offs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Ring buffer of transitions. Once full, each push overwrites the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(QvpoError::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Slot the next push will write to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, transition: Transition) -> Result<()> {
        check_len("transition state", self.obs_dim, transition.state.len())?;
        check_len("transition next state", self.obs_dim, transition.next_state.len())?;
        check_len("transition action", self.action_dim, transition.action.len())?;
        if !transition.reward.is_finite() {
            return Err(QvpoError::NonFinite(format!(
                "transition reward {}",
                transition.reward
            )));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[self.cursor] = transition;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    /// Indices of `n` uniform draws with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.storage.is_empty() {
            return Err(QvpoError::Contract("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.storage.len())).collect())
    }

    /// `n` transitions drawn uniformly with replacement, returned by value.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| self.storage[i].clone())
            .collect())
    }
}
