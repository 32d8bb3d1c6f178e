use rand::Rng;

use crate::cmdp::Transition;

/// Fixed-capacity FIFO ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        }
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

    /// Appends, overwriting the oldest record once full.
    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// `n` draws with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        assert!(!self.is_empty(), "sampling from an empty replay buffer");
        (0..n)
            .map(|_| self.storage[rng.gen_range(0..self.storage.len())])
            .collect()
    }

    /// Next states of `k` uniformly drawn stored transitions.
    pub fn sample_next_states<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty replay buffer");
        (0..k)
            .map(|_| self.storage[rng.gen_range(0..self.storage.len())].s_next)
            .collect()
    }
}
