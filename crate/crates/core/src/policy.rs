//! Policy abstraction used by simulators and evaluators.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// A (possibly stochastic) mapping from states to action indices.
///
/// Policies act on their own trajectory's state only; any required
/// randomness comes from the caller-supplied generator so rollouts stay
/// reproducible.
pub trait Policy: Sync {
    fn act(&self, state: &[f64], rng: &mut ChaCha12Rng) -> usize;
}

/// Uniform random behavior policy.
#[derive(Debug, Clone, Copy)]
pub struct UniformRandom {
    pub action_count: usize,
}

impl Policy for UniformRandom {
    fn act(&self, _state: &[f64], rng: &mut ChaCha12Rng) -> usize {
        rng.random_range(0..self.action_count)
    }
}

/// Always plays one action; handy for tests and sanity rollouts.
#[derive(Debug, Clone, Copy)]
pub struct FixedAction(pub usize);

impl Policy for FixedAction {
    fn act(&self, _state: &[f64], _rng: &mut ChaCha12Rng) -> usize {
        self.0
    }
}
