//! Deterministic, hierarchically derived random streams.
//!
//! Every source of randomness in the crate is an [`RngStream`]: a value
//! identified by a root seed and a stream id obtained by folding a label
//! path through a 64-bit mixer. Identical (seed, labels) always produce
//! the identical draw sequence, on any thread and in any execution order,
//! so replication sweeps can run in parallel without shared RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Weyl increment from splitmix64.
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; bijective on u64 with good avalanche.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Value handle for one reproducible random stream.
///
/// Streams are cheap to copy and never share mutable state; call
/// [`RngStream::rng`] to materialize a generator positioned at the start
/// of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
}

impl RngStream {
    /// Root stream for a seed (empty label path).
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            stream_id: mix(seed ^ GOLDEN),
        }
    }

    /// Child stream for one more path label.
    pub fn child(&self, label: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: mix(self.stream_id ^ mix(label.wrapping_add(GOLDEN))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut bytes = [0u8; 32];
        let mut state = self.seed ^ mix(self.stream_id);
        for chunk in bytes.chunks_exact_mut(8) {
            state = state.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix(state).to_le_bytes());
        }
        ChaCha12Rng::from_seed(bytes)
    }
}

/// Derive the stream identified by a label path under a root seed.
///
/// Pure function: same inputs yield the same stream; distinct label paths
/// (including prefixes of one another) yield streams of independent
/// quality.
pub fn derive_stream(seed: u64, labels: &[u64]) -> RngStream {
    labels
        .iter()
        .fold(RngStream::new(seed), |s, &label| s.child(label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a = derive_stream(42, &[0, 0]);
        let b = derive_stream(42, &[0, 0]);
        assert_eq!(a, b);
        let mut ra = a.rng();
        let mut rb = b.rng();
        for _ in 0..100 {
            assert_eq!(ra.random::<u64>(), rb.random::<u64>());
        }
    }

    #[test]
    fn sibling_streams_decorrelated() {
        // 10^4 standard-normal-ish draws from sibling streams should have
        // sample correlation below 0.05.
        let a = derive_stream(42, &[0, 0]);
        let b = derive_stream(42, &[0, 1]);
        let mut ra = a.rng();
        let mut rb = b.rng();
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| ra.random::<f64>() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| rb.random::<f64>() - 0.5).collect();
        assert_ne!(xs[0], ys[0], "first draws should differ");
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..n {
            sxy += (xs[i] - mx) * (ys[i] - my);
            sxx += (xs[i] - mx).powi(2);
            syy += (ys[i] - my).powi(2);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 0.05, "correlation {corr} too large");
    }

    #[test]
    fn prefix_paths_differ() {
        let a = derive_stream(7, &[0]);
        let b = derive_stream(7, &[0, 0]);
        assert_ne!(a, b);
        assert_ne!(a.rng().random::<u64>(), b.rng().random::<u64>());
    }

    #[test]
    fn thread_count_irrelevant() {
        // Purity: deriving and drawing in many threads matches the
        // single-threaded sequence.
        let reference: Vec<u64> = {
            let mut r = derive_stream(42, &[7]).rng();
            (0..64).map(|_| r.random::<u64>()).collect()
        };
        let handles: Vec<_> = (0..8)
            .map(|_| {
                std::thread::spawn(|| {
                    let mut r = derive_stream(42, &[7]).rng();
                    (0..64).map(|_| r.random::<u64>()).collect::<Vec<u64>>()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    }
}
