//! Deterministic parallel reduction.
//!
//! Block-level sums use a pairwise tree with a fixed fan-in: the slice is
//! split in half recursively down to a fixed chunk size, chunks are folded
//! left-to-right, and the partial sums are combined up the tree. The
//! reduction tree depends only on the number of items, never on the thread
//! count or scheduling, so results are bit-stable across `--threads`
//! settings while still parallelizing via `rayon::join`.

/// Below this length the sum is a plain sequential fold.
const CHUNK: usize = 64;

/// Map each item through `f` and sum with a fixed-shape pairwise tree.
/// Returns `None` on an empty slice.
pub fn pairwise_map_sum<T, S, F, A>(items: &[T], f: &F, add: &A) -> Option<S>
where
    T: Sync,
    S: Send,
    F: Fn(&T) -> S + Sync,
    A: Fn(S, S) -> S + Sync,
{
    match items.len() {
        0 => None,
        n if n <= CHUNK => {
            let mut acc = f(&items[0]);
            for item in &items[1..] {
                acc = add(acc, f(item));
            }
            Some(acc)
        }
        n => {
            let (lo, hi) = items.split_at(n / 2);
            let (a, b) = rayon::join(|| pairwise_map_sum(lo, f, add), || pairwise_map_sum(hi, f, add));
            match (a, b) {
                (Some(a), Some(b)) => Some(add(a, b)),
                (x, None) | (None, x) => x,
            }
        }
    }
}

/// Pairwise sum of plain f64 values (same fixed tree as above).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_map_sum(values, &|&v| v, &|a, b| a + b).unwrap_or(0.0)
}
