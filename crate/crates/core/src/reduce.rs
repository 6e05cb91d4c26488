//! Thread-count independent reductions over realizations.
//!
//! Terms are grouped into fixed chunks of [`CHUNK`] consecutive indices. Each
//! chunk is accumulated sequentially, possibly on its own worker, and the
//! chunk partials are then combined by a fixed pairwise tree. Chunk boundaries
//! depend only on the number of terms, so the result is bitwise identical for
//! any rayon pool size.

use rayon::prelude::*;

pub const CHUNK: usize = 1024;

fn chunk_ranges(n: usize) -> impl IndexedParallelIterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(move |c| c * CHUNK..((c + 1) * CHUNK).min(n))
}

fn pairwise(parts: &[f64]) -> f64 {
    match parts.len() {
        0 => 0.0,
        1 => parts[0],
        n => pairwise(&parts[..n / 2]) + pairwise(&parts[n / 2..]),
    }
}

fn pairwise_vec(parts: &mut [Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => std::mem::take(&mut parts[0]),
        n => {
            let (lo, hi) = parts.split_at_mut(n / 2);
            let mut left = pairwise_vec(lo);
            let right = pairwise_vec(hi);
            for (l, r) in left.iter_mut().zip(&right) {
                *l += r;
            }
            left
        }
    }
}

/// `sum_{i < n} term(i)`.
pub fn sum_by<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let parts: Vec<f64> = chunk_ranges(n)
        .map(|range| range.fold(0.0, |acc, i| acc + term(i)))
        .collect();
    pairwise(&parts)
}

/// Elementwise sum of `n` vector contributions of length `len`. `add(i, acc)`
/// adds contribution `i` into `acc`.
pub fn accumulate<F>(n: usize, len: usize, add: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if n == 0 {
        return vec![0.0; len];
    }
    let mut parts: Vec<Vec<f64>> = chunk_ranges(n)
        .map(|range| {
            let mut acc = vec![0.0; len];
            for i in range {
                add(i, &mut acc);
            }
            acc
        })
        .collect();
    pairwise_vec(&mut parts)
}

/// Deterministic sum of a slice.
pub fn sum(values: &[f64]) -> f64 {
    sum_by(values.len(), |i| values[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_exact_integer_sums() {
        let v: Vec<f64> = (0..5000).map(|i| i as f64).collect();
        assert_eq!(sum(&v), 4999.0 * 5000.0 / 2.0);
        assert_eq!(sum(&[]), 0.0);
    }

    #[test]
    fn vector_accumulation() {
        let acc = accumulate(3000, 2, |i, a| {
            a[0] += 1.0;
            a[1] += i as f64;
        });
        assert_eq!(acc, vec![3000.0, 2999.0 * 3000.0 / 2.0]);
        assert_eq!(accumulate(0, 3, |_, _| {}), vec![0.0; 3]);
    }

    #[test]
    fn independent_of_pool_size() {
        let v: Vec<f64> = (0..10_000).map(|i| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (i + 1) as f64).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sum(&v))
        };
        assert_eq!(run(1).to_bits(), run(4).to_bits());
    }
}
