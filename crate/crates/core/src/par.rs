//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the closures run on the current rayon pool;
//! without it they run on the calling thread. Reductions always split the
//! index range into [`CHUNK`]-sized blocks and merge block results in
//! ascending order, so floating-point results are identical for every
//! thread count and for both builds.

/// Block size for chunked reductions.
pub const CHUNK: usize = 512;

/// Evaluates `f` at `0..n` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Splits `0..n` into blocks of [`CHUNK`], folds each block into a fresh
/// accumulator with `fold`, and merges the block accumulators left to right.
pub fn chunked_reduce<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let blocks = n.div_ceil(CHUNK);
    let partials = map_indexed(blocks, |b| {
        let mut acc = init();
        let end = ((b + 1) * CHUNK).min(n);
        for i in b * CHUNK..end {
            fold(&mut acc, i);
        }
        acc
    });
    let mut out = init();
    for p in partials {
        merge(&mut out, p);
    }
    out
}

/// Fills `out` in blocks of `block_len` elements, handing each block and its
/// index to `f`.
pub fn for_each_block_mut<T, F>(out: &mut [T], block_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(block_len)
            .enumerate()
            .for_each(|(b, chunk)| f(b, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(block_len)
            .enumerate()
            .for_each(|(b, chunk)| f(b, chunk));
    }
}

/// Runs two closures, concurrently when the `parallel` feature is on.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Deterministic sum of `f(i)` over `0..n`.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunked_reduce(n, || 0.0, |acc, i| *acc += f(i), |a, b| *a += b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(2000, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 3 * i));
    }

    #[test]
    fn chunked_sum_matches_sequential_order() {
        let n: usize = 10_000;
        let f = |i: usize| 1.0 / (1.0 + i as f64);
        let mut expected = 0.0;
        for b in 0..n.div_ceil(CHUNK) {
            let mut block = 0.0;
            for i in b * CHUNK..((b + 1) * CHUNK).min(n) {
                block += f(i);
            }
            expected += block;
        }
        assert_eq!(sum(n, f).to_bits(), expected.to_bits());
    }

    #[test]
    fn empty_range() {
        assert_eq!(sum(0, |_| 1.0), 0.0);
        assert!(map_indexed(0, |i| i).is_empty());
    }
}
