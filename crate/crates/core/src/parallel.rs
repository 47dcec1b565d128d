//! Deterministic in-op parallelism helper.
//!
//! Work is split into disjoint output chunks; each chunk is computed with the
//! same inner loop order as the serial path, so enabling the `parallel` feature
//! (or varying thread counts) cannot change a single output bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    }
}

/// Four parallel buffers split into aligned per-index chunks; used by backward
/// kernels that produce several disjoint gradient streams per batch element.
pub fn for_each_chunk_mut4<T, F>(
    d0: (&mut [T], usize),
    d1: (&mut [T], usize),
    d2: (&mut [T], usize),
    d3: (&mut [T], usize),
    f: F,
) where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T], &mut [T], &mut [T]) + Sync,
{
    let n = if d0.1 > 0 { d0.0.len() / d0.1 } else { 0 };
    if n == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        d0.0.par_chunks_mut(d0.1.max(1))
            .zip(d1.0.par_chunks_mut(d1.1.max(1)))
            .zip(d2.0.par_chunks_mut(d2.1.max(1)))
            .zip(d3.0.par_chunks_mut(d3.1.max(1)))
            .enumerate()
            .for_each(|(i, (((c0, c1), c2), c3))| f(i, c0, c1, c2, c3));
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut i0 = d0.0.chunks_mut(d0.1.max(1));
        let mut i1 = d1.0.chunks_mut(d1.1.max(1));
        let mut i2 = d2.0.chunks_mut(d2.1.max(1));
        let mut i3 = d3.0.chunks_mut(d3.1.max(1));
        for i in 0..n {
            match (i0.next(), i1.next(), i2.next(), i3.next()) {
                (Some(c0), Some(c1), Some(c2), Some(c3)) => f(i, c0, c1, c2, c3),
                _ => break,
            }
        }
    }
}
