//! Data-parallel loop helpers with a sequential fallback.
//!
//! Kernels parallelize only over disjoint output regions, so the parallel
//! and sequential paths execute identical per-element arithmetic and produce
//! bitwise-equal results. The runtime toggle lets one binary time both paths;
//! paper-protocol benchmarks run with parallelism off.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many rows the spawn overhead outweighs any win.
const MIN_PAR_ROWS: usize = 8;

/// Enable or disable the rayon paths at runtime. No-op without the
/// `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL_ENABLED.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Run `f(row_index, row)` over consecutive `row_len` chunks of `out`.
pub fn for_each_row<E: Send, F>(out: &mut [E], row_len: usize, f: F)
where
    F: Fn(usize, &mut [E]) + Send + Sync,
{
    assert!(row_len > 0 && out.len() % row_len == 0);
    let rows = out.len() / row_len;
    #[cfg(feature = "parallel")]
    if parallel_enabled() && rows >= MIN_PAR_ROWS {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = rows;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Run `f(i)` for `i in 0..n` where each call writes disjoint state.
///
/// Safety of the disjointness is on the caller; everything funneled through
/// here uses per-index output buffers collected afterwards.
pub fn map_indices<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n >= 2 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_for_each_row_matches_sequential() {
        let mut par = vec![0.0f32; 64 * 16];
        let mut seq = par.clone();
        let fill = |i: usize, row: &mut [f32]| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 31 + j) as f32 * 0.5;
            }
        };
        set_parallel(true);
        for_each_row(&mut par, 16, fill);
        set_parallel(false);
        for_each_row(&mut seq, 16, fill);
        set_parallel(true);
        assert_eq!(par, seq);
    }

    #[test]
    fn test_map_indices_order() {
        let v = map_indices(10, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36, 49, 64, 81]);
    }
}
