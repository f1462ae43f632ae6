//! Chunked loops that run on rayon under [`Exec::Parallel`] and serially
//! otherwise. Each chunk is written by exactly one closure call, so both
//! paths produce identical bits.

use diffkit::Exec;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn is_parallel(exec: Exec) -> bool {
    #[cfg(feature = "parallel")]
    {
        !matches!(exec, Exec::Sequential)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = exec;
        false
    }
}

/// The default for crate-level work: parallel when the feature is on.
pub fn default_exec() -> Exec {
    Exec::default()
}

pub(crate) fn for_each_chunk<T: Send>(
    exec: Exec,
    data: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if chunk == 0 {
        return;
    }
    if is_parallel(exec) {
        #[cfg(feature = "parallel")]
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

pub(crate) fn for_each_chunk2<A: Send, B: Send>(
    exec: Exec,
    a: &mut [A],
    ca: usize,
    b: &mut [B],
    cb: usize,
    f: impl Fn(usize, &mut [A], &mut [B]) + Sync + Send,
) {
    if ca == 0 || cb == 0 {
        return;
    }
    if is_parallel(exec) {
        #[cfg(feature = "parallel")]
        a.par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(ca).zip(b.chunks_mut(cb)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
}

/// `(0..n).map(f).collect()`, possibly in parallel; output order is fixed.
pub(crate) fn map_range<T: Send>(exec: Exec, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if is_parallel(exec) {
        #[cfg(feature = "parallel")]
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
