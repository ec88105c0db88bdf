//! Data-parallel helpers with a sequential fallback.
//!
//! Results are always combined in input order, so output is bit-identical
//! across execution modes and thread counts. Without the `parallel`
//! feature every mode runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, returning results in input order.
pub fn map_ordered<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(&f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `items` in waves of `wave` and folds the results in input order.
///
/// Only one wave of results is alive at a time, which bounds memory when
/// each result is large.
pub fn map_fold<T, R, A, F, G>(exec: Execution, items: &[T], wave: usize, f: F, init: A, mut fold: G) -> A
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
    G: FnMut(A, R) -> A,
{
    let wave = wave.max(1);
    let mut acc = init;
    for chunk in items.chunks(wave) {
        for r in map_ordered(exec, chunk, &f) {
            acc = fold(acc, r);
        }
    }
    acc
}

/// A reasonable wave size for [`map_fold`].
pub fn default_wave() -> usize {
    #[cfg(feature = "parallel")]
    {
        (4 * rayon::current_num_threads()).max(8)
    }
    #[cfg(not(feature = "parallel"))]
    {
        8
    }
}

/// Mixes a base seed with a label into an independent stream seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
