//! Worker-count policy.
//!
//! `DESCAN_THREADS` caps the number of worker threads used by batched
//! kernels; unset, the available parallelism is used. Results are
//! bit-identical across runs at a fixed thread count (partial results are
//! reduced in a fixed order), which is what the reproducibility contract
//! requires.

use std::sync::OnceLock;

pub fn worker_threads() -> usize {
    static CACHE: OnceLock<usize> = OnceLock::new();
    *CACHE.get_or_init(|| {
        std::env::var("DESCAN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}
