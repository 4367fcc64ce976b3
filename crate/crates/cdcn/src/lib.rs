//! Blind single-image motion deblurring with per-pixel blur-kernel
//! estimation.

pub mod cdcr;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pmpb;
pub mod tensor;
pub mod trainer;

/// Cap internal parallelism from the `CDCN_THREADS` environment variable
/// (default: all cores). Parallel kernels produce bitwise-identical results
/// for any thread count; the cap only bounds resource use.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("CDCN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
