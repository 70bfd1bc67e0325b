//! Special functions, quadrature, linear algebra, FFT helpers and seeded
//! randomness shared by the rest of the crate.

pub mod fft;
pub mod linalg;
pub mod quad;
pub mod rng;
pub mod special;

pub use linalg::{cholesky, Cholesky, Matrix};
pub use quad::{quad_1d, quad_2d_singular_diagonal, QuadratureSpec};
pub use rng::{gaussian_stream, SeedTree};
pub use special::{bessel_k, log_gamma};

/// Runs `f` on a pool of `threads` workers (0 = all cores); sequential
/// when parallelism is compiled out.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Ordered parallel map over 0..n.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
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
