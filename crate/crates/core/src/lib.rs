//! Numerical laboratory for tempered linear (FLUR) processes, tempered
//! fractional Brownian motion of the second kind, and the kernel and
//! piecewise-polynomial regression asymptotics they drive.

pub mod error;
pub mod experiments;
pub mod kernel;
pub mod piecewise;
pub mod numerics;
pub mod process;
pub mod selftest;
pub mod tfbm;
pub mod tfcalc;

pub use error::{FlurError, Result};
