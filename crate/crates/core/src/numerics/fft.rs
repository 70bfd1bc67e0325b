//! Linear convolution and correlation of real sequences.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

const DIRECT_LIMIT: usize = 1024;

fn plan(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(len), planner.plan_fft_inverse(len))
}

fn to_complex(x: &[f64], len: usize) -> Vec<Complex64> {
    let mut v = vec![Complex64::new(0.0, 0.0); len];
    for (c, &r) in v.iter_mut().zip(x) {
        c.re = r;
    }
    v
}

/// Full linear convolution, length a.len() + b.len() − 1.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) < DIRECT_LIMIT / 8 || out_len < DIRECT_LIMIT {
        let mut out = vec![0.0; out_len];
        for (i, &x) in a.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let len = out_len.next_power_of_two();
    let (fwd, inv) = plan(len);
    let mut fa = to_complex(a, len);
    let mut fb = to_complex(b, len);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / len as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// out[m] = Σ_k x[m + k]·w[k] for m = 0..x.len() (zero beyond the ends).
pub fn correlate(x: &[f64], w: &[f64]) -> Vec<f64> {
    if x.is_empty() || w.is_empty() {
        return vec![0.0; x.len()];
    }
    let rev: Vec<f64> = w.iter().rev().copied().collect();
    let full = convolve(x, &rev);
    // full[m + w.len() − 1] = Σ_k x[m + k] w[k]
    (0..x.len()).map(|m| full[m + w.len() - 1]).collect()
}

/// Convolution with a fixed kernel, transformed once and reused.
pub struct FftConvolver {
    len: usize,
    kernel_len: usize,
    kernel_hat: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FftConvolver {
    /// Prepares for signals of length `signal_len`.
    pub fn new(kernel: &[f64], signal_len: usize) -> Self {
        let len = (signal_len + kernel.len()).next_power_of_two();
        let (fwd, inv) = plan(len);
        let mut kernel_hat = to_complex(kernel, len);
        fwd.process(&mut kernel_hat);
        FftConvolver { len, kernel_len: kernel.len(), kernel_hat, fwd, inv }
    }

    /// Entries `start..start+count` of the full linear convolution.
    pub fn apply(&self, signal: &[f64], start: usize, count: usize) -> Vec<f64> {
        assert!(signal.len() + self.kernel_len <= self.len + 1);
        let mut s = to_complex(signal, self.len);
        self.fwd.process(&mut s);
        for (x, y) in s.iter_mut().zip(&self.kernel_hat) {
            *x *= y;
        }
        self.inv.process(&mut s);
        let scale = 1.0 / self.len as f64;
        s[start..start + count].iter().map(|c| c.re * scale).collect()
    }
}
