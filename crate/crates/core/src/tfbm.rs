//! Tempered fractional Brownian motion of the second kind (TFBMII): the
//! moving-average kernel, three independent covariance routes and two path
//! generators.

use crate::error::{domain, FlurError, Result};
use crate::numerics::linalg::{cholesky, Matrix};
use crate::numerics::quad::{quad_1d, quad_1d_points, quad_2d_singular_diagonal, quad_endpoint_power, quad_to_infinity, quad_to_infinity_power, QuadratureSpec};
use crate::numerics::special::{bessel_k, gamma};
use crate::numerics::{gaussian_stream, SeedTree};
use crate::process::{ProcessSpec, Simulator, TemperingRegime};
use crate::tfcalc::{tfi_at, SampledFunction, Side};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfbmParams {
    pub d: f64,
    pub lambda: f64,
    pub sigma2: f64,
}

impl TfbmParams {
    pub fn new(d: f64, lambda: f64, sigma2: f64) -> Result<Self> {
        let p = TfbmParams { d, lambda, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > -0.5) || !self.d.is_finite() {
            return domain(format!("TFBMII needs d > -1/2, got {}", self.d));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return domain(format!("TFBMII needs lambda >= 0, got {}", self.lambda));
        }
        if !(self.sigma2 > 0.0) {
            return domain(format!("sigma2 must be > 0, got {}", self.sigma2));
        }
        Ok(())
    }

    fn require_closed_form(&self) -> Result<()> {
        self.validate()?;
        if !(self.d > 0.0 && self.lambda > 0.0) {
            return domain(format!(
                "the Bessel-form covariance needs d > 0 and lambda > 0, got d = {}, lambda = {}",
                self.d, self.lambda
            ));
        }
        Ok(())
    }
}

/// Sampled TFBMII path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub params: TfbmParams,
    /// Diagonal jitter used by the Cholesky factorisation (0 for other generators).
    pub jitter: f64,
}

/// Constant c(d,λ) = 1/(√π Γ(d) (2λ)^{d−1/2}) such that
/// Cov(B(t), B(s)) = σ² c ∫₀ᵗ∫₀ˢ |u−v|^{d−1/2} K_{d−1/2}(λ|u−v|) dv du
/// for B defined as the Wiener integral of h/Γ(d+1).
pub fn bessel_constant(d: f64, lambda: f64) -> Result<f64> {
    Ok(1.0 / (PI.sqrt() * gamma(d)? * (2.0 * lambda).powf(d - 0.5)))
}

/// The constant as printed with the closed form, 2/(√π Γ(d) (2λ)^{d−1/2}),
/// which is twice `bessel_constant`. Kept for reporting.
pub fn printed_bessel_constant(d: f64, lambda: f64) -> Result<f64> {
    Ok(2.0 * bessel_constant(d, lambda)?)
}

/// Covariance density k(r) = c(d,λ) r^{d−1/2} K_{d−1/2}(λ r), r > 0.
pub fn bessel_density(d: f64, lambda: f64, r: f64) -> Result<f64> {
    let c = bessel_constant(d, lambda)?;
    let nu = d - 0.5;
    if r == 0.0 {
        if nu > 0.0 {
            return Ok(c * gamma(nu)? * 2f64.powf(nu - 1.0) * lambda.powf(-nu));
        }
        return Ok(f64::INFINITY);
    }
    Ok(c * r.powf(nu) * bessel_k(nu, lambda * r)?)
}

// Exponent of the diagonal singularity of k(r).
fn density_exponent(d: f64) -> f64 {
    if d < 0.5 {
        2.0 * d - 1.0
    } else if d == 0.5 {
        -0.5
    } else {
        0.0
    }
}

fn pos_pow(x: f64, d: f64) -> f64 {
    if x > 0.0 {
        x.powf(d)
    } else {
        0.0
    }
}

fn default_spec() -> QuadratureSpec {
    QuadratureSpec { abs_tol: 1e-13, rel_tol: 1e-11, max_subdivisions: 5000 }
}

/// h_{d,λ}(t;y) = (t−y)_+^d e^{−λ(t−y)_+} − (−y)_+^d e^{−λ(−y)_+}
///               + λ ∫₀ᵗ (s−y)_+^d e^{−λ(s−y)_+} ds.
pub fn kernel_h(params: &TfbmParams, t: f64, y: f64) -> Result<f64> {
    kernel_h_with(params, t, y, &default_spec())
}

pub fn kernel_h_with(params: &TfbmParams, t: f64, y: f64, spec: &QuadratureSpec) -> Result<f64> {
    params.validate()?;
    let (d, lambda) = (params.d, params.lambda);
    let term = |x: f64| if x > 0.0 { pos_pow(x, d) * (-lambda * x).exp() } else { 0.0 };
    let mut h = term(t - y) - term(-y);
    if lambda > 0.0 && t != 0.0 {
        let (lo, hi, sign) = if t > 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
        if y < hi {
            // integrate over s ∈ [max(lo, y), hi] in the offset r = s − y
            let r0 = (lo - y).max(0.0);
            let r1 = hi - y;
            let f = |r: f64| r.powf(d) * (-lambda * r).exp();
            let integral = if r0 == 0.0 {
                quad_endpoint_power(f, r1, d.min(0.0), spec)?
            } else {
                quad_1d(f, r0, r1, spec)?
            };
            h += sign * lambda * integral;
        }
    }
    Ok(h)
}

// h(t; −z) for z > 0 written as d ∫₀ᵗ (s+z)^{d−1} e^{−λ(s+z)} ds, free of the
// cancellation between the first two terms when z ≫ t.
fn kernel_h_left(params: &TfbmParams, t: f64, z: f64, spec: &QuadratureSpec) -> Result<f64> {
    let (d, lambda) = (params.d, params.lambda);
    if d == 0.0 {
        return Ok(0.0);
    }
    let f = |s: f64| (s + z).powf(d - 1.0) * (-lambda * (s + z)).exp();
    if z > 4.0 * t {
        return Ok(d * crate::numerics::quad::gl16_integrate(f, 0.0, t));
    }
    Ok(d * quad_1d(f, 0.0, t, spec)?)
}

/// |Γ(d+1)·𝕀^{d,λ}_− 1_{[0,t]}(y) − h(t;y)| with the integral taken from the
/// tempered calculus module.
pub fn tfi_indicator_identity_check(params: &TfbmParams, t: f64, y: f64) -> Result<f64> {
    params.validate()?;
    if !(params.d > 0.0) {
        return domain("the identity needs d > 0");
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if t > 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
    let ind = SampledFunction::from_fn(|_| sign, lo, hi, (hi - lo) / 64.0)?;
    let lhs = gamma(params.d + 1.0)? * tfi_at(&ind, params.d, params.lambda, Side::Minus, y)?;
    Ok((lhs - kernel_h(params, t, y)?).abs())
}

/// σ² ∫ h(t;y) h(s;y) dy / Γ(d+1)², the Wiener-integral covariance.
pub fn covariance_time_domain(params: &TfbmParams, t: f64, s: f64) -> Result<f64> {
    params.validate()?;
    if t < 0.0 || s < 0.0 {
        return domain("times must be >= 0");
    }
    if t == 0.0 || s == 0.0 {
        return Ok(0.0);
    }
    if params.lambda == 0.0 && params.d >= 0.5 {
        return Err(FlurError::Divergence("lambda = 0 needs d < 1/2".into()));
    }
    let inner = QuadratureSpec { abs_tol: 1e-15, rel_tol: 1e-13, max_subdivisions: 5000 };
    let outer = QuadratureSpec { abs_tol: 1e-13, rel_tol: 1e-11, max_subdivisions: 20_000 };
    let err = std::cell::RefCell::new(None);
    let catch = |r: Result<f64>| {
        r.unwrap_or_else(|e| {
            err.borrow_mut().get_or_insert(e);
            0.0
        })
    };
    // y < 0
    let left_fn = |z: f64| catch(kernel_h_left(params, t, z, &inner)) * catch(kernel_h_left(params, s, z, &inner));
    let split = t.max(s);
    let decay = if params.lambda > 0.0 { 2.0 } else { 2.0 - 2.0 * params.d };
    let left = quad_1d(left_fn, 0.0, split, &outer)? + quad_to_infinity_power(left_fn, split, decay, &outer)?;
    // 0 ≤ y ≤ max(t, s)
    let top = t.max(s);
    let mut pts = vec![0.0, t.min(s), top];
    pts.dedup();
    let right = quad_1d_points(
        |y: f64| catch(kernel_h_with(params, t, y, &inner)) * catch(kernel_h_with(params, s, y, &inner)),
        &pts,
        &outer,
    )?;
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    let g = gamma(params.d + 1.0)?;
    Ok(params.sigma2 * (left + right) / (g * g))
}

pub fn variance_time_domain(params: &TfbmParams, t: f64) -> Result<f64> {
    covariance_time_domain(params, t, t)
}

/// Cov(B(t), B(s)) from the Bessel closed form by diagonal-singular 2-D
/// quadrature.
pub fn covariance(params: &TfbmParams, t: f64, s: f64) -> Result<f64> {
    covariance_with(params, t, s, &QuadratureSpec { abs_tol: 1e-13, rel_tol: 1e-11, max_subdivisions: 5000 })
}

pub fn covariance_with(params: &TfbmParams, t: f64, s: f64, spec: &QuadratureSpec) -> Result<f64> {
    params.require_closed_form()?;
    if t < 0.0 || s < 0.0 {
        return domain("times must be >= 0");
    }
    if t == 0.0 || s == 0.0 {
        return Ok(0.0);
    }
    let (d, lambda) = (params.d, params.lambda);
    let c = bessel_constant(d, lambda)?;
    let nu = d - 0.5;
    let k0 = bessel_density(d, lambda, 0.0)?;
    let g = |_u: f64, _v: f64, r: f64| {
        if r == 0.0 {
            return k0;
        }
        c * r.powf(nu) * bessel_k(nu, lambda * r).unwrap_or(f64::NAN)
    };
    Ok(params.sigma2 * quad_2d_singular_diagonal(g, (0.0, t), (0.0, s), density_exponent(d), &[], spec)?)
}

/// Var B(τ) = 2σ² ∫₀^τ (τ − r) k(r) dr.
pub fn variance(params: &TfbmParams, tau: f64) -> Result<f64> {
    params.require_closed_form()?;
    if tau < 0.0 {
        return domain("time must be >= 0");
    }
    if tau == 0.0 {
        return Ok(0.0);
    }
    let (d, lambda) = (params.d, params.lambda);
    let c = bessel_constant(d, lambda)?;
    let nu = d - 0.5;
    let spec = QuadratureSpec { abs_tol: 1e-14, rel_tol: 1e-12, max_subdivisions: 5000 };
    let f = |r: f64| {
        if r == 0.0 {
            return 0.0;
        }
        2.0 * (tau - r) * c * r.powf(nu) * bessel_k(nu, lambda * r).unwrap_or(f64::NAN)
    };
    Ok(params.sigma2 * quad_endpoint_power(f, tau, density_exponent(d), &spec)?)
}

/// Covariance matrix on a set of positive times via stationary increments,
/// Cov(B(t),B(s)) = (V(t) + V(s) − V(|t−s|))/2.
pub fn covariance_matrix(params: &TfbmParams, times: &[f64]) -> Result<Matrix> {
    let key = |x: f64| (x * 1e12).round() as i64;
    let mut cache: HashMap<i64, f64> = HashMap::new();
    let mut v = |x: f64| -> Result<f64> {
        if let Some(&val) = cache.get(&key(x)) {
            return Ok(val);
        }
        let val = if params.d == 0.0 { params.sigma2 * x } else { variance(params, x)? };
        cache.insert(key(x), val);
        Ok(val)
    };
    let n = times.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let c = 0.5 * (v(times[i])? + v(times[j])? - v((times[i] - times[j]).abs())?);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    Ok(m)
}

/// Cov(B(t),B(s)) from the spectral form
/// (1/2π) ∫ (e^{iωt}−1)(e^{−iωs}−1) ω^{−2} (λ²+ω²)^{−d} dω.
pub fn covariance_harmonizable_oracle(params: &TfbmParams, t: f64, s: f64) -> Result<f64> {
    params.validate()?;
    let (d, lambda) = (params.d, params.lambda);
    if lambda == 0.0 && !(d.abs() < 0.5) {
        return domain("lambda = 0 needs |d| < 1/2");
    }
    if t == 0.0 || s == 0.0 {
        return Ok(0.0);
    }
    let g = |w: f64| (lambda * lambda + w * w).powf(-d) / (w * w);
    // sin(a w)/w, finite at the origin
    let sw = |a: f64, w: f64| if w == 0.0 { a } else { (a * w).sin() / w };
    // |e^{iωt}−1|·|e^{iωs}−1| cross term divided by ω², then times (λ²+ω²)^{−d}
    let integrand = |w: f64| {
        let (a, b) = (sw(0.5 * t, w), sw(0.5 * s, w));
        (4.0 * a * a * b * b * w * w + sw(t, w) * sw(s, w)) * (lambda * lambda + w * w).powf(-d)
    };
    let freqs: Vec<f64> = [t, s, (t - s).abs()].into_iter().filter(|a| *a > 0.0).collect();
    let a_min = freqs.iter().copied().fold(f64::INFINITY, f64::min);
    let a_max = freqs.iter().copied().fold(0.0, f64::max);
    // remainder of the two-term oscillatory tail expansion is ≲ |g'(Ω)|/a²
    let target = 1e-14;
    let omega = ((2.0 + 2.0 * d) / (a_min * a_min * target)).powf(1.0 / (3.0 + 2.0 * d)).max(100.0 / a_min);
    let spec = QuadratureSpec { abs_tol: 1e-14, rel_tol: 1e-12, max_subdivisions: 1_000_000 };
    let step = PI / a_max;
    let n_pts = (omega / step).ceil() as usize;
    let mut pts: Vec<f64> = (0..n_pts).map(|i| i as f64 * step).collect();
    pts.push(omega);
    let head = if lambda == 0.0 && d > 0.0 {
        // ω^{−2d} singularity at the origin
        let first = quad_endpoint_power(|w| integrand(w), pts[1], -2.0 * d, &spec)?;
        first + quad_1d_points(|w| integrand(w), &pts[1..], &spec)?
    } else {
        quad_1d_points(|w| integrand(w), &pts, &spec)?
    };
    // tail: constant part plus cos(aω) parts
    let mut coef_const = 1.0;
    let mut osc = vec![(-1.0, t), (-1.0, s)];
    if t == s {
        coef_const += 1.0;
    } else {
        osc.push((1.0, (t - s).abs()));
    }
    let tail_const = quad_to_infinity(g, omega, &spec)?;
    let gp = {
        let h = 1e-4 * omega;
        (g(omega + h) - g(omega - h)) / (2.0 * h)
    };
    let mut tail = coef_const * tail_const;
    for (c, a) in osc {
        tail += c * (-(a * omega).sin() * g(omega) / a - (a * omega).cos() * gp / (a * a));
    }
    Ok(params.sigma2 * (head + tail) / PI)
}

/// Draws Gaussian paths with the exact covariance on a fixed time grid.
pub struct CholeskySampler {
    params: TfbmParams,
    times: Vec<f64>,
    // indices of strictly positive times
    active: Vec<usize>,
    l: Matrix,
    jitter: f64,
}

pub const MAX_CHOLESKY_POINTS: usize = 2048;

impl CholeskySampler {
    /// Accepts d > 0, λ > 0, or d = 0 (Brownian motion, any λ).
    pub fn new(params: &TfbmParams, times: &[f64]) -> Result<Self> {
        if params.d != 0.0 {
            params.require_closed_form()?;
        } else {
            params.validate()?;
        }
        if times.len() > MAX_CHOLESKY_POINTS {
            return domain(format!("at most {MAX_CHOLESKY_POINTS} time points"));
        }
        if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|t| !(*t >= 0.0)) {
            return domain("times must be sorted and >= 0");
        }
        let active: Vec<usize> = (0..times.len()).filter(|&i| times[i] > 0.0).collect();
        let pos: Vec<f64> = active.iter().map(|&i| times[i]).collect();
        let cov = covariance_matrix(params, &pos)?;
        let ch = cholesky(&cov)?;
        Ok(CholeskySampler { params: *params, times: times.to_vec(), active, l: ch.l, jitter: ch.jitter })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample(&self, seeds: &SeedTree) -> GridPath {
        let z = gaussian_stream(seeds, self.active.len());
        let mut values = vec![0.0; self.times.len()];
        for (row, &idx) in self.active.iter().enumerate() {
            let lr = &self.l.data[row * self.l.cols..row * self.l.cols + row + 1];
            values[idx] = lr.iter().zip(&z).map(|(a, b)| a * b).sum();
        }
        GridPath { times: self.times.clone(), values, params: self.params, jitter: self.jitter }
    }
}

pub fn sample_path_cholesky(params: &TfbmParams, times: &[f64], seeds: &SeedTree) -> Result<GridPath> {
    Ok(CholeskySampler::new(params, times)?.sample(seeds))
}

/// (Nh)^{−(d+1/2)} S(⌊Nh·t⌋) on a grid in [0, 2] from a simulated process
/// with λ taken from the regime at sample size nh.
pub fn sample_path_invariance(
    spec: &ProcessSpec,
    regime: &TemperingRegime,
    nh: usize,
    grid: &[f64],
    seeds: &SeedTree,
) -> Result<GridPath> {
    let ls = regime.lambda_star();
    if !(ls > 0.0 && ls.is_finite()) {
        return domain("the invariance generator needs a moderately tempered regime");
    }
    if nh < 1024 {
        return domain("nh must be >= 1024");
    }
    if grid.iter().any(|t| !(0.0..=2.0).contains(t)) {
        return domain("grid must lie in [0, 2]");
    }
    let lambda = regime.lambda_at(nh as f64);
    let sim = Simulator::with_lambda(spec, lambda, 2 * nh)?;
    let x = sim.sample(seeds);
    let mut cum = Vec::with_capacity(x.len() + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for v in &x {
        acc += v;
        cum.push(acc);
    }
    let scale = (nh as f64).powf(-(spec.d + 0.5));
    let values = grid
        .iter()
        .map(|&t| {
            let k = ((nh as f64) * t).floor() as usize;
            scale * cum[k.min(x.len())]
        })
        .collect();
    Ok(GridPath {
        times: grid.to_vec(),
        values,
        params: TfbmParams { d: spec.d, lambda: ls, sigma2: spec.sigma * spec.sigma },
        jitter: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_trivial_cases() {
        let p = TfbmParams::new(0.3, 1.0, 1.0).unwrap();
        for y in [-2.0, 0.3, 5.0] {
            assert_eq!(kernel_h(&p, 0.0, y).unwrap(), 0.0);
        }
        assert_eq!(kernel_h(&p, 1.0, 1.5).unwrap(), 0.0);
        let p0 = TfbmParams::new(0.3, 0.0, 1.0).unwrap();
        let v = kernel_h(&p0, 1.0, -1.0).unwrap();
        assert!((v - (2f64.powf(0.3) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn left_form_matches_literal_kernel() {
        for &(d, l) in &[(0.3, 1.0), (1.5, 0.5), (-0.2, 0.7), (0.2, 0.0)] {
            let p = TfbmParams::new(d, l, 1.0).unwrap();
            for z in [0.01, 0.5, 3.0, 8.0] {
                let a = kernel_h(&p, 1.3, -z).unwrap();
                let b = kernel_h_left(&p, 1.3, z, &default_spec()).unwrap();
                assert!((a - b).abs() < 1e-12, "d={d} l={l} z={z} {a} {b}");
            }
        }
    }

    #[test]
    fn brownian_case_of_the_kernel() {
        // d = 0: h(t;y) = 1_{[0,t)}(y)
        let p = TfbmParams::new(0.0, 0.8, 1.0).unwrap();
        assert!((kernel_h(&p, 1.0, 0.4).unwrap() - 1.0).abs() < 1e-12);
        assert!(kernel_h(&p, 1.0, -0.4).unwrap().abs() < 1e-12);
    }

    #[test]
    fn exponential_density_at_d_one() {
        let p = TfbmParams::new(1.0, 1.0, 1.0).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((variance(&p, 1.0).unwrap() - e1).abs() < 1e-12);
        assert!((covariance(&p, 1.0, 1.0).unwrap() - e1).abs() < 1e-10);
        assert!((covariance_harmonizable_oracle(&p, 1.0, 1.0).unwrap() - e1).abs() < 1e-9);
        assert!((printed_bessel_constant(1.0, 1.0).unwrap() / bessel_constant(1.0, 1.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_and_two_dimensional_routes_agree() {
        let p = TfbmParams::new(0.3, 1.0, 1.7).unwrap();
        let v1 = variance(&p, 0.8).unwrap();
        let v2 = covariance(&p, 0.8, 0.8).unwrap();
        assert!(((v1 - v2) / v1).abs() < 1e-9, "{v1} {v2}");
        let m = covariance_matrix(&p, &[0.4, 0.9]).unwrap();
        let c = covariance(&p, 0.4, 0.9).unwrap();
        assert!(((m[(0, 1)] - c) / c).abs() < 1e-9);
        assert_eq!(covariance(&p, 0.0, 0.5).unwrap(), 0.0);
        assert!(covariance(&TfbmParams::new(-0.2, 1.0, 1.0).unwrap(), 1.0, 1.0).is_err());
    }

    #[test]
    fn fbm_type_limit_spectral_vs_kernel() {
        let p = TfbmParams::new(0.2, 0.0, 1.0).unwrap();
        let a = covariance_harmonizable_oracle(&p, 1.0, 1.0).unwrap();
        let b = variance_time_domain(&p, 1.0).unwrap();
        assert!(((a - b) / b).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn cholesky_sampler_trivia() {
        let p = TfbmParams::new(0.3, 1.0, 1.0).unwrap();
        let path = sample_path_cholesky(&p, &[0.0], &SeedTree::new(1)).unwrap();
        assert_eq!(path.values, vec![0.0]);
        let times: Vec<f64> = (0..16).map(|i| (i + 1) as f64 / 16.0).collect();
        let m = covariance_matrix(&p, &times).unwrap();
        let ch = cholesky(&m).unwrap();
        assert!(ch.jitter <= 1e-8 * m.trace());
        let back = ch.l.matmul(&ch.l.transpose()).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-8);
    }

    #[test]
    fn integral_identity_for_the_kernel() {
        for d in [0.3, 1.0] {
            let p = TfbmParams::new(d, 1.0, 1.0).unwrap();
            for i in 0..=80 {
                let y = -3.0 + 0.05 * i as f64;
                assert!(tfi_indicator_identity_check(&p, 1.0, y).unwrap() < 1e-8);
            }
            assert_eq!(tfi_indicator_identity_check(&p, 0.0, 0.4).unwrap(), 0.0);
        }
    }
}
