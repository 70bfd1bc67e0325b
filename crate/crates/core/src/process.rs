//! Tempered linear (FLUR) processes: coefficients, simulation, partial
//! sums, exact autocovariances and the power-series ratio of the
//! Tauberian lemma.

use crate::error::{domain, FlurError, Result};
use crate::numerics::fft::{correlate, FftConvolver};
use crate::numerics::quad::{quad_1d, quad_to_infinity, QuadratureSpec};
use crate::numerics::special::{gamma, ln_gamma_ratio_shifted};
use crate::numerics::{gaussian_stream, SeedTree};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// MA coefficients before tempering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientFamily {
    /// ω_{−d}(k) = Γ(k+d)/(Γ(k+1)Γ(d)).
    Binomial,
    /// b_0, b_1, … supplied by the caller; tempered by e^{−λk}.
    UserSupplied(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnovationLaw {
    Gaussian,
}

/// X(j) = σ Σ_k e^{−λk} b_d(k) ζ(j−k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub d: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub coefficient_family: CoefficientFamily,
    pub innovation_law: InnovationLaw,
}

fn is_nonpositive_integer(d: f64) -> bool {
    d <= 0.0 && d == d.floor()
}

impl ProcessSpec {
    /// Binomial-family Gaussian process.
    pub fn new(d: f64, lambda: f64, sigma: f64) -> Result<Self> {
        let s = ProcessSpec {
            d,
            lambda,
            sigma,
            coefficient_family: CoefficientFamily::Binomial,
            innovation_law: InnovationLaw::Gaussian,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        ProcessSpec { lambda, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d.is_finite() || (is_nonpositive_integer(self.d) && self.d != 0.0) {
            return domain(format!("d = {} is not admissible", self.d));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return domain(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return domain(format!("sigma must be > 0, got {}", self.sigma));
        }
        if let CoefficientFamily::UserSupplied(b) = &self.coefficient_family {
            if b.is_empty() || b.iter().any(|x| !x.is_finite()) {
                return domain("user-supplied coefficients must be finite and non-empty");
            }
            if self.d < 0.0 {
                // vanishing-sum condition, checkable only up to the supplied length
                let total: f64 = b.iter().sum();
                let scale: f64 = b.iter().map(|x| x.abs()).sum();
                if total.abs() > 1e-8 * scale {
                    return domain(format!("coefficients for d < 0 must sum to zero, sum = {total:e}"));
                }
            }
        }
        Ok(())
    }
}

/// λ_N as a function of the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Fixed(f64),
    /// λ_N = c·N^{−γ}.
    PowerLaw { c: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeClass {
    Weak,
    Moderate,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperingRegime {
    pub schedule: Schedule,
}

impl TemperingRegime {
    pub fn fixed(lambda: f64) -> Self {
        TemperingRegime { schedule: Schedule::Fixed(lambda) }
    }

    pub fn power_law(c: f64, gamma: f64) -> Self {
        TemperingRegime { schedule: Schedule::PowerLaw { c, gamma } }
    }

    /// λ*/N, the moderately tempered schedule with limit λ*.
    pub fn moderate(lambda_star: f64) -> Self {
        Self::power_law(lambda_star, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.schedule {
            Schedule::Fixed(l) => l >= 0.0 && l.is_finite(),
            Schedule::PowerLaw { c, gamma } => c >= 0.0 && c.is_finite() && gamma.is_finite(),
        };
        if !ok {
            return domain(format!("invalid tempering schedule {:?}", self.schedule));
        }
        Ok(())
    }

    /// λ at sample size n (n may be an effective, non-integer size).
    pub fn lambda_at(&self, n: f64) -> f64 {
        match self.schedule {
            Schedule::Fixed(l) => l,
            Schedule::PowerLaw { c, gamma } => c * n.powf(-gamma),
        }
    }

    /// λ* = lim N·λ_N.
    pub fn lambda_star(&self) -> f64 {
        match self.schedule {
            Schedule::Fixed(l) => {
                if l > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            Schedule::PowerLaw { c, gamma } => {
                if c == 0.0 || gamma > 1.0 {
                    0.0
                } else if gamma == 1.0 {
                    c
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn class(&self) -> RegimeClass {
        let ls = self.lambda_star();
        if ls == 0.0 {
            RegimeClass::Weak
        } else if ls.is_finite() {
            RegimeClass::Moderate
        } else {
            RegimeClass::Strong
        }
    }
}

/// How a path was generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMethod {
    /// Truncated moving average with M + 1 coefficients.
    MovingAverage { truncation: usize },
    /// Exact Gaussian law via circulant embedding of size m.
    CirculantEmbedding { embedding: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub values: Vec<f64>,
    /// Spec with λ set to the λ_N actually used.
    pub spec: ProcessSpec,
    pub n: usize,
    pub seed_path: SeedTree,
    /// MA truncation length; `None` for the exact embedding.
    pub truncation_m: Option<usize>,
    pub method: SimulationMethod,
}

/// ω_{−d}(k) at a single k (lgamma form for k + d > 0).
pub fn omega(d: f64, k: usize) -> f64 {
    if d == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let kf = k as f64;
    if kf + d > 0.0 {
        let g = gamma(d).unwrap_or(f64::NAN);
        let ln = ln_gamma_ratio_shifted(kf, d, 1.0).unwrap_or(f64::NAN);
        return ln.exp() / g;
    }
    let mut w = 1.0;
    for j in 1..=k {
        w *= (j as f64 + d - 1.0) / j as f64;
    }
    w
}

/// c_k = e^{−λk}·ω_{−d}(k) for k = 0..=m, by the product recurrence.
pub fn binomial_coefficients(d: f64, lambda: f64, m: usize) -> Result<Vec<f64>> {
    if is_nonpositive_integer(d) && d != 0.0 {
        return domain(format!("binomial coefficients undefined at d = {d}"));
    }
    if !(lambda >= 0.0) {
        return domain("lambda must be >= 0");
    }
    let mut c = vec![0.0; m + 1];
    c[0] = 1.0;
    if d == 0.0 {
        return Ok(c);
    }
    let mut w = 1.0;
    for k in 1..=m {
        let kf = k as f64;
        w *= (kf + d - 1.0) / kf;
        c[k] = w;
    }
    if lambda > 0.0 {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck *= (-lambda * k as f64).exp();
        }
    }
    Ok(c)
}

/// Certified bound on Σ_{k>m} c_k² using the majorant A·k^{d−1}e^{−λk}.
fn tail_bound(d: f64, lambda: f64, m: usize) -> f64 {
    let k1 = (m + 1) as f64;
    let g = gamma(d).unwrap_or(f64::NAN).abs();
    // sup_{k>m} |ω(k)| k^{1−d} is attained at k = m+1 or in the limit 1/|Γ(d)|
    let a = (omega(d, m + 1).abs() * k1.powf(1.0 - d)).max(1.0 / g);
    let p = 2.0 * d - 2.0;
    let first = k1.powf(p) * (-2.0 * lambda * k1).exp();
    let ratio = if p <= 0.0 { (-2.0 * lambda).exp() } else { ((k1 + 1.0) / k1).powf(p) * (-2.0 * lambda).exp() };
    if ratio >= 1.0 {
        return f64::INFINITY;
    }
    a * a * first / (1.0 - ratio)
}

/// Smallest M with Σ_{k>M} c_k² ≤ tail_tol.
pub fn truncation_length(d: f64, lambda: f64, tail_tol: f64) -> Result<usize> {
    if !(lambda > 0.0) {
        return domain("truncation_length needs lambda > 0; no finite truncation is certified at lambda = 0");
    }
    if !(tail_tol > 0.0) {
        return domain("tail_tol must be > 0");
    }
    if is_nonpositive_integer(d) {
        if d == 0.0 {
            return Ok(0);
        }
        return domain(format!("d = {d} is not admissible"));
    }
    if tail_bound(d, lambda, 0) <= tail_tol {
        return Ok(0);
    }
    let mut hi = 1usize;
    while tail_bound(d, lambda, hi) > tail_tol {
        hi = hi.checked_mul(2).ok_or_else(|| FlurError::Domain("truncation length overflow".into()))?;
        if hi as u64 > 1u64 << 50 {
            return domain("truncation length exceeds 2^50");
        }
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if tail_bound(d, lambda, mid) <= tail_tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

const TAIL_TOL: f64 = 1e-12;
const MA_MIN_BUDGET: usize = 1 << 16;

enum Engine {
    White,
    MovingAverage { conv: FftConvolver, m: usize },
    Circulant { sqrt_eig: Vec<f64>, m: usize, fft: Arc<dyn rustfft::Fft<f64>> },
}

/// Prepared generator for repeated draws from one (spec, λ, n).
pub struct Simulator {
    spec: ProcessSpec,
    n: usize,
    engine: Engine,
}

impl Simulator {
    /// Uses the λ_N of `regime` at sample size n.
    pub fn new(spec: &ProcessSpec, regime: &TemperingRegime, n: usize) -> Result<Self> {
        regime.validate()?;
        Self::with_lambda(spec, regime.lambda_at(n as f64), n)
    }

    pub fn with_lambda(spec: &ProcessSpec, lambda: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return domain("n must be >= 1");
        }
        let spec = spec.with_lambda(lambda);
        spec.validate()?;
        let engine = match &spec.coefficient_family {
            CoefficientFamily::UserSupplied(b) => {
                let c: Vec<f64> = b.iter().enumerate().map(|(k, x)| x * (-lambda * k as f64).exp()).collect();
                let m = c.len() - 1;
                Engine::MovingAverage { conv: FftConvolver::new(&c, n + m), m }
            }
            CoefficientFamily::Binomial if spec.d == 0.0 => Engine::White,
            CoefficientFamily::Binomial => {
                let ma_m = if lambda > 0.0 { Some(truncation_length(spec.d, lambda, TAIL_TOL)?.max(n)) } else { None };
                match ma_m {
                    Some(m) if m <= (16 * n).max(MA_MIN_BUDGET) => {
                        let c = binomial_coefficients(spec.d, lambda, m)?;
                        Engine::MovingAverage { conv: FftConvolver::new(&c, n + m), m }
                    }
                    _ => {
                        if lambda == 0.0 && spec.d >= 0.5 {
                            return Err(FlurError::Divergence(format!(
                                "variance is infinite for lambda = 0 and d = {} >= 1/2",
                                spec.d
                            )));
                        }
                        circulant_engine(&spec, n)?
                    }
                }
            }
        };
        Ok(Simulator { spec, n, engine })
    }

    pub fn method(&self) -> SimulationMethod {
        match &self.engine {
            Engine::White => SimulationMethod::MovingAverage { truncation: 0 },
            Engine::MovingAverage { m, .. } => SimulationMethod::MovingAverage { truncation: *m },
            Engine::Circulant { m, .. } => SimulationMethod::CirculantEmbedding { embedding: *m },
        }
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    /// One path of length n from the stream at `seeds`.
    pub fn sample(&self, seeds: &SeedTree) -> Vec<f64> {
        let sigma = self.spec.sigma;
        match &self.engine {
            Engine::White => gaussian_stream(seeds, self.n).into_iter().map(|z| sigma * z).collect(),
            Engine::MovingAverage { conv, m } => {
                let z = gaussian_stream(seeds, self.n + m);
                conv.apply(&z, *m, self.n).into_iter().map(|x| sigma * x).collect()
            }
            Engine::Circulant { sqrt_eig, m, fft } => {
                let m = *m;
                let z = gaussian_stream(seeds, m);
                let half = m / 2;
                let mut w = vec![Complex64::new(0.0, 0.0); m];
                w[0] = Complex64::new(sqrt_eig[0] * z[0], 0.0);
                w[half] = Complex64::new(sqrt_eig[half] * z[1], 0.0);
                let r = std::f64::consts::FRAC_1_SQRT_2;
                for k in 1..half {
                    let c = Complex64::new(z[2 * k] * r, z[2 * k + 1] * r) * sqrt_eig[k];
                    w[k] = c;
                    w[m - k] = c.conj();
                }
                fft.process(&mut w);
                let s = sigma / (m as f64).sqrt();
                w[..self.n].iter().map(|c| c.re * s).collect()
            }
        }
    }

    pub fn sample_path(&self, seeds: &SeedTree) -> SamplePath {
        let method = self.method();
        SamplePath {
            values: self.sample(seeds),
            spec: self.spec.clone(),
            n: self.n,
            seed_path: seeds.clone(),
            truncation_m: match method {
                SimulationMethod::MovingAverage { truncation } => Some(truncation),
                SimulationMethod::CirculantEmbedding { .. } => None,
            },
            method,
        }
    }
}

fn circulant_engine(spec: &ProcessSpec, n: usize) -> Result<Engine> {
    let mut m = 2 * (n.max(2) - 1).next_power_of_two();
    for _attempt in 0..4 {
        let half = m / 2;
        let acvf = theoretical_acvf(&ProcessSpec { sigma: 1.0, ..spec.clone() }, half)?;
        let mut row: Vec<Complex64> = (0..m)
            .map(|k| Complex64::new(if k <= half { acvf[k] } else { acvf[m - k] }, 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut row);
        let max = row.iter().map(|c| c.re).fold(0.0, f64::max);
        let min = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if min >= -1e-10 * max {
            let sqrt_eig = row.iter().take(half + 1).map(|c| c.re.max(0.0).sqrt()).collect();
            return Ok(Engine::Circulant { sqrt_eig, m, fft });
        }
        if _attempt == 3 {
            return Err(FlurError::NegativeEmbedding(min / max));
        }
        m *= 2;
    }
    unreachable!()
}

/// Simulates X(1..n) with λ_N from the regime.
pub fn simulate(spec: &ProcessSpec, regime: &TemperingRegime, n: usize, seeds: &SeedTree) -> Result<SamplePath> {
    Ok(Simulator::new(spec, regime, n)?.sample_path(seeds))
}

/// S(u) = Σ_{k=1}^{⌊N u⌋} X(k).
pub fn partial_sum(path: &SamplePath, u: f64) -> Result<f64> {
    partial_sum_values(&path.values, u)
}

pub fn partial_sum_values(values: &[f64], u: f64) -> Result<f64> {
    if values.is_empty() {
        return domain("empty path");
    }
    if !(0.0..=1.0).contains(&u) {
        return domain(format!("u must lie in [0,1], got {u}"));
    }
    let k = ((values.len() as f64) * u).floor() as usize;
    Ok(values[..k.min(values.len())].iter().sum())
}

const DIRECT_ACVF_LIMIT: usize = 1 << 22;

/// γ(0..=max_lag) of the process with the λ stored in `spec`.
pub fn theoretical_acvf(spec: &ProcessSpec, max_lag: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    let s2 = spec.sigma * spec.sigma;
    let (d, lambda) = (spec.d, spec.lambda);
    if let CoefficientFamily::UserSupplied(b) = &spec.coefficient_family {
        let c: Vec<f64> = b.iter().enumerate().map(|(k, x)| x * (-lambda * k as f64).exp()).collect();
        let mut g = correlate(&c, &c);
        g.resize(max_lag + 1, 0.0);
        return Ok(g.into_iter().map(|x| x * s2).collect());
    }
    if d == 0.0 {
        let mut g = vec![0.0; max_lag + 1];
        g[0] = s2;
        return Ok(g);
    }
    if lambda == 0.0 && d >= 0.5 {
        return Err(FlurError::Divergence(format!("lambda = 0 with d = {d} >= 1/2")));
    }
    let certified = if lambda > 0.0 { Some(truncation_length(d, lambda, TAIL_TOL)?) } else { None };
    match certified {
        Some(m) if m + max_lag <= DIRECT_ACVF_LIMIT => {
            let c = binomial_coefficients(d, lambda, m + max_lag)?;
            let g = correlate(&c, &c[..=m]);
            Ok(g[..=max_lag].iter().map(|x| x * s2).collect())
        }
        _ => acvf_with_tail(d, lambda, max_lag).map(|g| g.into_iter().map(|x| x * s2).collect()),
    }
}

// Head by exact correlation, tail Σ_{k>K} c_k c_{k+h} by Euler–Maclaurin.
fn acvf_with_tail(d: f64, lambda: f64, max_lag: usize) -> Result<Vec<f64>> {
    let k_head = (8 * max_lag).max(1 << 16);
    let c = binomial_coefficients(d, lambda, k_head + max_lag)?;
    let head = correlate(&c, &c[..=k_head]);
    let gd = gamma(d)?;
    let spec = QuadratureSpec { abs_tol: 1e-16, rel_tol: 1e-11, max_subdivisions: 4000 };
    let kf = k_head as f64;
    let ln_omega = |x: f64| ln_gamma_ratio_shifted(x, d, 1.0).unwrap_or(f64::NAN) - gd.abs().ln();
    let mut out = Vec::with_capacity(max_lag + 1);
    for h in 0..=max_lag {
        let hf = h as f64;
        let f = |x: f64| (ln_omega(x) + ln_omega(x + hf) - lambda * (2.0 * x + hf)).exp();
        let dlog = |x: f64| {
            use statrs::function::gamma::digamma;
            digamma(x + d) - digamma(x + 1.0) + digamma(x + hf + d) - digamma(x + hf + 1.0) - 2.0 * lambda
        };
        let integral = if d < 0.5 {
            // u = (K/x)^{1−2d} maps [K, ∞) to (0, 1] with x^{2d−2}dx ∝ du
            let e = 1.0 - 2.0 * d;
            let g = |u: f64| {
                let x = kf * u.powf(-1.0 / e);
                if x > 1e15 {
                    // ω(x) x^{1−d} → 1/Γ(d)
                    return if lambda > 0.0 { 0.0 } else { 1.0 / (gd * gd) };
                }
                (ln_omega(x) + ln_omega(x + hf) - lambda * (2.0 * x + hf) + (2.0 - 2.0 * d) * x.ln()).exp()
            };
            quad_1d(g, 0.0, 1.0, &spec)? * kf.powf(2.0 * d - 1.0) / e
        } else {
            let scale = 1.0 / lambda;
            quad_to_infinity(|t| f(kf + t * scale) * scale, 0.0, &spec)?
        };
        let fk = f(kf);
        let tail = integral - 0.5 * fk - fk * dlog(kf) / 12.0;
        out.push(head[h] + tail);
    }
    Ok(out)
}

/// (λ_N + iy/N)^d · Σ_k e^{−(λ_N + iy/N)k} ω_{−d}(k), summed to a certified
/// truncation.
pub fn tauberian_ratio(d: f64, lambda_n: f64, n: usize, y: f64) -> Result<Complex64> {
    if !(lambda_n > 0.0) {
        return domain("tauberian_ratio needs lambda_n > 0");
    }
    if is_nonpositive_integer(d) && d != 0.0 {
        return domain(format!("d = {d} is not admissible"));
    }
    let z = Complex64::new(lambda_n, y / n as f64);
    // Σ_{k>K} |ω(k)| e^{−λk} ≤ A (K+1)^{d−1} e^{−λ(K+1)}/(1−ρ), same majorant as tail_bound
    let g = gamma(d)?.abs();
    let bound = |k: usize| {
        let k1 = (k + 1) as f64;
        let a = (omega(d, k + 1).abs() * k1.powf(1.0 - d)).max(1.0 / g);
        let rho = ((k1 + 1.0) / k1).powf((d - 1.0).max(0.0)) * (-lambda_n).exp();
        a * k1.powf(d - 1.0) * (-lambda_n * k1).exp() / (1.0 - rho)
    };
    let scale = z.norm().powf(-d);
    let mut k_max = 16usize;
    while bound(k_max) > 1e-13 * scale {
        k_max = k_max.checked_mul(2).ok_or_else(|| FlurError::NonConvergence("tauberian truncation".into()))?;
        if k_max as u64 > 1u64 << 40 {
            return Err(FlurError::NonConvergence("tauberian series truncation too long".into()));
        }
    }
    const BLOCK: usize = 512;
    let step = (-z).exp();
    let mut sum = Complex64::new(0.0, 0.0);
    let mut comp = Complex64::new(0.0, 0.0);
    let mut w = 1.0;
    let mut pw = Complex64::new(1.0, 0.0);
    for k in 0..=k_max {
        if k > 0 {
            w *= (k as f64 + d - 1.0) / k as f64;
            pw = if k % BLOCK == 0 { (-z * k as f64).exp() } else { pw * step };
        }
        let term = pw * w - comp;
        let t = sum + term;
        comp = (t - sum) - term;
        sum = t;
    }
    Ok(z.powf(d) * sum)
}
