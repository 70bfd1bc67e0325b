//! Priestley–Chao kernel regression: kernels, scale factors, limiting
//! variances and the plug-in bandwidth.

use crate::error::{domain, FlurError, Result};
use crate::numerics::quad::{quad_1d, quad_2d_singular_diagonal, QuadratureSpec};
use crate::numerics::special::{bessel_k, gamma};
use crate::numerics::{par_map, SeedTree};
use crate::process::{ProcessSpec, RegimeClass, Simulator, TemperingRegime};
use crate::tfbm::{printed_bessel_constant, CholeskySampler, TfbmParams};
use crate::tfcalc::{tfi_inner_product, SampledFunction, Side};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    #[default]
    Epanechnikov,
    Biweight,
    Triweight,
    Cosine,
    UserSupplied,
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Symmetric density on [−1, 1] with a bounded derivative.
#[derive(Clone)]
pub struct KernelSpec {
    pub name: KernelName,
    k: RealFn,
    k_prime: RealFn,
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KernelSpec({:?})", self.name)
    }
}

impl KernelSpec {
    pub fn epanechnikov() -> Self {
        Self::builtin(KernelName::Epanechnikov, |u| 0.75 * (1.0 - u * u), |u| -1.5 * u)
    }

    pub fn biweight() -> Self {
        Self::builtin(KernelName::Biweight, |u| 15.0 / 16.0 * (1.0 - u * u).powi(2), |u| -3.75 * u * (1.0 - u * u))
    }

    pub fn triweight() -> Self {
        Self::builtin(
            KernelName::Triweight,
            |u| 35.0 / 32.0 * (1.0 - u * u).powi(3),
            |u| -35.0 / 32.0 * 6.0 * u * (1.0 - u * u).powi(2),
        )
    }

    pub fn cosine() -> Self {
        Self::builtin(
            KernelName::Cosine,
            |u| PI / 4.0 * (PI * u / 2.0).cos(),
            |u| -PI * PI / 8.0 * (PI * u / 2.0).sin(),
        )
    }

    pub fn by_name(name: KernelName) -> Result<Self> {
        Ok(match name {
            KernelName::Epanechnikov => Self::epanechnikov(),
            KernelName::Biweight => Self::biweight(),
            KernelName::Triweight => Self::triweight(),
            KernelName::Cosine => Self::cosine(),
            KernelName::UserSupplied => return domain("a user kernel needs its functions"),
        })
    }

    fn builtin(name: KernelName, k: fn(f64) -> f64, k_prime: fn(f64) -> f64) -> Self {
        KernelSpec { name, k: Arc::new(k), k_prime: Arc::new(k_prime) }
    }

    /// Checks symmetry, unit mass (1e-10) and finiteness of the derivative.
    pub fn user_supplied(
        k: impl Fn(f64) -> f64 + Send + Sync + 'static,
        k_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let spec = KernelSpec { name: KernelName::UserSupplied, k: Arc::new(k), k_prime: Arc::new(k_prime) };
        for i in 0..=200 {
            let u = i as f64 / 200.0;
            let (a, b) = (spec.eval(u), spec.eval(-u));
            if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                return domain("kernel must be symmetric");
            }
            if !spec.derivative(u).is_finite() || a < 0.0 {
                return domain("kernel must be a density with a bounded derivative");
            }
        }
        let mass = quad_1d(|u| spec.eval(u), -1.0, 1.0, &QuadratureSpec::tight())?;
        if (mass - 1.0).abs() > 1e-10 {
            return domain(format!("kernel must integrate to 1, got {mass}"));
        }
        Ok(spec)
    }

    /// K(u), zero outside [−1, 1].
    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            0.0
        } else {
            (self.k)(u)
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            0.0
        } else {
            (self.k_prime)(u)
        }
    }

    /// ∫ K².
    pub fn l2_norm_sq(&self) -> f64 {
        match self.name {
            KernelName::Epanechnikov => 0.6,
            KernelName::Biweight => 5.0 / 7.0,
            KernelName::Triweight => 350.0 / 429.0,
            KernelName::Cosine => PI * PI / 16.0,
            KernelName::UserSupplied => quad_1d(|u| self.eval(u).powi(2), -1.0, 1.0, &QuadratureSpec::tight()).unwrap_or(f64::NAN),
        }
    }

    /// ∫ u² K.
    pub fn second_moment(&self) -> f64 {
        match self.name {
            KernelName::Epanechnikov => 0.2,
            KernelName::Biweight => 1.0 / 7.0,
            KernelName::Triweight => 1.0 / 9.0,
            KernelName::Cosine => 1.0 - 8.0 / (PI * PI),
            KernelName::UserSupplied => quad_1d(|u| u * u * self.eval(u), -1.0, 1.0, &QuadratureSpec::tight()).unwrap_or(f64::NAN),
        }
    }

    fn sup_on_grid(&self, f: impl Fn(f64) -> f64) -> f64 {
        (0..=2000).map(|i| f(-1.0 + i as f64 / 1000.0).abs()).fold(0.0, f64::max)
    }

    pub fn sup_abs_derivative(&self) -> f64 {
        self.sup_on_grid(|u| self.derivative(u))
    }

    pub fn sup_value(&self) -> f64 {
        self.sup_on_grid(|u| self.eval(u))
    }
}

/// Bandwidth and interior check shared by the estimator entry points.
fn check_design(n: usize, x0: f64, h: f64) -> Result<()> {
    if !(h > 0.0 && h < 1.0) {
        return domain(format!("bandwidth must lie in (0,1), got {h}"));
    }
    if (n as f64) * h < 1.0 {
        return domain("need N·h >= 1");
    }
    if !(x0 - h > 0.0 && x0 + h < 1.0) {
        return domain(format!("x0 = {x0} is within h = {h} of the boundary"));
    }
    Ok(())
}

/// Nonzero Priestley–Chao weights K((N x0 − j)/(N h))/(N h) as
/// (first 1-based index j, weights).
pub fn priestley_chao_weights(n: usize, x0: f64, h: f64, kernel: &KernelSpec) -> Result<(usize, Vec<f64>)> {
    check_design(n, x0, h)?;
    let nf = n as f64;
    let nh = nf * h;
    let centre = nf * x0;
    let lo = ((centre - nh).floor() as i64).max(1) as usize;
    let hi = ((centre + nh).ceil() as i64).min(n as i64) as usize;
    let w = (lo..=hi).map(|j| kernel.eval((centre - j as f64) / nh) / nh).collect();
    Ok((lo, w))
}

/// m̂(x0) = (1/Nh) Σ_{j=1}^{N} K((N x0 − j)/(N h)) Y(j).
pub fn priestley_chao(y: &[f64], x0: f64, h: f64, kernel: &KernelSpec) -> Result<f64> {
    let (lo, w) = priestley_chao_weights(y.len(), x0, h, kernel)?;
    Ok(w.iter().enumerate().map(|(i, wi)| wi * y[lo - 1 + i]).sum())
}

/// Normalisation of the weighted sum Σ K(·) e_j: λ_N^d/√(Nh) under strong
/// tempering, (Nh)^{−(d+1/2)} otherwise.
pub fn scale_factor(regime: &TemperingRegime, n: usize, h: f64, d: f64) -> f64 {
    let nh = n as f64 * h;
    match regime.class() {
        RegimeClass::Strong => regime.lambda_at(n as f64).powf(d) / nh.sqrt(),
        _ => nh.powf(-(d + 0.5)),
    }
}

fn kernel_double_integral(kernel: &KernelSpec, alpha: f64, weight: impl Fn(f64) -> f64) -> Result<f64> {
    let spec = QuadratureSpec { abs_tol: 1e-12, rel_tol: 1e-10, max_subdivisions: 5000 };
    quad_2d_singular_diagonal(
        |u, v, r| kernel.eval(u) * kernel.eval(v) * weight(r),
        (-1.0, 1.0),
        (-1.0, 1.0),
        alpha,
        &[],
        &spec,
    )
}

fn check_weak(d: f64) -> Result<()> {
    if !(d > 0.0 && d < 0.5) {
        return domain(format!("the weakly tempered variance needs 0 < d < 1/2, got {d}"));
    }
    Ok(())
}

/// Limiting variance of the scaled weighted sum, normalised to agree with
/// σ² ∫ (𝕀^{d,λ*}_− K)² in the weak and moderate cases:
/// strong σ²∫K²; weak σ² Γ(1−2d)/(Γ(d)Γ(1−d)) ∬ K K |u−v|^{2d−1};
/// moderate σ² c(d,λ*) ∬ K K |u−v|^{d−1/2} K_{d−1/2}(λ*|u−v|).
pub fn asymptotic_variance(case: RegimeClass, d: f64, lambda_star: f64, sigma2: f64, kernel: &KernelSpec) -> Result<f64> {
    match case {
        RegimeClass::Strong => Ok(sigma2 * kernel.l2_norm_sq()),
        RegimeClass::Weak => {
            check_weak(d)?;
            let c = gamma(1.0 - 2.0 * d)? / (gamma(d)? * gamma(1.0 - d)?);
            Ok(c * printed_asymptotic_variance(case, d, lambda_star, sigma2, kernel)?)
        }
        RegimeClass::Moderate => Ok(0.5 * printed_asymptotic_variance(case, d, lambda_star, sigma2, kernel)?),
    }
}

/// The variance formulas exactly as printed with the limit theorem: weak
/// σ²∬KK|u−v|^{2d−1} (no constant) and moderate with the constant
/// 2/(√π Γ(d)(2λ*)^{d−1/2}).
pub fn printed_asymptotic_variance(case: RegimeClass, d: f64, lambda_star: f64, sigma2: f64, kernel: &KernelSpec) -> Result<f64> {
    match case {
        RegimeClass::Strong => Ok(sigma2 * kernel.l2_norm_sq()),
        RegimeClass::Weak => {
            check_weak(d)?;
            Ok(sigma2 * kernel_double_integral(kernel, 2.0 * d - 1.0, |r| r.powf(2.0 * d - 1.0))?)
        }
        RegimeClass::Moderate => {
            if !(d > 0.0 && lambda_star > 0.0 && lambda_star.is_finite()) {
                return domain("the moderate variance needs d > 0 and 0 < λ* < ∞");
            }
            let c = printed_bessel_constant(d, lambda_star)?;
            let nu = d - 0.5;
            // limit of r^ν K_ν(λ* r) at r = 0
            let k0 = if nu > 0.0 { gamma(nu)? * 2f64.powf(nu - 1.0) * lambda_star.powf(-nu) } else { f64::INFINITY };
            let alpha = if d < 0.5 { 2.0 * d - 1.0 } else if d == 0.5 { -0.5 } else { 0.0 };
            let inner = kernel_double_integral(kernel, alpha, |r| {
                if r == 0.0 {
                    k0
                } else {
                    r.powf(nu) * bessel_k(nu, lambda_star * r).unwrap_or(f64::NAN)
                }
            })?;
            Ok(sigma2 * c * inner)
        }
    }
}

/// σ² ∫ (𝕀^{d,λ}_− K)² computed with the tempered calculus module.
pub fn operator_variance(d: f64, lambda: f64, sigma2: f64, kernel: &KernelSpec) -> Result<f64> {
    if !(d > 0.0) {
        return domain("the operator form needs d > 0");
    }
    let f = SampledFunction::from_fn(|u| kernel.eval(u), -1.0, 1.0, 1.0 / 1024.0)?;
    Ok(sigma2 * tfi_inner_product(&f, &f, d, lambda, Side::Minus)?)
}

/// h_opt = {(1−e^{−λ})^{−2d} ∫K² / ((∫u²K)² ∫(m″)²)}^{1/5} N^{−1/5}.
pub fn optimal_bandwidth(d: f64, lambda: f64, kernel: &KernelSpec, m2_l2: f64, n: usize) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return domain("the plug-in bandwidth needs a fixed λ > 0");
    }
    if !(m2_l2 > 0.0) {
        return Err(FlurError::Domain("∫(m″)² must be > 0; a flat regression function has no finite optimum".into()));
    }
    if n == 0 {
        return domain("n must be >= 1");
    }
    let mu2 = kernel.second_moment();
    let base = (1.0 - (-lambda).exp()).powf(-2.0 * d) * kernel.l2_norm_sq() / (mu2 * mu2 * m2_l2);
    Ok(base.powf(0.2) * (n as f64).powf(-0.2))
}

/// Both sides of the weighted-sum limit theorem, by Monte Carlo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSumLimit {
    /// Var of (Nh)^{−(d+1/2)} Σ_j K(j/(Nh) − 1) X(j), j = 1..2Nh.
    pub lhs_variance: f64,
    pub lhs_std_error: f64,
    /// Var of ∫₀² K′(1−t) B(t) dt on exact TFBMII paths.
    pub rhs_variance: f64,
    pub rhs_std_error: f64,
    pub ratio: f64,
    /// σ² ∫(𝕀^{d,λ*}_− K)², the common limit.
    pub target: f64,
    pub lambda_used: f64,
}

fn sample_variance(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // normal-theory standard error
    (var, var * (2.0 / (n - 1.0)).sqrt())
}

/// `nh` is the window size Nh; the process is tempered with λ = λ*/(Nh).
/// Replication r of the left side uses seeds.child(0).child(r), the right
/// side seeds.child(1).child(r).
pub fn weighted_sum_limit_check(
    spec: &ProcessSpec,
    regime: &TemperingRegime,
    nh: usize,
    kernel: &KernelSpec,
    seeds: &SeedTree,
    replications: usize,
    grid_points: usize,
) -> Result<WeightedSumLimit> {
    if replications < 2 || grid_points < 8 {
        return domain("need at least 2 replications and 8 grid points");
    }
    let d = spec.d;
    let ls = regime.lambda_star();
    let sigma2 = spec.sigma * spec.sigma;
    let lambda = if ls.is_finite() { ls / nh as f64 } else { regime.lambda_at(nh as f64) };
    let sim = Simulator::with_lambda(spec, lambda, 2 * nh)?;
    let weights: Vec<f64> = (1..=2 * nh).map(|j| kernel.eval(j as f64 / nh as f64 - 1.0)).collect();
    let scale = if d == 0.0 || ls.is_finite() { (nh as f64).powf(-(d + 0.5)) } else { lambda.powf(d) / (nh as f64).sqrt() };
    let lhs: Vec<f64> = par_map(replications, |r| {
        let x = sim.sample(&seeds.child(0).child(r as u64));
        scale * weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()
    });
    let (lhs_variance, lhs_std_error) = sample_variance(&lhs);

    let limit_lambda = if ls.is_finite() { ls } else { lambda };
    let params = TfbmParams::new(d, limit_lambda, sigma2)?;
    let times: Vec<f64> = (0..=grid_points).map(|i| 2.0 * i as f64 / grid_points as f64).collect();
    let sampler = CholeskySampler::new(&params, &times)?;
    let dt = 2.0 / grid_points as f64;
    let kp: Vec<f64> = times.iter().map(|t| kernel.derivative(1.0 - t)).collect();
    let rhs: Vec<f64> = par_map(replications, |r| {
        let path = sampler.sample(&seeds.child(1).child(r as u64));
        let v: Vec<f64> = path.values.iter().zip(&kp).map(|(b, k)| b * k).collect();
        dt * (v[1..v.len() - 1].iter().sum::<f64>() + 0.5 * (v[0] + v[v.len() - 1]))
    });
    let (rhs_variance, rhs_std_error) = sample_variance(&rhs);
    let target = if d == 0.0 {
        sigma2 * kernel.l2_norm_sq()
    } else {
        operator_variance(d, limit_lambda, sigma2, kernel)?
    };
    Ok(WeightedSumLimit {
        lhs_variance,
        lhs_std_error,
        rhs_variance,
        rhs_std_error,
        ratio: lhs_variance / rhs_variance,
        target,
        lambda_used: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtins() -> Vec<KernelSpec> {
        vec![KernelSpec::epanechnikov(), KernelSpec::biweight(), KernelSpec::triweight(), KernelSpec::cosine()]
    }

    #[test]
    fn builtin_kernels_are_densities_with_matching_moments() {
        let spec = QuadratureSpec::tight();
        for k in builtins() {
            let mass = quad_1d(|u| k.eval(u), -1.0, 1.0, &spec).unwrap();
            assert!((mass - 1.0).abs() < 1e-12, "{:?}", k.name);
            let l2 = quad_1d(|u| k.eval(u).powi(2), -1.0, 1.0, &spec).unwrap();
            assert!((l2 - k.l2_norm_sq()).abs() < 1e-12, "{:?}", k.name);
            let m2 = quad_1d(|u| u * u * k.eval(u), -1.0, 1.0, &spec).unwrap();
            assert!((m2 - k.second_moment()).abs() < 1e-12, "{:?}", k.name);
            assert!(k.eval(1.0).abs() < 1e-15 && k.eval(-1.0).abs() < 1e-15);
            for u in [-0.7, 0.1, 0.55] {
                let fd = (k.eval(u + 1e-6) - k.eval(u - 1e-6)) / 2e-6;
                assert!((fd - k.derivative(u)).abs() < 1e-6, "{:?}", k.name);
            }
        }
        let user = KernelSpec::user_supplied(|u| 0.75 * (1.0 - u * u), |u| -1.5 * u).unwrap();
        assert!((user.l2_norm_sq() - 0.6).abs() < 1e-12);
        assert!(KernelSpec::user_supplied(|u| 0.5 + 0.1 * u, |_| 0.1).is_err());
    }

    #[test]
    fn estimator_examples() {
        let k = KernelSpec::epanechnikov();
        let n = 10_000;
        let y: Vec<f64> = (1..=n).map(|j| j as f64 / n as f64).collect();
        assert!((priestley_chao(&y, 0.5, 0.05, &k).unwrap() - 0.5).abs() <= 1e-3);
        let c: Vec<f64> = vec![2.5; n];
        let sup = k.sup_abs_derivative() + 2.0 * k.sup_value();
        let got = priestley_chao(&c, 0.4, 0.05, &k).unwrap();
        assert!((got / 2.5 - 1.0).abs() <= sup / (n as f64 * 0.05));
        let s: Vec<f64> = (1..=n).map(|j| (2.0 * PI * j as f64 / n as f64).sin()).collect();
        let bias = priestley_chao(&s, 0.25, 0.05, &k).unwrap() - 1.0;
        let want = 0.5 * 0.05f64.powi(2) * (-4.0 * PI * PI) * 0.2;
        assert!(((bias - want) / want).abs() < 0.2, "{bias} {want}");
        assert!(priestley_chao(&c, 0.03, 0.05, &k).is_err());
    }

    #[test]
    fn scale_factor_examples() {
        let strong = TemperingRegime::power_law(1.0, 0.8);
        let n = 10_000;
        let want = (1e4f64).powf(-0.24) / 1e3f64.sqrt();
        assert!((scale_factor(&strong, n, 0.1, 0.3) / want - 1.0).abs() < 1e-12);
        let moderate = TemperingRegime::moderate(1.0);
        assert!((scale_factor(&moderate, n, 0.1, 0.3) / 10f64.powf(-2.4) - 1.0).abs() < 1e-12);
        for r in [strong, moderate] {
            assert!((scale_factor(&r, n, 0.1, 0.0) - 1e3f64.powf(-0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn variance_forms_agree() {
        let k = KernelSpec::epanechnikov();
        assert!((asymptotic_variance(RegimeClass::Strong, 0.3, f64::INFINITY, 1.0, &k).unwrap() - 0.6).abs() < 1e-15);
        // half-order Bessel: d = 1 gives (1/(2λ*)) ∬ K K e^{−λ*|u−v|}
        let m = asymptotic_variance(RegimeClass::Moderate, 1.0, 1.0, 1.0, &k).unwrap();
        let spec = QuadratureSpec { abs_tol: 1e-13, rel_tol: 1e-11, max_subdivisions: 2000 };
        let direct = 0.5 * quad_2d_singular_diagonal(|u, v, r| k.eval(u) * k.eval(v) * (-r).exp(), (-1.0, 1.0), (-1.0, 1.0), 0.0, &[], &spec).unwrap();
        assert!(((m - direct) / direct).abs() < 1e-9, "{m} {direct}");
        let p = printed_asymptotic_variance(RegimeClass::Moderate, 1.0, 1.0, 1.0, &k).unwrap();
        assert!((p / m - 2.0).abs() < 1e-12);
        for (case, d, l) in [(RegimeClass::Moderate, 0.3, 1.0), (RegimeClass::Weak, 0.3, 0.0)] {
            let a = asymptotic_variance(case, d, l, 1.0, &k).unwrap();
            let o = operator_variance(d, l, 1.0, &k).unwrap();
            assert!(((a - o) / a).abs() < 1e-4, "{case:?} {a} {o}");
        }
    }

    #[test]
    fn moderate_variance_decreases_in_lambda_star() {
        let k = KernelSpec::epanechnikov();
        let vals: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&l| asymptotic_variance(RegimeClass::Moderate, 0.3, l, 1.0, &k).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    }

    #[test]
    fn plug_in_bandwidth() {
        let k = KernelSpec::epanechnikov();
        let m2 = 8.0 * PI.powi(4);
        let classical = (0.6 / (0.04 * m2)).powf(0.2) * 1e4f64.powf(-0.2);
        assert!((optimal_bandwidth(0.0, 0.5, &k, m2, 10_000).unwrap() - classical).abs() < 1e-15);
        let hs: Vec<f64> = (0..=8).map(|i| optimal_bandwidth(0.05 * i as f64, 0.025, &k, m2, 10_000).unwrap()).collect();
        assert!(hs.windows(2).all(|w| w[1] > w[0]));
        assert!(optimal_bandwidth(0.3, 0.025, &k, 0.0, 100).is_err());
    }
}
