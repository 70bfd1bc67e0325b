//! Piecewise polynomial regression with one unknown knot: truncated power
//! basis, profiled least squares and the limiting law of the estimator.

use crate::error::{domain, FlurError, Result};
use crate::numerics::fft::convolve;
use crate::numerics::linalg::{spd_inverse, spd_solve, symmetric_eigenvalues, Matrix};
use crate::numerics::quad::{gauss_legendre, quad_2d_singular_diagonal, QuadratureSpec};
use crate::numerics::special::{bessel_k, binomial, gamma};
use crate::numerics::{par_map, SeedTree};
use crate::process::{theoretical_acvf, ProcessSpec, RegimeClass, Simulator, TemperingRegime};
use crate::tfbm::{bessel_constant, printed_bessel_constant};
use crate::tfcalc::{tfi_gram, SampledFunction, Side};
use serde::{Deserialize, Serialize};

/// μ(s) = Σ a_i f_i(s) with f_1..f_q = 1, s, …, s^{q−1} and
/// f_{q+j} = (s − η)_+^j for j = 1..p−q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseModel {
    pub q: usize,
    pub p: usize,
    pub eta: f64,
    pub a: Vec<f64>,
}

fn check_orders(q: usize, p: usize) -> Result<()> {
    if q < 1 || p <= q {
        return domain(format!("need q >= 1 and p > q, got q = {q}, p = {p}"));
    }
    Ok(())
}

/// f_i(s) for 0-based i.
pub fn basis(q: usize, i: usize, eta: f64, s: f64) -> f64 {
    if i < q {
        s.powi(i as i32)
    } else if s > eta {
        (s - eta).powi((i - q + 1) as i32)
    } else {
        0.0
    }
}

impl PiecewiseModel {
    pub fn new(q: usize, p: usize, eta: f64, a: Vec<f64>) -> Result<Self> {
        let m = PiecewiseModel { q, p, eta, a };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_orders(self.q, self.p)?;
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return domain(format!("knot must lie in (0,1), got {}", self.eta));
        }
        if self.a.len() != self.p {
            return domain(format!("expected {} coefficients, got {}", self.p, self.a.len()));
        }
        if self.a.iter().any(|x| !x.is_finite()) {
            return domain("coefficients must be finite");
        }
        Ok(())
    }

    /// At least one truncated-power coefficient is nonzero.
    pub fn is_identifiable(&self) -> bool {
        self.a[self.q..].iter().any(|&x| x != 0.0)
    }

    fn require_identifiable(&self) -> Result<()> {
        self.validate()?;
        if !self.is_identifiable() {
            return Err(FlurError::RankDeficient(0.0));
        }
        Ok(())
    }

    pub fn mu(&self, s: f64) -> f64 {
        (0..self.p).map(|i| self.a[i] * basis(self.q, i, self.eta, s)).sum()
    }

    /// Right partial derivatives: ∂μ/∂a_i = f_i for i < p, and for i = p
    /// ∂μ/∂η = −Σ_j a_{q+j} j (s−η)_+^{j−1} with (s−η)_+^0 = 1_{s>η}.
    pub fn mu_partial_plus(&self, i: usize, s: f64) -> f64 {
        if i < self.p {
            return basis(self.q, i, self.eta, s);
        }
        if s <= self.eta {
            return 0.0;
        }
        let x = s - self.eta;
        -(1..=self.p - self.q).map(|j| self.a[self.q + j - 1] * j as f64 * x.powi(j as i32 - 1)).sum::<f64>()
    }

    /// Polynomial degree of each partial, used for exact quadrature.
    fn partial_degree(&self) -> usize {
        (self.q - 1).max(self.p - self.q)
    }
}

/// The p + 1 right partials μ_{(i+)} as closures.
pub fn mu_partials_plus(model: &PiecewiseModel) -> Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>> {
    (0..=model.p)
        .map(|i| {
            let m = model.clone();
            Box::new(move |s: f64| m.mu_partial_plus(i, s)) as Box<dyn Fn(f64) -> f64 + Send + Sync>
        })
        .collect()
}

/// W with w_{j,i} = f_i(j/n), j = 1..n.
pub fn design_matrix(q: usize, p: usize, eta: f64, n: usize) -> Result<Matrix> {
    check_orders(q, p)?;
    if n <= p {
        return domain(format!("need n > p, got n = {n}"));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return domain("knot must lie in (0,1)");
    }
    let w = Matrix::from_fn(n, p, |j, i| basis(q, i, eta, (j + 1) as f64 / n as f64));
    let sv = smallest_scaled_singular_value(&w.gram());
    if sv <= 1e-10 {
        return Err(FlurError::RankDeficient(sv));
    }
    Ok(w)
}

// √ of the least eigenvalue of the unit-diagonal scaled Gram matrix.
fn smallest_scaled_singular_value(g: &Matrix) -> f64 {
    let n = g.rows;
    let d: Vec<f64> = (0..n).map(|i| g[(i, i)].sqrt()).collect();
    if d.iter().any(|x| *x == 0.0) {
        return 0.0;
    }
    let scaled = Matrix::from_fn(n, n, |i, k| g[(i, k)] / (d[i] * d[k]));
    symmetric_eigenvalues(&scaled)[0].max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a_hat: Vec<f64>,
    pub eta_hat: f64,
    pub rss: f64,
    /// Coarse profile (η, rss(η)); empty when not requested.
    pub eta_profile: Vec<(f64, f64)>,
}

/// Exact residual sum of squares and coefficients at a given knot.
pub fn least_squares_at(y: &[f64], q: usize, p: usize, eta: f64) -> Result<(Vec<f64>, f64)> {
    let n = y.len();
    let w = Matrix::from_fn(n, p, |j, i| basis(q, i, eta, (j + 1) as f64 / n as f64));
    let g = w.gram();
    let b: Vec<f64> = (0..p).map(|i| (0..n).map(|j| w[(j, i)] * y[j]).sum()).collect();
    let a = spd_solve(&g, &b)?;
    let fitted = w.matvec(&a);
    let rss = y.iter().zip(&fitted).map(|(u, v)| (u - v).powi(2)).sum();
    Ok((a, rss))
}

// Coarse rss(η) for η between design points j0/n and (j0+1)/n, from
// suffix power sums; y is centred.
struct ProfileSums {
    q: usize,
    p: usize,
    // s_pow[m][j] = Σ_{k ≥ j} s_k^m (0-based k), length n + 1
    s_pow: Vec<Vec<f64>>,
    sy_pow: Vec<Vec<f64>>,
    yy: f64,
}

impl ProfileSums {
    fn new(y: &[f64], q: usize, p: usize) -> Self {
        let n = y.len();
        let r = p - q;
        let max_m = (2 * r).max(q - 1 + r).max(2 * (q - 1));
        let s: Vec<f64> = (1..=n).map(|j| j as f64 / n as f64).collect();
        let suffix = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            let mut out = vec![0.0; n + 1];
            for k in (0..n).rev() {
                out[k] = out[k + 1] + f(k);
            }
            out
        };
        let s_pow = (0..=max_m).map(|m| suffix(&|k| s[k].powi(m as i32))).collect();
        let sy_pow = (0..=max_m).map(|m| suffix(&|k| s[k].powi(m as i32) * y[k])).collect();
        let yy = y.iter().map(|v| v * v).sum();
        ProfileSums { q, p, s_pow, sy_pow, yy }
    }

    // Σ_{k ≥ j} s^i (s−η)^t, by binomial expansion in s.
    fn trunc_sum(&self, table: &[Vec<f64>], i: usize, t: usize, eta: f64, j: usize) -> f64 {
        (0..=t).map(|m| binomial(t as f64, m) * (-eta).powi((t - m) as i32) * table[i + m][j]).sum()
    }

    fn rss(&self, eta: f64, j: usize) -> Result<f64> {
        let (q, p) = (self.q, self.p);
        let mut g = Matrix::zeros(p, p);
        let mut b = vec![0.0; p];
        for i in 0..p {
            for k in 0..=i {
                let v = match (i < q, k < q) {
                    (true, true) => self.s_pow[i + k][0],
                    (false, true) => self.trunc_sum(&self.s_pow, k, i - q + 1, eta, j),
                    (true, false) => unreachable!(),
                    (false, false) => self.trunc_sum(&self.s_pow, 0, i - q + 1 + k - q + 1, eta, j),
                };
                g[(i, k)] = v;
                g[(k, i)] = v;
            }
            b[i] = if i < q { self.sy_pow[i][0] } else { self.trunc_sum(&self.sy_pow, 0, i - q + 1, eta, j) };
        }
        let a = spd_solve(&g, &b)?;
        Ok((self.yy - a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()).max(0.0))
    }
}

const GOLDEN_WIDTH: f64 = 1e-6;

/// Profiled least squares over the knot, then ordinary least squares for
/// the coefficients at the selected knot.
pub fn fit(y: &[f64], q: usize, p: usize) -> Result<FitResult> {
    fit_with(y, q, p, true)
}

pub fn fit_with(y: &[f64], q: usize, p: usize, keep_profile: bool) -> Result<FitResult> {
    check_orders(q, p)?;
    let n = y.len();
    if n <= p + 8 {
        return domain(format!("need more than p + 8 = {} observations", p + 8));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return domain("observations must be finite");
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let sums = ProfileSums::new(&yc, q, p);
    // candidates (j + 1/2)/n for j = p..n−p; design points with s > η start at 0-based index j
    let mut profile = Vec::with_capacity(n - 2 * p + 1);
    for j in p..=n - p {
        let eta = (j as f64 + 0.5) / n as f64;
        if eta >= 1.0 {
            break;
        }
        profile.push((eta, sums.rss(eta, j)?));
    }
    let (lo_r, hi_r) = profile.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &(_, r)| (a.min(r), b.max(r)));
    if hi_r - lo_r <= 1e-12 * (1.0 + hi_r) {
        return Err(FlurError::DegenerateProfile);
    }
    let best = profile.iter().enumerate().fold(0, |bi, (i, &(_, r))| if r < profile[bi].1 { i } else { bi });
    let left = profile[best.saturating_sub(1)].0;
    let right = profile[(best + 1).min(profile.len() - 1)].0;
    let exact = |eta: f64| least_squares_at(&yc, q, p, eta).map(|(_, r)| r);
    let mut eta_hat = golden_section(&exact, left, right)?;
    // the refined value must not be worse than the best coarse candidate
    let coarse_eta = profile[best].0;
    if exact(coarse_eta)? < exact(eta_hat)? {
        eta_hat = coarse_eta;
    }
    let (a_hat, rss) = least_squares_at(y, q, p, eta_hat)?;
    Ok(FitResult { a_hat, eta_hat, rss, eta_profile: if keep_profile { profile } else { Vec::new() } })
}

fn golden_section(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > GOLDEN_WIDTH {
        // ties go left
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    // parabolic step through the final bracket, kept only if it improves
    let (x, fx) = if fc <= fd { (c, fc) } else { (d, fd) };
    let (u, v) = if fc <= fd { (a, d) } else { (c, b) };
    let (fu, fv) = (f(u)?, f(v)?);
    let den = (x - u) * (fx - fv) - (x - v) * (fx - fu);
    if den.abs() > 0.0 {
        let t = x - 0.5 * ((x - u).powi(2) * (fx - fv) - (x - v).powi(2) * (fx - fu)) / den;
        if t > u && t < v && t.is_finite() && f(t)? < fx {
            return Ok(t);
        }
    }
    Ok(x)
}

/// G_{jk} = ∫₀¹ μ_{(j+)} μ_{(k+)} ds, exact by Gauss–Legendre on [0,η] and [η,1].
pub fn gram_matrix(model: &PiecewiseModel) -> Result<Matrix> {
    model.validate()?;
    let (x, w) = gauss_legendre(model.partial_degree() + 2);
    let dim = model.p + 1;
    let mut g = Matrix::zeros(dim, dim);
    for (lo, hi) in [(0.0, model.eta), (model.eta, 1.0)] {
        let half = 0.5 * (hi - lo);
        for (xi, wi) in x.iter().zip(&w) {
            let s = lo + half * (xi + 1.0);
            let v: Vec<f64> = (0..dim).map(|i| model.mu_partial_plus(i, s)).collect();
            for i in 0..dim {
                for k in 0..dim {
                    g[(i, k)] += half * wi * v[i] * v[k];
                }
            }
        }
    }
    Ok(g)
}

/// n^{−1} M₊ᵀM₊ with rows μ_{(i+)}(j/n).
pub fn finite_gram(model: &PiecewiseModel, n: usize) -> Result<Matrix> {
    let m = partials_matrix(model, n)?;
    Ok(m.gram().scale(1.0 / n as f64))
}

/// M₊ with entries μ_{(i+)}(j/n), j = 1..n.
pub fn partials_matrix(model: &PiecewiseModel, n: usize) -> Result<Matrix> {
    model.validate()?;
    Ok(Matrix::from_fn(n, model.p + 1, |j, i| model.mu_partial_plus(i, (j + 1) as f64 / n as f64)))
}

/// Λ = G^{−1}.
pub fn lambda_matrix(model: &PiecewiseModel) -> Result<Matrix> {
    model.require_identifiable()?;
    let g = gram_matrix(model)?;
    let sv = smallest_scaled_singular_value(&g);
    if sv <= 1e-10 {
        return Err(FlurError::RankDeficient(sv));
    }
    spd_inverse(&g)
}

/// Which Σ to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaForm {
    /// Strong tempering, literal product of integrals (∫μ_i)(∫μ_k).
    ProductOfIntegrals,
    /// Strong tempering, white-noise candidate ∫ μ_i μ_k.
    WhiteNoise,
    /// Weak or moderate tempering, ∫ (𝕀^{d,λ*}_− μ_i)(𝕀^{d,λ*}_− μ_k).
    Operator,
    /// Weak or moderate tempering, double integral against the covariance
    /// density with constants matching the operator form.
    ClosedForm,
    /// Moderate tempering, double integral with the printed Bessel constant.
    PrintedClosedForm,
}

// Grid for the operator form: η must be a node of the coarsest Richardson
// level; otherwise it is rounded to the nearest multiple of 1/4096.
const OPERATOR_CELLS: usize = 4096;

fn snapped_eta(eta: f64) -> f64 {
    (eta * OPERATOR_CELLS as f64).round() / OPERATOR_CELLS as f64
}

fn partial_as_sampled(model: &PiecewiseModel, i: usize) -> Result<SampledFunction> {
    let step = 1.0 / OPERATOR_CELLS as f64;
    let m = PiecewiseModel { eta: snapped_eta(model.eta), ..model.clone() };
    if i < m.q {
        SampledFunction::from_fn(|s| m.mu_partial_plus(i, s), 0.0, 1.0, step)
    } else if i < m.p {
        SampledFunction::from_fn(|s| m.mu_partial_plus(i, s), m.eta, 1.0, step)
    } else {
        // the right partial in η jumps at η: take the open-side value there
        let (eta, edge) = (m.eta, -m.a[m.q]);
        SampledFunction::from_fn(|s| if s <= eta { edge } else { m.mu_partial_plus(i, s) }, eta, 1.0, step)
    }
}

fn check_long_memory_case(case: RegimeClass, d: f64, lambda_star: f64) -> Result<()> {
    if !(d > 0.0 && d < 0.5) {
        return domain(format!("this Σ needs 0 < d < 1/2, got {d}"));
    }
    match case {
        RegimeClass::Weak => Ok(()),
        RegimeClass::Moderate if lambda_star > 0.0 && lambda_star.is_finite() => Ok(()),
        _ => domain("the operator and closed forms need weak or moderate tempering"),
    }
}

/// Σ for the given regime class and form, scaled by σ².
pub fn sigma_matrix(model: &PiecewiseModel, case: RegimeClass, form: SigmaForm, d: f64, lambda_star: f64, sigma2: f64) -> Result<Matrix> {
    model.validate()?;
    let dim = model.p + 1;
    let out = match form {
        SigmaForm::ProductOfIntegrals | SigmaForm::WhiteNoise => {
            if case != RegimeClass::Strong {
                return domain("this Σ form belongs to strong tempering");
            }
            let g = gram_matrix(model)?;
            if form == SigmaForm::WhiteNoise {
                g
            } else {
                let ints = partial_integrals(model);
                Matrix::from_fn(dim, dim, |i, k| ints[i] * ints[k])
            }
        }
        SigmaForm::Operator => {
            check_long_memory_case(case, d, lambda_star)?;
            let fs = (0..dim).map(|i| partial_as_sampled(model, i)).collect::<Result<Vec<_>>>()?;
            let lam = if case == RegimeClass::Weak { 0.0 } else { lambda_star };
            tfi_gram(&fs, d, lam, Side::Minus)?
        }
        SigmaForm::ClosedForm | SigmaForm::PrintedClosedForm => {
            check_long_memory_case(case, d, lambda_star)?;
            closed_form_sigma(model, case, form, d, lambda_star)?
        }
    };
    Ok(out.scale(sigma2))
}

fn partial_integrals(model: &PiecewiseModel) -> Vec<f64> {
    let (x, w) = gauss_legendre(model.partial_degree() + 2);
    (0..=model.p)
        .map(|i| {
            [(0.0, model.eta), (model.eta, 1.0)]
                .iter()
                .map(|&(lo, hi)| {
                    let half = 0.5 * (hi - lo);
                    x.iter().zip(&w).map(|(xi, wi)| half * wi * model.mu_partial_plus(i, lo + half * (xi + 1.0))).sum::<f64>()
                })
                .sum()
        })
        .collect()
}

fn closed_form_sigma(model: &PiecewiseModel, case: RegimeClass, form: SigmaForm, d: f64, lambda_star: f64) -> Result<Matrix> {
    let dim = model.p + 1;
    let alpha = 2.0 * d - 1.0;
    let (constant, weight): (f64, Box<dyn Fn(f64) -> f64>) = match case {
        RegimeClass::Weak => {
            if form == SigmaForm::PrintedClosedForm {
                return domain("the printed constant involves λ and cannot be evaluated at λ* = 0");
            }
            let c = gamma(1.0 - 2.0 * d)? / (gamma(d)? * gamma(1.0 - d)?);
            (c, Box::new(move |r: f64| r.powf(alpha)))
        }
        _ => {
            let c = if form == SigmaForm::PrintedClosedForm { printed_bessel_constant(d, lambda_star)? } else { bessel_constant(d, lambda_star)? };
            let nu = d - 0.5;
            (c, Box::new(move |r: f64| r.powf(nu) * bessel_k(nu, lambda_star * r).unwrap_or(f64::NAN)))
        }
    };
    let spec = QuadratureSpec { abs_tol: 1e-12, rel_tol: 1e-10, max_subdivisions: 5000 };
    let mut m = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for k in 0..=i {
            let v = constant
                * quad_2d_singular_diagonal(
                    |t, s, r| model.mu_partial_plus(i, t) * model.mu_partial_plus(k, s) * weight(r),
                    (0.0, 1.0),
                    (0.0, 1.0),
                    alpha,
                    &[model.eta],
                    &spec,
                )?;
            m[(i, k)] = v;
            m[(k, i)] = v;
        }
    }
    Ok(m)
}

/// Limiting law of the scaled estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticLaw {
    /// Exponent e of the scale N^e (1/2 − d); under strong tempering the
    /// scale is λ_N^d √N and e = 1/2.
    pub rate_exponent: f64,
    pub lambda_matrix: Matrix,
    pub sigma_matrix: Matrix,
    pub covariance: Matrix,
}

/// Scale multiplying θ̂ − θ: λ_N^d √N under strong tempering, N^{1/2−d} otherwise.
pub fn estimator_scale(case: RegimeClass, d: f64, n: usize, lambda_n: f64) -> f64 {
    match case {
        RegimeClass::Strong => lambda_n.powf(d) * (n as f64).sqrt(),
        _ => (n as f64).powf(0.5 - d),
    }
}

/// Λ Σ Λ.
pub fn asymptotic_covariance(model: &PiecewiseModel, case: RegimeClass, form: SigmaForm, d: f64, lambda_star: f64, sigma2: f64) -> Result<AsymptoticLaw> {
    let lambda = lambda_matrix(model)?;
    let sigma = sigma_matrix(model, case, form, d, lambda_star, sigma2)?;
    let covariance = lambda.matmul(&sigma)?.matmul(&lambda)?;
    let covariance = Matrix::from_fn(covariance.rows, covariance.cols, |i, k| 0.5 * (covariance[(i, k)] + covariance[(k, i)]));
    let rate_exponent = if case == RegimeClass::Strong { 0.5 } else { 0.5 - d };
    Ok(AsymptoticLaw { rate_exponent, lambda_matrix: lambda, sigma_matrix: sigma, covariance })
}

/// Γ v for the Toeplitz autocovariance matrix of the noise.
fn toeplitz_apply(acvf: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut kernel = Vec::with_capacity(2 * n - 1);
    kernel.extend(acvf[1..n].iter().rev());
    kernel.extend_from_slice(&acvf[..n]);
    let full = convolve(v, &kernel);
    full[n - 1..2 * n - 1].to_vec()
}

/// Exact covariance of scale·(M₊ᵀM₊)^{−1}M₊ᵀe for noise with the process
/// autocovariance at λ_N: the finite-N law of the linearised estimator.
pub fn linearized_covariance(model: &PiecewiseModel, spec: &ProcessSpec, lambda_n: f64, n: usize, scale: f64) -> Result<Matrix> {
    model.require_identifiable()?;
    let m = partials_matrix(model, n)?;
    let acvf = theoretical_acvf(&spec.with_lambda(lambda_n), n - 1)?;
    let dim = model.p + 1;
    let cols: Vec<Vec<f64>> = (0..dim).map(|i| (0..n).map(|j| m[(j, i)]).collect()).collect();
    let gcols: Vec<Vec<f64>> = cols.iter().map(|c| toeplitz_apply(&acvf, c)).collect();
    let middle = Matrix::from_fn(dim, dim, |i, k| cols[i].iter().zip(&gcols[k]).map(|(a, b)| a * b).sum());
    let inv = spd_inverse(&m.gram())?;
    let c = inv.matmul(&middle)?.matmul(&inv)?;
    Ok(c.scale(scale * scale))
}

/// Quantiles of N^{1/2−d}‖θ̂ − θ − (M₊ᵀM₊)^{−1}M₊ᵀe‖ (or λ_N^d√N‖…‖).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceStats {
    pub n: usize,
    pub lambda_n: f64,
    pub scale: f64,
    pub median: f64,
    pub q90: f64,
    pub failures: usize,
}

/// Replication r uses seeds.child(r).
pub fn asymptotic_equivalence_check(
    model: &PiecewiseModel,
    spec: &ProcessSpec,
    regime: &TemperingRegime,
    n: usize,
    seeds: &SeedTree,
    replications: usize,
) -> Result<EquivalenceStats> {
    model.require_identifiable()?;
    let lambda_n = regime.lambda_at(n as f64);
    let sim = Simulator::with_lambda(spec, lambda_n, n)?;
    let scale = estimator_scale(regime.class(), spec.d, n, lambda_n);
    let m = partials_matrix(model, n)?;
    let inv = spd_inverse(&m.gram())?;
    let mu: Vec<f64> = (1..=n).map(|j| model.mu(j as f64 / n as f64)).collect();
    let theta: Vec<f64> = model.a.iter().copied().chain(std::iter::once(model.eta)).collect();
    let stats: Vec<Option<f64>> = par_map(replications, |r| {
        let e = sim.sample(&seeds.child(r as u64));
        let y: Vec<f64> = mu.iter().zip(&e).map(|(a, b)| a + b).collect();
        let fitres = fit_with(&y, model.q, model.p, false).ok()?;
        let mte: Vec<f64> = (0..=model.p).map(|i| (0..n).map(|j| m[(j, i)] * e[j]).sum()).collect();
        let lin = inv.matvec(&mte);
        let est: Vec<f64> = fitres.a_hat.iter().copied().chain(std::iter::once(fitres.eta_hat)).collect();
        let gap: f64 = (0..theta.len()).map(|i| (est[i] - theta[i] - lin[i]).powi(2)).sum::<f64>().sqrt();
        Some(scale * gap)
    });
    let failures = stats.iter().filter(|s| s.is_none()).count();
    let mut ok: Vec<f64> = stats.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(FlurError::NonConvergence("every replication failed to fit".into()));
    }
    ok.sort_by(|a, b| a.total_cmp(b));
    Ok(EquivalenceStats { n, lambda_n, scale, median: quantile(&ok, 0.5), q90: quantile(&ok, 0.9), failures })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let x = p * (n - 1) as f64;
    let i = x.floor() as usize;
    let f = x - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PiecewiseModel {
        PiecewiseModel::new(2, 3, 0.5, vec![1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn design_matrix_by_hand() {
        let w = design_matrix(1, 2, 0.5, 4).unwrap();
        assert_eq!((0..4).map(|j| w[(j, 0)]).collect::<Vec<_>>(), vec![1.0; 4]);
        assert_eq!((0..4).map(|j| w[(j, 1)]).collect::<Vec<_>>(), vec![0.0, 0.0, 0.25, 0.5]);
        let w = design_matrix(3, 4, 0.3, 50).unwrap();
        assert_eq!(w.row(49)[..3], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn partials_follow_the_right_derivative() {
        let m = model();
        for s in [0.1, 0.5, 0.51, 0.9] {
            let want = if s > 0.5 { -3.0 } else { 0.0 };
            assert_eq!(m.mu_partial_plus(3, s), want);
            for i in 0..3 {
                assert_eq!(m.mu_partial_plus(i, s), basis(2, i, 0.5, s));
            }
        }
        let flat = PiecewiseModel::new(2, 3, 0.5, vec![1.0, 2.0, 0.0]).unwrap();
        assert!(matches!(lambda_matrix(&flat), Err(FlurError::RankDeficient(_))));
    }

    #[test]
    fn gram_by_hand_and_against_finite_n() {
        let m = PiecewiseModel::new(1, 2, 0.3, vec![0.5, 2.0]).unwrap();
        let g = gram_matrix(&m).unwrap();
        assert!((g[(0, 1)] - 0.7f64.powi(2) / 2.0).abs() < 1e-14);
        assert!((g[(1, 2)] - (-2.0 * 0.7f64.powi(2) / 2.0)).abs() < 1e-14);
        assert!((g[(2, 2)] - 4.0 * 0.7).abs() < 1e-14);
        let big = model();
        let g = gram_matrix(&big).unwrap();
        let fg = finite_gram(&big, 10_000).unwrap();
        assert!(g.max_abs_diff(&fg) < 5.0 / 10_000.0);
        let l = lambda_matrix(&big).unwrap();
        assert!(l.matmul(&g).unwrap().max_abs_diff(&Matrix::identity(4)) < 1e-10);
    }

    #[test]
    fn noiseless_fit_recovers_the_model() {
        let n = 2000;
        for (q, p, a) in [(2, 3, vec![1.0, 2.0, 3.0]), (1, 2, vec![0.5, -1.5]), (1, 3, vec![1.0, 2.0, -4.0]), (2, 4, vec![1.0, -1.0, 2.0, 3.0])] {
            let m = PiecewiseModel::new(q, p, 0.4375, a.clone()).unwrap();
            let y: Vec<f64> = (1..=n).map(|j| m.mu(j as f64 / n as f64)).collect();
            let f = fit(&y, q, p).unwrap();
            assert!((f.eta_hat - 0.4375).abs() < 1e-5, "{q} {p} {}", f.eta_hat);
            for (x, w) in f.a_hat.iter().zip(&a) {
                assert!((x - w).abs() < 1e-5, "{q} {p} {:?}", f.a_hat);
            }
            assert!(f.eta_profile.iter().all(|&(_, r)| f.rss <= r + 1e-12));
        }
        let poly: Vec<f64> = (1..=200).map(|j| 1.0 + 2.0 * j as f64 / 200.0).collect();
        assert!(matches!(fit(&poly, 2, 3), Err(FlurError::DegenerateProfile)));
    }

    #[test]
    fn sigma_forms_agree() {
        let m = model();
        for (case, l) in [(RegimeClass::Moderate, 1.0), (RegimeClass::Weak, 0.0)] {
            let op = sigma_matrix(&m, case, SigmaForm::Operator, 0.3, l, 1.0).unwrap();
            let cf = sigma_matrix(&m, case, SigmaForm::ClosedForm, 0.3, l, 1.0).unwrap();
            for i in 0..4 {
                for k in 0..4 {
                    let rel = (op[(i, k)] - cf[(i, k)]).abs() / cf[(i, k)].abs().max(1e-3);
                    assert!(rel < 1e-4, "{case:?} {i} {k} {} {}", op[(i, k)], cf[(i, k)]);
                }
            }
            assert!(crate::numerics::cholesky(&op).unwrap().jitter <= 1e-8 * op.trace());
        }
        let printed = sigma_matrix(&m, RegimeClass::Moderate, SigmaForm::PrintedClosedForm, 0.3, 1.0, 1.0).unwrap();
        let cf = sigma_matrix(&m, RegimeClass::Moderate, SigmaForm::ClosedForm, 0.3, 1.0, 1.0).unwrap();
        assert!((printed[(0, 0)] / cf[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linearized_law_approaches_the_limit() {
        let m = model();
        let spec = ProcessSpec::new(0.3, 0.0, 1.0).unwrap();
        let n = 4096;
        let lin = linearized_covariance(&m, &spec, 1.0 / n as f64, n, (n as f64).powf(0.2)).unwrap();
        let law = asymptotic_covariance(&m, RegimeClass::Moderate, SigmaForm::Operator, 0.3, 1.0, 1.0).unwrap();
        for i in 0..4 {
            let rel = (lin[(i, i)] - law.covariance[(i, i)]).abs() / law.covariance[(i, i)];
            assert!(rel < 0.02, "{i} {} {}", lin[(i, i)], law.covariance[(i, i)]);
        }
    }
}
