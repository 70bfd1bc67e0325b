//! Adaptive Gauss–Kronrod quadrature with breakpoints, endpoint power
//! singularities and diagonal-singular double integrals.

use crate::error::{FlurError, Result};
use std::collections::BinaryHeap;
use std::sync::OnceLock;

/// Tolerances for the adaptive rules.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { abs_tol: 1e-10, rel_tol: 1e-8, max_subdivisions: 2000 }
    }
}

impl QuadratureSpec {
    pub fn new(abs_tol: f64, rel_tol: f64, max_subdivisions: usize) -> Result<Self> {
        let s = QuadratureSpec { abs_tol, rel_tol, max_subdivisions };
        s.validate()?;
        Ok(s)
    }

    /// Tight tolerances for oracle work.
    pub fn tight() -> Self {
        QuadratureSpec { abs_tol: 1e-13, rel_tol: 1e-12, max_subdivisions: 20_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.max_subdivisions >= 1) {
            return Err(FlurError::Domain(format!("invalid quadrature spec {self:?}")));
        }
        Ok(())
    }

    /// Same spec with tolerances divided by `factor`.
    pub fn tighter(&self, factor: f64) -> Self {
        QuadratureSpec {
            abs_tol: self.abs_tol / factor,
            rel_tol: self.rel_tol / factor,
            max_subdivisions: self.max_subdivisions,
        }
    }
}

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689,
    0.973_906_528_517_171_720_077_964_012_084,
    0.930_157_491_355_708_226_001_207_180_060,
    0.865_063_366_688_984_510_732_096_688_423,
    0.780_817_726_586_416_897_063_717_578_345,
    0.679_409_568_299_024_406_234_327_365_115,
    0.562_757_134_668_604_683_339_000_099_273,
    0.433_395_394_129_247_190_799_265_943_166,
    0.294_392_862_701_460_198_131_126_603_104,
    0.148_874_338_981_631_210_884_826_001_130,
    0.0,
];
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062,
    0.032_558_162_307_964_727_478_818_972_459,
    0.054_755_896_574_351_996_031_381_300_245,
    0.075_039_674_810_919_952_767_043_140_916,
    0.093_125_454_583_697_605_535_065_465_083,
    0.109_387_158_802_297_641_899_210_590_326,
    0.123_491_976_262_065_851_077_600_525_454,
    0.134_709_217_311_473_325_928_054_001_772,
    0.142_775_938_577_060_080_797_094_273_139,
    0.147_739_104_901_338_491_374_841_515_972,
    0.149_445_554_002_916_905_664_936_468_390,
];
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893,
    0.149_451_349_150_580_593_145_776_339_658,
    0.219_086_362_515_982_043_995_534_934_228,
    0.269_266_719_309_996_355_091_226_921_569,
    0.295_524_224_714_752_870_173_892_994_651,
];

fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut resk = fc * WGK[10];
    let mut resg = 0.0;
    let mut resabs = resk.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        resk += WGK[j] * (f1 + f2);
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            resg += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = resk * 0.5;
    let mut resasc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        resasc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let result = resk * h;
    let resabs = resabs * h.abs();
    let resasc = resasc * h.abs();
    let mut err = ((resk - resg) * h).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    (result, err)
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Segment {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// ∫ f over the union of consecutive intervals given by sorted `points`.
pub fn quad_1d_points<F: Fn(f64) -> f64>(f: F, points: &[f64], spec: &QuadratureSpec) -> Result<f64> {
    spec.validate()?;
    if points.len() < 2 {
        return Err(FlurError::Domain("need at least two integration limits".into()));
    }
    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in points.windows(2) {
        if !(w[0] < w[1]) {
            if w[0] == w[1] {
                continue;
            }
            return Err(FlurError::Domain(format!("integration limits not increasing: {} {}", w[0], w[1])));
        }
        let (v, e) = gk21(&f, w[0], w[1]);
        total += v;
        total_err += e;
        heap.push(Segment { a: w[0], b: w[1], value: v, err: e });
    }
    if !total.is_finite() {
        return Err(FlurError::NonConvergence("integrand is not finite".into()));
    }
    let mut count = heap.len();
    // segments too narrow to split further
    let mut frozen_err = 0.0;
    let mut frozen = Vec::new();
    while total_err > spec.abs_tol.max(spec.rel_tol * total.abs()) {
        let Some(seg) = heap.pop() else { break };
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b || (seg.b - seg.a) < 1e-14 * (seg.a.abs() + seg.b.abs()) {
            frozen_err += seg.err;
            frozen.push(seg);
            if frozen_err > spec.abs_tol.max(spec.rel_tol * total.abs()) {
                return Err(FlurError::NonConvergence(format!(
                    "interval collapsed near {mid} with error {frozen_err:e}"
                )));
            }
            continue;
        }
        if count >= spec.max_subdivisions {
            return Err(FlurError::NonConvergence(format!(
                "{} subdivisions exhausted, estimate {total} error {total_err:e}",
                spec.max_subdivisions
            )));
        }
        let (v1, e1) = gk21(&f, seg.a, mid);
        let (v2, e2) = gk21(&f, mid, seg.b);
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.err;
        count += 1;
        heap.push(Segment { a: seg.a, b: mid, value: v1, err: e1 });
        heap.push(Segment { a: mid, b: seg.b, value: v2, err: e2 });
        if !total.is_finite() {
            return Err(FlurError::NonConvergence("integrand is not finite".into()));
        }
    }
    // re-sum to shed accumulated rounding from the running updates
    let mut sum = 0.0;
    let mut comp = 0.0;
    for s in heap.into_iter().chain(frozen) {
        let y = s.value - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    Ok(sum)
}

/// ∫_a^b f.
pub fn quad_1d<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return Ok(-quad_1d_points(f, &[b, a], spec)?);
    }
    quad_1d_points(f, &[a, b], spec)
}

/// ∫ over the segment from `c` to `c + len` of an integrand behaving like
/// r^alpha in the distance r = |x − c| (alpha > −1). The integrand is
/// called with r rather than x so that tiny distances keep full precision.
/// For alpha < 0 the substitution r = |len|·t^{1/(1+alpha)} removes the
/// singularity.
pub fn quad_endpoint_power<F: Fn(f64) -> f64>(
    f_of_offset: F,
    len: f64,
    alpha: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    if len == 0.0 {
        return Ok(0.0);
    }
    if !(alpha > -1.0) {
        return Err(FlurError::Domain(format!("endpoint exponent must exceed -1, got {alpha}")));
    }
    let sign = len.signum();
    let l = len.abs();
    if alpha >= 0.0 {
        return Ok(sign * quad_1d(f_of_offset, 0.0, l, spec)?);
    }
    let beta = 1.0 / (1.0 + alpha);
    let g = |t: f64| {
        let tb = t.powf(beta);
        f_of_offset(l * tb) * l * beta * tb / t
    };
    Ok(sign * quad_1d(g, 0.0, 1.0, spec)?)
}

/// ∫_a^∞ f for an integrand decaying faster than 1/x.
pub fn quad_to_infinity<F: Fn(f64) -> f64>(f: F, a: f64, spec: &QuadratureSpec) -> Result<f64> {
    let g = |t: f64| {
        let s = 1.0 - t;
        if s <= 0.0 {
            return 0.0;
        }
        let v = f(a + t / s) / (s * s);
        if v.is_finite() {
            v
        } else if f(a + t / s) == 0.0 {
            0.0
        } else {
            v
        }
    };
    quad_1d(g, 0.0, 1.0, spec)
}

/// ∫_a^∞ f for a > 0 and f decaying like x^{−p}, p > 1. The map
/// x = a·u^{−1/(p−1)} turns that tail into a bounded integrand on (0, 1].
pub fn quad_to_infinity_power<F: Fn(f64) -> f64>(f: F, a: f64, p: f64, spec: &QuadratureSpec) -> Result<f64> {
    if !(a > 0.0 && p > 1.0) {
        return Err(FlurError::Domain(format!("need a > 0 and p > 1, got a = {a}, p = {p}")));
    }
    let gamma = 1.0 / (p - 1.0);
    let g = |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        let x = a * u.powf(-gamma);
        if !x.is_finite() {
            return 0.0;
        }
        let v = f(x);
        if v == 0.0 {
            0.0
        } else {
            v * gamma * x / u
        }
    };
    quad_1d(g, 0.0, 1.0, spec)
}

/// ∬ g(u, v) over [u0,u1]×[v0,v1] where g is singular like |u−v|^alpha on
/// the diagonal. g is called as g(u, v, |u−v|) with the distance computed
/// exactly near the diagonal. `breaks` lists extra coordinates where g is
/// not smooth, applied on both axes.
pub fn quad_2d_singular_diagonal<G: Fn(f64, f64, f64) -> f64>(
    g: G,
    u_range: (f64, f64),
    v_range: (f64, f64),
    alpha: f64,
    breaks: &[f64],
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    let (u0, u1) = u_range;
    let (v0, v1) = v_range;
    if !(u0 <= u1 && v0 <= v1) {
        return Err(FlurError::Domain("rectangle limits must be increasing".into()));
    }
    if u0 == u1 || v0 == v1 {
        return Ok(0.0);
    }
    let inner_spec = spec.tighter(10.0 * (u1 - u0).max(1.0));
    let err_cell = std::cell::RefCell::new(None);
    let inner = |u: f64| -> f64 {
        match inner_integral(&g, u, v0, v1, alpha, breaks, &inner_spec) {
            Ok(v) => v,
            Err(e) => {
                err_cell.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let mut pts = vec![u0];
    for &p in [v0, v1].iter().chain(breaks.iter()) {
        if p > u0 && p < u1 {
            pts.push(p);
        }
    }
    pts.push(u1);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let value = quad_1d_points(inner, &pts, spec)?;
    if let Some(e) = err_cell.into_inner() {
        return Err(e);
    }
    Ok(value)
}

fn inner_integral<G: Fn(f64, f64, f64) -> f64>(
    g: &G,
    u: f64,
    v0: f64,
    v1: f64,
    alpha: f64,
    breaks: &[f64],
    spec: &QuadratureSpec,
) -> Result<f64> {
    let mut pts = vec![v0];
    for &p in breaks.iter() {
        if p > v0 && p < v1 {
            pts.push(p);
        }
    }
    if u > v0 && u < v1 {
        pts.push(u);
    }
    pts.push(v1);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let f = |v: f64| g(u, v, (u - v).abs());
        total += if alpha < 0.0 && a == u {
            quad_endpoint_power(|r| g(u, u + r, r), b - a, alpha, spec)?
        } else if alpha < 0.0 && b == u {
            -quad_endpoint_power(|r| g(u, u - r, r), a - b, alpha, spec)?
        } else {
            quad_1d(f, a, b, spec)?
        };
    }
    Ok(total)
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j as f64 + 1.0) * z * p2 - j as f64 * p3) / (j as f64 + 1.0);
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// The 16-point Gauss–Legendre rule, computed once.
pub fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Fixed-rule integral with the 16-point Gauss–Legendre rule.
pub fn gl16_integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let (x, w) = gl16();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for i in 0..16 {
        s += w[i] * f(c + h * x[i]);
    }
    s * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_and_power_singularity() {
        let s = QuadratureSpec::default();
        assert!((quad_1d(|_| 1.0, 0.0, 1.0, &s).unwrap() - 1.0).abs() < 1e-14);
        let v = quad_1d(|u: f64| u.powf(-0.4), 0.0, 1.0, &s).unwrap();
        assert!((v - 1.0 / 0.6).abs() < 1e-9, "{v}");
        let v = quad_endpoint_power(|r: f64| r.powf(-0.4), 1.0, -0.4, &s).unwrap();
        assert!((v - 1.0 / 0.6).abs() < 1e-12, "{v}");
        // ∫_0^1 (1−u)^{−0.9} du written from the singular end u = 1
        let v = -quad_endpoint_power(|r: f64| r.powf(-0.9), -1.0, -0.9, &s).unwrap();
        assert!((v - 10.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn oscillatory_against_composite_rule() {
        let f = |u: f64| u.cos() / (1.0 + u * u).powf(0.8);
        // composite Simpson with 10^6 panels
        let n = 1_000_000usize;
        let h = 10.0 / n as f64;
        let mut s = f(0.0) + f(10.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let oracle = s * h / 3.0;
        let v = quad_1d(f, 0.0, 10.0, &QuadratureSpec::default()).unwrap();
        assert!((v - oracle).abs() < 1e-9, "{v} {oracle}");
    }

    #[test]
    fn exhausted_budget_is_an_error() {
        let s = QuadratureSpec::new(1e-15, 1e-15, 2).unwrap();
        assert!(quad_1d(|u: f64| u.powf(-0.9), 0.0, 1.0, &s).is_err());
        assert!(QuadratureSpec::new(0.0, 1e-8, 10).is_err());
    }

    #[test]
    fn diagonal_singular_double_integrals() {
        let s = QuadratureSpec::default();
        let v = quad_2d_singular_diagonal(|_, _, _| 1.0, (0.0, 1.0), (0.0, 1.0), 0.0, &[], &s).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let v = quad_2d_singular_diagonal(
            |_, _, r: f64| r.powf(-0.4),
            (0.0, 1.0),
            (0.0, 1.0),
            -0.4,
            &[],
            &s,
        )
        .unwrap();
        assert!((v - 2.0 / (0.6 * 1.6)).abs() < 1e-8, "{v}");
        // midpoint-rule oracle on a 2000×2000 grid with Richardson correction
        let m = 2000usize;
        let h = 1.0 / m as f64;
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                acc += (-(((i as f64) - (j as f64)) * h).abs()).exp();
            }
        }
        let exact = 2.0 * (-1.0f64).exp();
        let v = quad_2d_singular_diagonal(|_, _, r: f64| (-r).exp(), (0.0, 1.0), (0.0, 1.0), 0.0, &[], &s)
            .unwrap();
        assert!((acc * h * h - v).abs() < 1e-6, "{v} {}", acc * h * h);
        assert!((v - exact).abs() < 1e-9);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(16);
        for k in 0..32 {
            let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((s - exact).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn semi_infinite() {
        let v = quad_to_infinity(|x: f64| (-x).exp(), 1.0, &QuadratureSpec::default()).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }
}
