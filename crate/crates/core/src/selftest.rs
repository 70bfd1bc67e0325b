//! Fast numerical self-checks, a few seconds in total.

use crate::experiments::{run, ExperimentConfig, ExperimentKind, RegimeConfig};
use crate::numerics::with_threads;
use crate::piecewise::{fit, PiecewiseModel};
use crate::process::{binomial_coefficients, omega, tauberian_ratio};
use crate::tfbm::{covariance, covariance_harmonizable_oracle, covariance_time_domain, tfi_indicator_identity_check, TfbmParams};
use crate::tfcalc::{tfd, tfi, SampledFunction, Side};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check { name, pass: false, detail: format!("error: {e}") },
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("coefficients", || {
            let mut worst: f64 = 0.0;
            for d in [-0.3, 0.3, 1.5] {
                let c = binomial_coefficients(d, 0.0, 100_000)?;
                for (k, ck) in c.iter().enumerate() {
                    worst = worst.max(rel(*ck, omega(d, k)));
                }
            }
            Ok((worst <= 1e-10, format!("recurrence vs log-gamma {worst:.2e}")))
        }),
        check("power series ratio", || {
            let e = (tauberian_ratio(0.3, 1e-5, 100_000, 1.0)? - 1.0).norm();
            Ok((e < 0.05, format!("|ratio - 1| = {e:.2e}")))
        }),
        check("covariance routes", || {
            let p = TfbmParams::new(0.3, 1.0, 1.0)?;
            let a = covariance(&p, 1.0, 0.7)?;
            let b = covariance_harmonizable_oracle(&p, 1.0, 0.7)?;
            let c = covariance_time_domain(&p, 1.0, 0.7)?;
            let worst = rel(a, b).max(rel(a, c));
            Ok((worst < 1e-5, format!("max relative gap {worst:.2e}")))
        }),
        check("indicator identity", || {
            let p = TfbmParams::new(0.3, 1.0, 1.0)?;
            let mut worst: f64 = 0.0;
            for i in 0..=40 {
                worst = worst.max(tfi_indicator_identity_check(&p, 1.0, -3.0 + 0.1 * i as f64)?);
            }
            Ok((worst < 1e-8, format!("max error {worst:.2e}")))
        }),
        check("inversion", || {
            let bump = |x: f64| if x > 0.0 && x < 1.0 { 256.0 * (x * (1.0 - x)).powi(4) } else { 0.0 };
            let f = SampledFunction::from_fn(bump, 0.0, 1.0, 1.0 / 2048.0)?;
            let back = tfd(&tfi(&f, 0.3, 1.0, Side::Minus)?, 0.3, 1.0, Side::Minus)?;
            let err = back.grid.iter().zip(&back.values).map(|(y, v)| (v - bump(*y)).abs()).fold(0.0, f64::max);
            Ok((err < 1e-4, format!("sup error {err:.2e}")))
        }),
        check("knot recovery", || {
            let m = PiecewiseModel::new(2, 3, 0.5, vec![1.0, 2.0, 3.0])?;
            let n = 1000;
            let y: Vec<f64> = (1..=n).map(|j| m.mu(j as f64 / n as f64)).collect();
            let f = fit(&y, 2, 3)?;
            let err = f.a_hat.iter().zip(&m.a).map(|(a, b)| (a - b).abs()).fold((f.eta_hat - 0.5).abs(), f64::max);
            Ok((err < 1e-5, format!("max parameter error {err:.2e}")))
        }),
        check("reproducibility", || {
            let mut c = ExperimentConfig::new(ExperimentKind::KernelFdd, 0.0, RegimeConfig::Fixed { lambda: 0.5 });
            c.n = 8192;
            c.replications = 100;
            let a = with_threads(1, || run(&c))?.to_json();
            let b = with_threads(2, || run(&c))?.to_json();
            Ok((a == b, format!("{} byte report, identical across thread counts: {}", a.len(), a == b)))
        }),
    ]
}
