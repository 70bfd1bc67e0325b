//! Browser bindings: path simulation, TFBMII variance curves and knot fitting.

use flurlab::numerics::SeedTree;
use flurlab::piecewise::{fit, PiecewiseModel};
use flurlab::process::{simulate, ProcessSpec, TemperingRegime};
use flurlab::tfbm::{variance, TfbmParams};
use wasm_bindgen::prelude::*;

fn js(e: flurlab::FlurError) -> JsError {
    JsError::new(&e.to_string())
}

/// One path X_1..X_n of the tempered linear process with unit innovations.
#[wasm_bindgen]
pub fn simulate_path(d: f64, lambda: f64, n: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let spec = ProcessSpec::new(d, lambda, 1.0).map_err(js)?;
    let path = simulate(&spec, &TemperingRegime::fixed(lambda), n, &SeedTree::new(u64::from(seed))).map_err(js)?;
    Ok(path.values)
}

/// Var B(t) on `points` equally spaced times in (0, t_max].
#[wasm_bindgen]
pub fn tfbm_variance_curve(d: f64, lambda: f64, t_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    if !(t_max > 0.0) || points == 0 {
        return Err(JsError::new("need t_max > 0 and at least one point"));
    }
    let p = TfbmParams::new(d, lambda, 1.0).map_err(js)?;
    (1..=points).map(|i| variance(&p, t_max * i as f64 / points as f64).map_err(js)).collect()
}

/// Simulates y_j = μ(j/n) + σ X_j for a broken line with knot `eta`, then refits it.
/// Returns JSON with the data, the fitted curve and the estimates.
#[wasm_bindgen]
pub fn knot_demo(d: f64, lambda: f64, n: usize, eta: f64, slope_change: f64, noise: f64, seed: u32) -> Result<String, JsError> {
    let model = PiecewiseModel::new(1, 2, eta, vec![0.0, slope_change]).map_err(js)?;
    let spec = ProcessSpec::new(d, lambda, 1.0).map_err(js)?;
    let x = simulate(&spec, &TemperingRegime::fixed(lambda), n, &SeedTree::new(u64::from(seed))).map_err(js)?.values;
    let y: Vec<f64> = (1..=n).map(|j| model.mu(j as f64 / n as f64) + noise * x[j - 1]).collect();
    let f = fit(&y, 1, 2).map_err(js)?;
    let fitted = PiecewiseModel::new(1, 2, f.eta_hat, f.a_hat.clone()).map_err(js)?;
    let curve: Vec<f64> = (1..=n).map(|j| fitted.mu(j as f64 / n as f64)).collect();
    let out = serde_json::json!({ "y": y, "fitted": curve, "eta_hat": f.eta_hat, "a_hat": f.a_hat, "rss": f.rss });
    Ok(out.to_string())
}
