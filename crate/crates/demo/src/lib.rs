//! WebAssembly bindings behind `www/index.html`.
//!
//! Results come back as flat `Float64Array`s with a fixed number of values per
//! record; the page slices them. The plain functions are what the native tests
//! call, the `js_*` wrappers only convert errors.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rticert::certify::{self, AuxConstants};
use rticert::coupled;
use rticert::ocp::OcpSpec;
use rticert::optimizer::RtiSettings;
use rticert::DVector;
use wasm_bindgen::prelude::*;

pub const SCAN_STRIDE: usize = 4;
pub const RUN_STRIDE: usize = 5;

fn aux(q: f64, a_bar: f64, kappa: f64, gamma_hat: f64, mu_hat: f64) -> AuxConstants {
    AuxConstants { q, a_bar, kappa, gamma_hat, mu_hat, reported_t5: None, reported_beta: None }
}

/// `n` log-spaced sampling times in `[t_lo, t_hi]`, each as
/// `[T, condition value, spectral radius, verdict]`.
///
/// The verdict is 1 for stable, 0 for unstable and NaN where `T a_bar >= 1`.
pub fn scan(c: &AuxConstants, t_lo: f64, t_hi: f64, n: usize) -> Result<Vec<f64>, String> {
    c.validate().map_err(|e| e.to_string())?;
    if !(t_lo > 0.0 && t_hi >= t_lo) || n == 0 {
        return Err("need 0 < t_lo <= t_hi and at least one point".into());
    }
    let mut out = Vec::with_capacity(n * SCAN_STRIDE);
    for i in 0..n {
        let s = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        let t = t_lo * (t_hi / t_lo).powf(s);
        match certify::stability_condition(c, t) {
            Ok(cert) => out.extend([t, cert.condition_value, cert.spectral_radius, f64::from(u8::from(cert.stable))]),
            Err(_) => out.extend([t, f64::NAN, f64::NAN, f64::NAN]),
        }
    }
    Ok(out)
}

/// `[beta, T5]`.
pub fn beta_t5(c: &AuxConstants) -> Result<Vec<f64>, String> {
    c.validate().map_err(|e| e.to_string())?;
    let beta = certify::compute_beta(c).map_err(|e| e.to_string())?;
    Ok(vec![beta, certify::t5(c)])
}

/// Closed-loop Chen run from `(x1, x2)`, one `[t, x1, x2, u, E]` record per step.
pub fn chen_run(x1: f64, x2: f64, t: f64, n_steps: usize, z_radius: f64, seed: u64) -> Result<Vec<f64>, String> {
    if n_steps > 5000 {
        return Err("at most 5000 steps".into());
    }
    let spec = OcpSpec::chen_default(0.5);
    let settings = RtiSettings::default();
    let x0 = DVector::from_vec(vec![x1, x2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z0, _) = coupled::settled_start(&spec, &settings, &x0, z_radius, 1, &mut rng).map_err(|e| e.to_string())?;
    let trace = coupled::rollout(&spec, &settings, t, &x0, &z0, n_steps, true).map_err(|e| e.to_string())?;
    Ok(trace
        .rows
        .iter()
        .flat_map(|r| [r.t, r.x[0], r.x[1], r.u[0], r.e.unwrap_or(f64::NAN)])
        .collect())
}

#[wasm_bindgen]
pub fn js_scan(q: f64, a_bar: f64, kappa: f64, gamma_hat: f64, mu_hat: f64, t_lo: f64, t_hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    scan(&aux(q, a_bar, kappa, gamma_hat, mu_hat), t_lo, t_hi, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn js_beta_t5(q: f64, a_bar: f64, kappa: f64, gamma_hat: f64, mu_hat: f64) -> Result<Vec<f64>, JsError> {
    beta_t5(&aux(q, a_bar, kappa, gamma_hat, mu_hat)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn js_chen_run(x1: f64, x2: f64, t: f64, n_steps: usize, z_radius: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    chen_run(x1, x2, t, n_steps, z_radius, seed).map_err(|e| JsError::new(&e))
}
