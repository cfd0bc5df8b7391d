//! The coupled plant-optimizer map `xi = (x, z) -> (x+, z+)` and closed-loop
//! rollouts with per-step metrics.

use nalgebra::DVector;
use rand::Rng;

use crate::ocp::{Iterate, OcpSpec};
use crate::optimizer::{self, OracleResult, RtiSettings};
use crate::{plant, Error, Result};

/// Substep density of the plant integration within one sampling interval.
pub const PLANT_SUBSTEPS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub x: DVector<f64>,
    pub z: Iterate,
}

impl CoupledState {
    /// `|(x, z)|` over the stacked vector.
    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.z.to_vector().norm_squared()).sqrt()
    }
}

/// One sampling interval: the plant runs under `u_0` of `z`, then the optimizer
/// takes one step at the new state.
pub fn step(spec: &OcpSpec, settings: &RtiSettings, t: f64, xi: &CoupledState) -> Result<CoupledState> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("sampling time must be positive, got {t}")));
    }
    let u = optimizer::extract_control(&xi.z);
    let x = plant::integrate(&spec.plant, &xi.x, &u, t, PLANT_SUBSTEPS)?;
    let warm = if settings.shift_warmstart {
        optimizer::shift_iterate(&xi.z)
    } else {
        xi.z.clone()
    };
    let z = optimizer::rti_step(spec, &x, &warm, settings)?;
    Ok(CoupledState { x, z })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub v: Option<f64>,
    /// `|z_k - z_bar(x_k)|`.
    pub e: Option<f64>,
    pub v_so: Option<f64>,
    /// `E_{k+1} / E_k`.
    pub k_z: Option<f64>,
    /// `(V_{k+1} - V_k) / T`.
    pub dv: Option<f64>,
    /// `(V_so_{k+1} - V_so_k) / T`.
    pub dvso: Option<f64>,
    /// `|z_k|`, kept for the `|xi|` margins of the audit.
    pub z_norm: f64,
}

impl TraceRow {
    pub fn xi_norm(&self) -> f64 {
        (self.x.norm_squared() + self.z_norm * self.z_norm).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub sampling_time: f64,
    pub nx: usize,
    pub nu: usize,
    pub rows: Vec<TraceRow>,
}

impl ClosedLoopTrace {
    pub fn final_state(&self) -> &DVector<f64> {
        &self.rows.last().expect("traces have at least one row").x
    }

    /// `V_{k+1} - V_k` for each consecutive pair.
    pub fn dv_raw(&self) -> Vec<Option<f64>> {
        self.rows.windows(2).map(|w| Some(w[1].v? - w[0].v?)).collect()
    }

    /// `V_so_{k+1} - V_so_k` for each consecutive pair.
    pub fn dvso_raw(&self) -> Vec<Option<f64>> {
        self.rows.windows(2).map(|w| Some(w[1].v_so? - w[0].v_so?)).collect()
    }

    /// Fills `V_so = V^{1/q} + beta E` and its rate from the recorded `V`, `E`.
    pub fn attach_v_so(&mut self, q: f64, beta: f64) {
        for row in self.rows.iter_mut() {
            row.v_so = match (row.v, row.e) {
                (Some(v), Some(e)) => Some(v.powf(1.0 / q) + beta * e),
                _ => None,
            };
        }
        let t = self.sampling_time;
        for k in 0..self.rows.len() {
            let next = self.rows.get(k + 1).and_then(|r| r.v_so);
            self.rows[k].dvso = match (self.rows[k].v_so, next) {
                (Some(a), Some(b)) => Some((b - a) / t),
                _ => None,
            };
        }
    }
}

/// Oracle solution at `x0` and a start iterate `z_bar(x0) + delta` with `|delta| = radius`.
pub fn perturbed_start<R: Rng>(
    spec: &OcpSpec,
    settings: &RtiSettings,
    x0: &DVector<f64>,
    radius: f64,
    rng: &mut R,
) -> Result<(Iterate, OracleResult)> {
    let oracle = optimizer::solve_cold(spec, x0, settings)?;
    let z = oracle.z_bar.to_vector();
    let delta = random_direction(z.len(), rng) * radius;
    Ok((Iterate::from_vector(spec, &(z + delta))?, oracle))
}

/// Like [`perturbed_start`], followed by `settle_steps` RTI steps at fixed `x0`.
///
/// The first step after a perturbation of the full primal-dual vector is a
/// transient that the contraction estimate leaves out; settling starts the loop
/// on the iterates the estimate describes.
pub fn settled_start<R: Rng>(
    spec: &OcpSpec,
    settings: &RtiSettings,
    x0: &DVector<f64>,
    radius: f64,
    settle_steps: usize,
    rng: &mut R,
) -> Result<(Iterate, OracleResult)> {
    let (mut z, oracle) = perturbed_start(spec, settings, x0, radius, rng)?;
    for _ in 0..settle_steps {
        z = optimizer::rti_step(spec, x0, &z, settings)?;
    }
    Ok((z, oracle))
}

/// Uniformly distributed unit vector.
pub fn random_direction<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Rolls the coupled system forward for `n_steps` sampling intervals.
///
/// With `with_oracle`, `z_bar(x_k)` and `V(x_k)` are computed at every visited
/// state, warm-started from the previous oracle solution.
pub fn rollout(
    spec: &OcpSpec,
    settings: &RtiSettings,
    t: f64,
    x0: &DVector<f64>,
    z0: &Iterate,
    n_steps: usize,
    with_oracle: bool,
) -> Result<ClosedLoopTrace> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("sampling time must be positive, got {t}")));
    }
    let mut xi = CoupledState { x: x0.clone(), z: z0.clone() };
    let mut rows = Vec::with_capacity(n_steps + 1);
    let mut warm: Option<Iterate> = None;
    for k in 0..=n_steps {
        if k > 0 {
            xi = step(spec, settings, t, &xi).map_err(|e| Error::at_step(k - 1, e))?;
        }
        let (v, e) = if with_oracle {
            let oracle = match &warm {
                Some(w) => optimizer::solve_converged(spec, &xi.x, w, settings),
                None => optimizer::solve_cold(spec, &xi.x, settings),
            }
            .map_err(|err| Error::at_step(k, err))?;
            let e = settings.error(&xi.z, &oracle.z_bar);
            let v = oracle.v;
            warm = Some(oracle.z_bar);
            (Some(v), Some(e))
        } else {
            (None, None)
        };
        rows.push(TraceRow {
            k,
            t: k as f64 * t,
            x: xi.x.clone(),
            u: optimizer::extract_control(&xi.z),
            v,
            e,
            v_so: None,
            k_z: None,
            dv: None,
            dvso: None,
            z_norm: xi.z.norm(),
        });
    }
    for k in 0..n_steps {
        let (now, next) = (&rows[k], &rows[k + 1]);
        let k_z = match (now.e, next.e) {
            (Some(a), Some(b)) if a > 1e-12 => Some(b / a),
            _ => None,
        };
        let dv = match (now.v, next.v) {
            (Some(a), Some(b)) => Some((b - a) / t),
            _ => None,
        };
        rows[k].k_z = k_z;
        rows[k].dv = dv;
    }
    Ok(ClosedLoopTrace {
        sampling_time: t,
        nx: spec.nx(),
        nu: spec.nu(),
        rows,
    })
}
