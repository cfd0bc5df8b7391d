//! Continuous-time plants and zero-order-hold simulation.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Right-hand side of `dx/dt = f(x, u)`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Analytic `(df/dx, df/du)` if the model provides them.
    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    fn name(&self) -> &str;

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

/// Variant of the Chen-Allgower benchmark:
///
/// ```text
/// dx1/dt = x2 + u (mu + (1 - mu) x2)
/// dx2/dt = x1 + u (mu - 4 (1 - mu) x2)
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Chen {
    pub mu: f64,
}

impl Default for Chen {
    fn default() -> Self {
        Chen { mu: 0.5 }
    }
}

impl Dynamics for Chen {
    fn nx(&self) -> usize {
        2
    }

    fn nu(&self) -> usize {
        1
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        let mu = self.mu;
        DVector::from_vec(vec![
            x2 + u * (mu + (1.0 - mu) * x2),
            x1 + u * (mu - 4.0 * (1.0 - mu) * x2),
        ])
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let (x2, u) = (x[1], u[0]);
        let mu = self.mu;
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0 + u * (1.0 - mu), 1.0, -4.0 * (1.0 - mu) * u],
        );
        let b = DMatrix::from_column_slice(
            2,
            1,
            &[mu + (1.0 - mu) * x2, mu - 4.0 * (1.0 - mu) * x2],
        );
        Some((a, b))
    }

    fn name(&self) -> &str {
        "chen"
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("mu_chen", self.mu)]
    }
}

/// `dx/dt = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Dynamics for LinearPlant {
    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }

    fn name(&self) -> &str {
        "linear"
    }
}

/// A validated, shareable plant.
///
/// Construction checks that the origin is an equilibrium and that analytic
/// Jacobians, when present, agree with central differences.
#[derive(Clone)]
pub struct PlantModel {
    dynamics: Arc<dyn Dynamics>,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("PlantModel").field(&self.dynamics).finish()
    }
}

const EQUILIBRIUM_TOL: f64 = 1e-12;
const JACOBIAN_REL_TOL: f64 = 1e-6;
const JACOBIAN_CHECK_SAMPLES: usize = 16;

impl PlantModel {
    pub fn new<D: Dynamics + 'static>(dynamics: D) -> Result<Self> {
        let model = PlantModel {
            dynamics: Arc::new(dynamics),
        };
        let origin = model.rhs(&DVector::zeros(model.nx()), &DVector::zeros(model.nu()));
        let residual = origin.amax();
        if !(residual <= EQUILIBRIUM_TOL) {
            return Err(Error::NonzeroEquilibrium(residual));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..JACOBIAN_CHECK_SAMPLES {
            let x = DVector::from_fn(model.nx(), |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(model.nu(), |_, _| rng.random_range(-1.0..1.0));
            let err = model.jacobian_discrepancy(&x, &u);
            if err > JACOBIAN_REL_TOL {
                return Err(Error::JacobianMismatch(err));
            }
        }
        Ok(model)
    }

    pub fn chen(mu: f64) -> Self {
        PlantModel::new(Chen { mu }).expect("Chen model is valid")
    }

    pub fn nx(&self) -> usize {
        self.dynamics.nx()
    }

    pub fn nu(&self) -> usize {
        self.dynamics.nu()
    }

    pub fn name(&self) -> &str {
        self.dynamics.name()
    }

    pub fn parameters(&self) -> Vec<(&'static str, f64)> {
        self.dynamics.parameters()
    }

    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dynamics.rhs(x, u)
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        let (x, u) = (DVector::zeros(self.nx()), DVector::zeros(self.nu()));
        self.dynamics.jacobians(&x, &u).is_some()
    }

    /// Largest relative discrepancy between analytic and finite-difference
    /// Jacobians at `(x, u)`; zero when no analytic Jacobian exists.
    pub fn jacobian_discrepancy(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let Some((a, b)) = self.dynamics.jacobians(x, u) else {
            return 0.0;
        };
        let (fa, fb) = fd_jacobians(self, x, u);
        let rel = |exact: &DMatrix<f64>, approx: &DMatrix<f64>| {
            exact
                .iter()
                .zip(approx.iter())
                .map(|(e, f)| (e - f).abs() / e.abs().max(1.0))
                .fold(0.0, f64::max)
        };
        rel(&a, &fa).max(rel(&b, &fb))
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.nx() {
            return Err(Error::Dimension {
                what: "state",
                expected: self.nx(),
                got: x.len(),
            });
        }
        if u.len() != self.nu() {
            return Err(Error::Dimension {
                what: "input",
                expected: self.nu(),
                got: u.len(),
            });
        }
        Ok(())
    }
}

/// Output of [`simulate_zoh`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub t_grid: Vec<f64>,
    pub x_traj: Vec<DVector<f64>>,
    pub n_steps: usize,
}

impl SimResult {
    pub fn final_state(&self) -> &DVector<f64> {
        self.x_traj.last().expect("trajectory is never empty")
    }
}

fn rk4_step(model: &PlantModel, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = model.rhs(x, u);
    let k2 = model.rhs(&(x + &k1 * (0.5 * h)), u);
    let k3 = model.rhs(&(x + &k2 * (0.5 * h)), u);
    let k4 = model.rhs(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates `dx/dt = f(x, u0)` over `[0, t]` with `n_steps` uniform RK4 steps.
pub fn simulate_zoh(
    model: &PlantModel,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    t: f64,
    n_steps: usize,
) -> Result<SimResult> {
    model.check_dims(x0, u0)?;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t}")));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let h = t / n_steps as f64;
    let mut t_grid = Vec::with_capacity(n_steps + 1);
    let mut x_traj = Vec::with_capacity(n_steps + 1);
    t_grid.push(0.0);
    x_traj.push(x0.clone());
    for k in 0..n_steps {
        let next = rk4_step(model, &x_traj[k], u0, h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                last_finite_time: t_grid[k],
            });
        }
        x_traj.push(next);
        t_grid.push(if k + 1 == n_steps { t } else { (k + 1) as f64 * h });
    }
    Ok(SimResult {
        t_grid,
        x_traj,
        n_steps,
    })
}

/// End state of [`simulate_zoh`] without recording the grid.
pub fn integrate(
    model: &PlantModel,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    t: f64,
    n_steps: usize,
) -> Result<DVector<f64>> {
    model.check_dims(x0, u0)?;
    if !(t > 0.0) || n_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "integration needs t > 0 and n_steps >= 1 (got t = {t}, n_steps = {n_steps})"
        )));
    }
    let h = t / n_steps as f64;
    let mut x = x0.clone();
    for k in 0..n_steps {
        let next = rk4_step(model, &x, u0, h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                last_finite_time: k as f64 * h,
            });
        }
        x = next;
    }
    Ok(x)
}

/// Central-difference step for a component of magnitude `v`.
pub(crate) fn fd_step(v: f64) -> f64 {
    1e-6 * (1.0 + v.abs())
}

/// Central finite-difference Jacobians of the right-hand side.
pub fn fd_jacobians(
    model: &PlantModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nx, nu) = (model.nx(), model.nu());
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    for j in 0..nx {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (model.rhs(&xp, u) - model.rhs(&xm, u)) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..nu {
        let h = fd_step(u[j]);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (model.rhs(x, &up) - model.rhs(x, &um)) / (2.0 * h);
        b.set_column(j, &col);
    }
    (a, b)
}

/// `(df/dx, df/du)` at `(x, u)`: analytic when available, else central differences.
pub fn evaluate_jacobians(
    model: &PlantModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    model.check_dims(x, u)?;
    if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite linearization point".into()));
    }
    Ok(model
        .dynamics
        .jacobians(x, u)
        .unwrap_or_else(|| fd_jacobians(model, x, u)))
}
