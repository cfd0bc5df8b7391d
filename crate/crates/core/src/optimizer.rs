//! Optimizer dynamics: one Gauss-Newton SQP step with a fixed
//! Levenberg-Marquardt shift (real-time iteration), and the same step repeated
//! to convergence as an oracle for the exact solution `z_bar(x)`.

use nalgebra::DVector;

use crate::ocp::{self, Iterate, KktResidual, OcpSpec};
use crate::qp::{self, ActiveBound, DenseQp, QpStatus, Side};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RtiSettings {
    /// Added to the diagonal of the Gauss-Newton Hessian.
    pub lm_shift: f64,
    /// Oracle stops once every KKT component is at most this.
    pub kkt_tol: f64,
    pub max_oracle_iters: usize,
    /// Shift the previous iterate one stage forward before each coupled step.
    pub shift_warmstart: bool,
    /// Measure iterate errors over the primal block only.
    pub primal_only_error: bool,
}

impl Default for RtiSettings {
    fn default() -> Self {
        RtiSettings {
            lm_shift: 1e-4,
            kkt_tol: 1e-8,
            max_oracle_iters: 200,
            shift_warmstart: false,
            primal_only_error: false,
        }
    }
}

impl RtiSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lm_shift >= 0.0) || !self.lm_shift.is_finite() {
            return Err(Error::InvalidArgument(format!("lm_shift must be >= 0, got {}", self.lm_shift)));
        }
        if !(self.kkt_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("kkt_tol must be > 0, got {}", self.kkt_tol)));
        }
        if self.max_oracle_iters == 0 {
            return Err(Error::InvalidArgument("max_oracle_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Iterate error in the norm selected by `primal_only_error`.
    pub fn error(&self, a: &Iterate, b: &Iterate) -> f64 {
        if self.primal_only_error {
            a.primal_distance(b)
        } else {
            a.distance(b)
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub z_bar: Iterate,
    pub v: f64,
    pub iters: usize,
    pub kkt: KktResidual,
}

/// Bounds whose multiplier is positive, as a warm start for the QP.
fn active_bounds(spec: &OcpSpec, z: &Iterate) -> Vec<ActiveBound> {
    let offset = spec.u_offset();
    let mut set = Vec::new();
    for k in 0..spec.n_bounds() {
        if z.mu_lo[k] > 0.0 {
            set.push(ActiveBound { index: offset + k, side: Side::Lower });
        } else if z.mu_hi[k] > 0.0 {
            set.push(ActiveBound { index: offset + k, side: Side::Upper });
        }
    }
    set
}

/// One full-step Gauss-Newton SQP iteration at parameter `x` from `z`.
pub fn rti_step(spec: &OcpSpec, x: &DVector<f64>, z: &Iterate, settings: &RtiSettings) -> Result<Iterate> {
    let (c, jac) = spec.linearize(x, z)?;
    let w = z.primal();
    let h_gn = spec.cost_hessian();
    let g = &h_gn * &w;
    let n = spec.n_primal();
    let h = h_gn + nalgebra::DMatrix::identity(n, n) * settings.lm_shift;

    let nu = spec.nu();
    let offset = spec.u_offset();
    let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n, f64::INFINITY);
    for k in 0..spec.n_bounds() {
        let j = k % nu;
        lb[offset + k] = spec.u_lo[j] - w[offset + k];
        ub[offset + k] = spec.u_hi[j] - w[offset + k];
        if lb[offset + k] > ub[offset + k] {
            return Err(Error::InvalidArgument("iterate input far outside its bounds".into()));
        }
        // an iterate sitting slightly outside its box gets a zero-width correction window
        lb[offset + k] = lb[offset + k].min(ub[offset + k]);
    }
    let problem = DenseQp { h, g, a_eq: jac, b_eq: -c, lb, ub };
    let sol = qp::solve_qp(&problem, Some(&active_bounds(spec, z)));
    if sol.status != QpStatus::Solved {
        return Err(Error::QpFailed(sol.status));
    }

    let mut next = z.clone();
    next.set_primal(&(w + &sol.primal));
    let nx = spec.nx();
    for (i, lam) in next.lam.iter_mut().enumerate() {
        lam.copy_from(&sol.eq_duals.rows(i * nx, nx));
    }
    next.mu_lo.copy_from(&sol.lower_duals.rows(offset, spec.n_bounds()));
    next.mu_hi.copy_from(&sol.upper_duals.rows(offset, spec.n_bounds()));
    Ok(next)
}

/// Repeats [`rti_step`] at fixed `x` until the KKT residual drops below `kkt_tol`.
///
/// Below `kkt_tol` the iteration continues as long as the residual still halves
/// per step, so the result sits at the finite-difference noise floor rather
/// than just under the tolerance.
pub fn solve_converged(spec: &OcpSpec, x: &DVector<f64>, z_init: &Iterate, settings: &RtiSettings) -> Result<OracleResult> {
    let mut z = z_init.clone();
    let mut iters = 0;
    let mut previous = f64::INFINITY;
    loop {
        let kkt = ocp::kkt_residual(spec, x, &z)?;
        let value = kkt.max();
        let stalled = value > 0.5 * previous;
        if value <= 1e-4 * settings.kkt_tol
            || (value <= settings.kkt_tol && (stalled || iters >= settings.max_oracle_iters))
        {
            let v = ocp::eval_objective(spec, &z);
            return Ok(OracleResult { z_bar: z, v, iters, kkt });
        }
        if iters >= settings.max_oracle_iters {
            return Err(Error::OracleFailure { iterations: iters, kkt: value });
        }
        previous = value;
        z = rti_step(spec, x, &z, settings)?;
        iters += 1;
    }
}

/// Cold start for the oracle: zero inputs, shooting nodes from the forward rollout.
pub fn cold_start(spec: &OcpSpec, x: &DVector<f64>) -> Result<Iterate> {
    let controls = vec![DVector::zeros(spec.nu()); spec.n_intervals];
    Iterate::forward_rollout(spec, x, &controls)
}

/// Oracle solve from a cold start.
pub fn solve_cold(spec: &OcpSpec, x: &DVector<f64>, settings: &RtiSettings) -> Result<OracleResult> {
    solve_converged(spec, x, &cold_start(spec, x)?, settings)
}

/// The `u_0` block of `z`.
pub fn extract_control(z: &Iterate) -> DVector<f64> {
    z.u[0].clone()
}

/// Moves every stage one interval forward, repeating the last one.
pub fn shift_iterate(z: &Iterate) -> Iterate {
    let mut out = z.clone();
    let n = z.u.len();
    let nu = z.u[0].len();
    for i in 0..n {
        out.s[i] = z.s[i + 1].clone();
        out.lam[i] = z.lam[i + 1].clone();
    }
    for i in 0..n - 1 {
        out.u[i] = z.u[i + 1].clone();
        for j in 0..nu {
            out.mu_lo[i * nu + j] = z.mu_lo[(i + 1) * nu + j];
            out.mu_hi[i * nu + j] = z.mu_hi[(i + 1) * nu + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chen() -> OcpSpec {
        OcpSpec::chen_default(0.5)
    }

    fn perturb(spec: &OcpSpec, z: &Iterate, size: f64, rng: &mut ChaCha8Rng) -> Iterate {
        let d = DVector::from_fn(spec.n_z(), |_, _| rng.random_range(-1.0..1.0));
        Iterate::from_vector(spec, &(z.to_vector() + d.normalize() * size)).unwrap()
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let spec = chen();
        let zero = Iterate::zeros(&spec);
        let x0 = DVector::zeros(2);
        let next = rti_step(&spec, &x0, &zero, &RtiSettings::default()).unwrap();
        assert_eq!(next.norm(), 0.0);
        let res = solve_converged(&spec, &x0, &zero, &RtiSettings::default()).unwrap();
        assert_eq!(res.iters, 0);
        assert_eq!(res.v, 0.0);
    }

    #[test]
    fn chen_oracle_converges_and_is_a_fixed_point() {
        let spec = chen();
        let settings = RtiSettings::default();
        let x = DVector::from_vec(vec![0.2, 0.2]);
        let res = solve_cold(&spec, &x, &settings).unwrap();
        assert!(res.kkt.max() <= 1e-8);
        assert!(res.v > 0.0);
        assert_eq!(res.v, ocp::eval_objective(&spec, &res.z_bar));
        let next = rti_step(&spec, &x, &res.z_bar, &settings).unwrap();
        assert!(next.distance(&res.z_bar) <= 1e-8);
    }

    #[test]
    fn contraction_is_q_linear() {
        let spec = chen();
        let settings = RtiSettings::default();
        let x = DVector::from_vec(vec![0.2, -0.1]);
        let bar = solve_cold(&spec, &x, &settings).unwrap().z_bar;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = perturb(&spec, &bar, 1e-2, &mut rng);
        let z1 = rti_step(&spec, &x, &z0, &settings).unwrap();
        let z2 = rti_step(&spec, &x, &z1, &settings).unwrap();
        let r1 = z1.distance(&bar) / z0.distance(&bar);
        let r2 = z2.distance(&bar) / z1.distance(&bar);
        assert!(r1 < 1.0 && r2 < 1.0, "ratios {r1} {r2}");
    }

    #[test]
    fn warm_start_is_cheaper_and_consistent() {
        let spec = chen();
        let settings = RtiSettings::default();
        let x = DVector::from_vec(vec![0.3, 0.1]);
        let near = DVector::from_vec(vec![0.301, 0.1]);
        let cold = solve_cold(&spec, &x, &settings).unwrap();
        let other = solve_cold(&spec, &near, &settings).unwrap();
        let warm = solve_converged(&spec, &x, &other.z_bar, &settings).unwrap();
        assert!(warm.iters < cold.iters);
        assert!(warm.z_bar.distance(&cold.z_bar) <= 1e-6);
    }

    #[test]
    fn multiplier_perturbation_moves_stationarity_linearly() {
        let spec = chen();
        let settings = RtiSettings::default();
        let x = DVector::from_vec(vec![0.2, 0.2]);
        let bar = solve_cold(&spec, &x, &settings).unwrap().z_bar;
        let base = ocp::kkt_residual(&spec, &x, &bar).unwrap().stationarity;
        for delta in [1e-3, 1e-4] {
            let mut z = bar.clone();
            z.lam[1][0] += delta;
            let stat = ocp::kkt_residual(&spec, &x, &z).unwrap().stationarity;
            assert!(stat - base > 0.1 * delta && stat - base < 10.0 * delta);
        }
    }

    #[test]
    fn control_selector() {
        let spec = chen();
        let mut z = Iterate::zeros(&spec);
        assert_eq!(extract_control(&z)[0], 0.0);
        z.u[0][0] = 2.0;
        assert_eq!(extract_control(&z)[0], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z = perturb(&spec, &Iterate::zeros(&spec), rng.random_range(0.0..5.0), &mut rng);
            assert!(extract_control(&z).norm() <= z.norm());
        }
    }

    #[test]
    fn settings_validation() {
        assert!(RtiSettings { lm_shift: -1.0, ..Default::default() }.validate().is_err());
        assert!(RtiSettings { kkt_tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(RtiSettings::default().validate().is_ok());
    }
}
