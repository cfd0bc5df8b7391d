//! Multiple-shooting optimal control problem with an LQR terminal cost.
//!
//! The discretized problem for a measured state `x` is
//!
//! ```text
//! min   T_d * sum_{i<N} (s_i' Q s_i + u_i' R u_i) + s_N' P s_N
//! s.t.  s_0 - x = 0
//!       psi_d(s_i, u_i) - s_{i+1} = 0,   i = 0..N-1
//!       u_lo <= u_i <= u_hi
//! ```
//!
//! where `psi_d` is RK4 over one shooting interval `T_d = T_f / N`.
//!
//! Primal-dual iterates use the fixed layout
//! `z = (s_0..s_N, u_0..u_{N-1}, lambda_0..lambda_N, mu_lo, mu_hi)` and the
//! Lagrangian `f + lambda' c - mu_lo' (u - u_lo) + mu_hi' (u - u_hi)`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, expm};
use crate::plant::{self, PlantModel};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub n_intervals: usize,
    /// Prediction horizon `T_f` in seconds.
    pub horizon: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub plant: PlantModel,
    pub rk4_substeps: usize,
}

impl OcpSpec {
    /// Builds the problem with `P` taken from the DARE of the origin
    /// linearization, discretized exactly over one shooting interval.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plant: PlantModel,
        n_intervals: usize,
        horizon: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
        rk4_substeps: usize,
    ) -> Result<Self> {
        if n_intervals == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need N >= 1 and T_f > 0 (got N = {n_intervals}, T_f = {horizon})"
            )));
        }
        let (nx, nu) = (plant.nx(), plant.nu());
        let (ac, bc) = plant::evaluate_jacobians(&plant, &DVector::zeros(nx), &DVector::zeros(nu))?;
        let (a, b) = discretize_linearization(&ac, &bc, horizon / n_intervals as f64)?;
        let p = dare_terminal_weight(&a, &b, &q, &r)?;
        Self::with_terminal_weight(plant, n_intervals, horizon, q, r, p, u_lo, u_hi, rk4_substeps)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_terminal_weight(
        plant: PlantModel,
        n_intervals: usize,
        horizon: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p: DMatrix<f64>,
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
        rk4_substeps: usize,
    ) -> Result<Self> {
        let (nx, nu) = (plant.nx(), plant.nu());
        let check = |what: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Dimension { what, expected, got })
            }
        };
        check("Q rows", nx, q.nrows())?;
        check("Q cols", nx, q.ncols())?;
        check("R rows", nu, r.nrows())?;
        check("R cols", nu, r.ncols())?;
        check("P rows", nx, p.nrows())?;
        check("P cols", nx, p.ncols())?;
        check("u_lo", nu, u_lo.len())?;
        check("u_hi", nu, u_hi.len())?;
        if n_intervals == 0 || !(horizon > 0.0) || rk4_substeps == 0 {
            return Err(Error::InvalidArgument(
                "need N >= 1, T_f > 0 and at least one RK4 substep".into(),
            ));
        }
        if !linalg::is_symmetric(&q, 1e-12) || !linalg::is_positive_definite(&q) {
            return Err(Error::InvalidArgument("Q must be symmetric positive definite".into()));
        }
        if !linalg::is_symmetric(&r, 1e-12) || !linalg::is_positive_definite(&r) {
            return Err(Error::InvalidArgument("R must be symmetric positive definite".into()));
        }
        if !linalg::is_symmetric(&p, 1e-9) || !linalg::is_positive_semidefinite(&p, 1e-12) {
            return Err(Error::InvalidArgument("P must be symmetric positive semidefinite".into()));
        }
        if u_lo.iter().zip(u_hi.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("input bounds need u_lo < u_hi".into()));
        }
        Ok(OcpSpec {
            n_intervals,
            horizon,
            q,
            r,
            p,
            u_lo,
            u_hi,
            plant,
            rk4_substeps,
        })
    }

    /// Chen example: N = 5, T_f = 0.3, Q = 0.1 I, R = 0.1, |u| <= 2.
    pub fn chen_default(mu_chen: f64) -> Self {
        OcpSpec::new(
            PlantModel::chen(mu_chen),
            5,
            0.3,
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::identity(1, 1) * 0.1,
            DVector::from_element(1, -2.0),
            DVector::from_element(1, 2.0),
            10,
        )
        .expect("Chen defaults are valid")
    }

    /// Shooting interval `T_d = T_f / N`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_intervals as f64
    }

    pub fn nx(&self) -> usize {
        self.plant.nx()
    }

    pub fn nu(&self) -> usize {
        self.plant.nu()
    }

    /// Number of primal variables `(N+1) n_x + N n_u`.
    pub fn n_primal(&self) -> usize {
        (self.n_intervals + 1) * self.nx() + self.n_intervals * self.nu()
    }

    pub fn n_eq(&self) -> usize {
        (self.n_intervals + 1) * self.nx()
    }

    pub fn n_bounds(&self) -> usize {
        self.n_intervals * self.nu()
    }

    /// Length of the full primal-dual vector.
    pub fn n_z(&self) -> usize {
        self.n_primal() + self.n_eq() + 2 * self.n_bounds()
    }

    /// Offset of `u_0` in the primal vector.
    pub fn u_offset(&self) -> usize {
        (self.n_intervals + 1) * self.nx()
    }

    /// `psi_d(s, u)`: RK4 over one shooting interval.
    pub fn shoot(&self, s: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        plant::integrate(&self.plant, s, u, self.dt(), self.rk4_substeps)
    }

    /// `psi_d(s, u)` and its central-difference sensitivities `(d/ds, d/du)`.
    pub fn shoot_sensitivities(
        &self,
        s: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (nx, nu) = (self.nx(), self.nu());
        let value = self.shoot(s, u)?;
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        for j in 0..nx {
            let h = plant::fd_step(s[j]);
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[j] += h;
            sm[j] -= h;
            a.set_column(j, &((self.shoot(&sp, u)? - self.shoot(&sm, u)?) / (2.0 * h)));
        }
        for j in 0..nu {
            let h = plant::fd_step(u[j]);
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            b.set_column(j, &((self.shoot(s, &up)? - self.shoot(s, &um)?) / (2.0 * h)));
        }
        Ok((value, a, b))
    }

    /// Gauss-Newton Hessian of the cost: `blockdiag(2 T_d Q, .., 2 P, 2 T_d R, ..)`.
    pub fn cost_hessian(&self) -> DMatrix<f64> {
        let (nx, nu, n) = (self.nx(), self.nu(), self.n_intervals);
        let dt = self.dt();
        let mut h = DMatrix::zeros(self.n_primal(), self.n_primal());
        for i in 0..n {
            h.view_mut((i * nx, i * nx), (nx, nx)).copy_from(&(&self.q * (2.0 * dt)));
            let o = self.u_offset() + i * nu;
            h.view_mut((o, o), (nu, nu)).copy_from(&(&self.r * (2.0 * dt)));
        }
        h.view_mut((n * nx, n * nx), (nx, nx)).copy_from(&(&self.p * 2.0));
        h
    }

    /// Equality residual `c(w; x)` and its Jacobian with respect to the primal vector.
    pub fn linearize(&self, x: &DVector<f64>, it: &Iterate) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_iterate(it)?;
        if x.len() != self.nx() {
            return Err(Error::Dimension {
                what: "state",
                expected: self.nx(),
                got: x.len(),
            });
        }
        let (nx, nu, n) = (self.nx(), self.nu(), self.n_intervals);
        let mut c = DVector::zeros(self.n_eq());
        let mut jac = DMatrix::zeros(self.n_eq(), self.n_primal());
        c.rows_mut(0, nx).copy_from(&(&it.s[0] - x));
        jac.view_mut((0, 0), (nx, nx)).fill_with_identity();
        for i in 0..n {
            let (next, a, b) = self.shoot_sensitivities(&it.s[i], &it.u[i])?;
            let row = (i + 1) * nx;
            c.rows_mut(row, nx).copy_from(&(next - &it.s[i + 1]));
            jac.view_mut((row, i * nx), (nx, nx)).copy_from(&a);
            jac.view_mut((row, self.u_offset() + i * nu), (nx, nu)).copy_from(&b);
            jac.view_mut((row, (i + 1) * nx), (nx, nx))
                .copy_from(&(-DMatrix::<f64>::identity(nx, nx)));
        }
        Ok((c, jac))
    }

    fn check_iterate(&self, it: &Iterate) -> Result<()> {
        let n = self.n_intervals;
        let ok = it.s.len() == n + 1
            && it.u.len() == n
            && it.lam.len() == n + 1
            && it.mu_lo.len() == self.n_bounds()
            && it.mu_hi.len() == self.n_bounds()
            && it.s.iter().all(|v| v.len() == self.nx())
            && it.lam.iter().all(|v| v.len() == self.nx())
            && it.u.iter().all(|v| v.len() == self.nu());
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                what: "iterate",
                expected: self.n_z(),
                got: it.len(),
            })
        }
    }
}

/// Primal-dual iterate of the shooting problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub s: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub lam: Vec<DVector<f64>>,
    /// Lower-bound multipliers, stage-major.
    pub mu_lo: DVector<f64>,
    /// Upper-bound multipliers, stage-major.
    pub mu_hi: DVector<f64>,
}

impl Iterate {
    pub fn zeros(spec: &OcpSpec) -> Self {
        let n = spec.n_intervals;
        Iterate {
            s: vec![DVector::zeros(spec.nx()); n + 1],
            u: vec![DVector::zeros(spec.nu()); n],
            lam: vec![DVector::zeros(spec.nx()); n + 1],
            mu_lo: DVector::zeros(spec.n_bounds()),
            mu_hi: DVector::zeros(spec.n_bounds()),
        }
    }

    /// Shooting nodes from simulating `controls` forward from `x`, zero multipliers.
    pub fn forward_rollout(spec: &OcpSpec, x: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Self> {
        if controls.len() != spec.n_intervals {
            return Err(Error::Dimension {
                what: "control sequence",
                expected: spec.n_intervals,
                got: controls.len(),
            });
        }
        let mut it = Iterate::zeros(spec);
        it.s[0] = x.clone();
        for i in 0..spec.n_intervals {
            it.u[i] = controls[i].clone();
            it.s[i + 1] = spec.shoot(&it.s[i], &it.u[i])?;
        }
        Ok(it)
    }

    pub fn len(&self) -> usize {
        let field = |v: &[DVector<f64>]| v.iter().map(|b| b.len()).sum::<usize>();
        field(&self.s) + field(&self.u) + field(&self.lam) + self.mu_lo.len() + self.mu_hi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primal part `(s_0..s_N, u_0..u_{N-1})`.
    pub fn primal(&self) -> DVector<f64> {
        let blocks: Vec<_> = self.s.iter().chain(self.u.iter()).cloned().collect();
        linalg::stack(&blocks)
    }

    pub fn lambda(&self) -> DVector<f64> {
        linalg::stack(&self.lam)
    }

    /// Full vector in the documented layout.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut blocks: Vec<_> = self.s.iter().chain(self.u.iter()).chain(self.lam.iter()).cloned().collect();
        blocks.push(self.mu_lo.clone());
        blocks.push(self.mu_hi.clone());
        linalg::stack(&blocks)
    }

    pub fn from_vector(spec: &OcpSpec, v: &DVector<f64>) -> Result<Self> {
        if v.len() != spec.n_z() {
            return Err(Error::Dimension {
                what: "primal-dual vector",
                expected: spec.n_z(),
                got: v.len(),
            });
        }
        let (nx, nu, n) = (spec.nx(), spec.nu(), spec.n_intervals);
        let mut offset = 0;
        let mut take = |len: usize| {
            let block = v.rows(offset, len).into_owned();
            offset += len;
            block
        };
        let s = (0..=n).map(|_| take(nx)).collect();
        let u = (0..n).map(|_| take(nu)).collect();
        let lam = (0..=n).map(|_| take(nx)).collect();
        let mu_lo = take(spec.n_bounds());
        let mu_hi = take(spec.n_bounds());
        Ok(Iterate { s, u, lam, mu_lo, mu_hi })
    }

    /// Replaces the primal part from a vector in primal layout.
    pub fn set_primal(&mut self, w: &DVector<f64>) {
        let nx = self.s[0].len();
        let nu = self.u.first().map_or(0, |b| b.len());
        let mut offset = 0;
        for s in self.s.iter_mut() {
            s.copy_from(&w.rows(offset, nx));
            offset += nx;
        }
        for u in self.u.iter_mut() {
            u.copy_from(&w.rows(offset, nu));
            offset += nu;
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Euclidean distance in the full primal-dual space.
    pub fn distance(&self, other: &Iterate) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    /// Euclidean distance over the primal block only.
    pub fn primal_distance(&self, other: &Iterate) -> f64 {
        (self.primal() - other.primal()).norm()
    }
}

/// Optimality residuals of an iterate; every component is nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    /// `|grad_w L|_inf`.
    pub stationarity: f64,
    /// Largest equality residual or bound violation.
    pub primal_feas: f64,
    /// `max |mu_i * slack_i|`.
    pub complementarity: f64,
    /// Largest negative part of a bound multiplier.
    pub dual_feas: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feas)
            .max(self.complementarity)
            .max(self.dual_feas)
    }
}

/// Equality residuals and bound slacks of an iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResidual {
    /// `(s_0 - x, psi_d(s_0,u_0) - s_1, ...)`.
    pub equality: DVector<f64>,
    /// `min(u_i - u_lo, u_hi - u_i)`, stage-major; negative means violated.
    pub bound_slack: DVector<f64>,
}

/// LQR terminal weight from the fixed-point Riccati recursion started at `P = Q`.
pub fn dare_terminal_weight(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    const MAX_ITERATIONS: usize = 100_000;
    const STEP_TOL: f64 = 1e-13;

    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..MAX_ITERATIONS {
        let next = riccati_map(&p, a, b, &at, &bt, q, r)
            .ok_or(Error::RiccatiDiverged { iterations: 0 })?;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        // Change is measured relative to |P| so large weights can still reach the tolerance.
        let change = (&next - &p).amax();
        p = (&next + next.transpose()) * 0.5;
        if !change.is_finite() || p.iter().any(|v| !v.is_finite()) {
            break;
        }
        if change <= STEP_TOL * p.amax().max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::RiccatiDiverged {
        iterations: MAX_ITERATIONS,
    })
}

fn riccati_map(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    at: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let atpb = at * p * b;
    let gain_lhs = r + bt * p * b;
    let k = gain_lhs.lu().solve(&atpb.transpose())?;
    Some(at * p * a - &atpb * k + q)
}

/// Frobenius norm of the DARE residual at `P`.
pub fn dare_residual(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> f64 {
    let mapped = riccati_map(p, a, b, &a.transpose(), &b.transpose(), q, r)
        .expect("R + B'PB must be invertible");
    (mapped - p).norm()
}

/// LQR gain `K = (R + B'PB)^{-1} B'PA`, so that `u = -K x`.
pub fn lqr_gain(p: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let bt = b.transpose();
    (r + &bt * p * b).lu().solve(&(&bt * p * a))
}

/// Exact zero-order-hold discretization through the augmented exponential
/// `exp([[A_c, B_c], [0, 0]] T_d) = [[A, B], [0, I]]`.
pub fn discretize_linearization(
    ac: &DMatrix<f64>,
    bc: &DMatrix<f64>,
    td: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(td > 0.0) {
        return Err(Error::InvalidArgument(format!("discretization interval must be positive, got {td}")));
    }
    let (nx, nu) = (ac.nrows(), bc.ncols());
    let mut aug = DMatrix::zeros(nx + nu, nx + nu);
    aug.view_mut((0, 0), (nx, nx)).copy_from(&(ac * td));
    aug.view_mut((0, nx), (nx, nu)).copy_from(&(bc * td));
    let e = expm(&aug);
    Ok((
        e.view((0, 0), (nx, nx)).into_owned(),
        e.view((0, nx), (nx, nu)).into_owned(),
    ))
}

/// `T_d * sum (s_i'Q s_i + u_i'R u_i) + s_N' P s_N`.
pub fn eval_objective(spec: &OcpSpec, it: &Iterate) -> f64 {
    let dt = spec.dt();
    let stage: f64 = (0..spec.n_intervals)
        .map(|i| {
            let s = &it.s[i];
            let u = &it.u[i];
            (s.transpose() * &spec.q * s)[(0, 0)] + (u.transpose() * &spec.r * u)[(0, 0)]
        })
        .sum();
    let s_n = &it.s[spec.n_intervals];
    dt * stage + (s_n.transpose() * &spec.p * s_n)[(0, 0)]
}

/// Gradient of [`eval_objective`] in primal layout.
pub fn objective_gradient(spec: &OcpSpec, it: &Iterate) -> DVector<f64> {
    spec.cost_hessian() * it.primal()
}

pub fn eval_constraints(spec: &OcpSpec, x: &DVector<f64>, it: &Iterate) -> Result<ConstraintResidual> {
    spec.check_iterate(it)?;
    let nx = spec.nx();
    let mut equality = DVector::zeros(spec.n_eq());
    equality.rows_mut(0, nx).copy_from(&(&it.s[0] - x));
    for i in 0..spec.n_intervals {
        let next = spec.shoot(&it.s[i], &it.u[i])?;
        equality.rows_mut((i + 1) * nx, nx).copy_from(&(next - &it.s[i + 1]));
    }
    Ok(ConstraintResidual {
        equality,
        bound_slack: bound_slack(spec, it),
    })
}

fn bound_slack(spec: &OcpSpec, it: &Iterate) -> DVector<f64> {
    let nu = spec.nu();
    DVector::from_fn(spec.n_bounds(), |k, _| {
        let (i, j) = (k / nu, k % nu);
        let u = it.u[i][j];
        (u - spec.u_lo[j]).min(spec.u_hi[j] - u)
    })
}

/// First-order optimality residuals with the Gauss-Newton-exact cost gradient
/// and finite-difference constraint Jacobians.
pub fn kkt_residual(spec: &OcpSpec, x: &DVector<f64>, it: &Iterate) -> Result<KktResidual> {
    let (c, jac) = spec.linearize(x, it)?;
    let mut grad = objective_gradient(spec, it) + jac.transpose() * it.lambda();
    let nu = spec.nu();
    let offset = spec.u_offset();
    let mut complementarity: f64 = 0.0;
    let mut bound_violation: f64 = 0.0;
    let mut dual_feas: f64 = 0.0;
    for k in 0..spec.n_bounds() {
        let (i, j) = (k / nu, k % nu);
        let u = it.u[i][j];
        let (lo, hi) = (u - spec.u_lo[j], spec.u_hi[j] - u);
        grad[offset + k] += it.mu_hi[k] - it.mu_lo[k];
        complementarity = complementarity.max((it.mu_lo[k] * lo).abs()).max((it.mu_hi[k] * hi).abs());
        bound_violation = bound_violation.max(-lo).max(-hi);
        dual_feas = dual_feas.max(-it.mu_lo[k]).max(-it.mu_hi[k]);
    }
    Ok(KktResidual {
        stationarity: grad.amax(),
        primal_feas: c.amax().max(bound_violation),
        complementarity,
        dual_feas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_iterate(spec: &OcpSpec, rng: &mut ChaCha8Rng) -> Iterate {
        let v = DVector::from_fn(spec.n_z(), |_, _| rng.random_range(-1.0..1.0));
        Iterate::from_vector(spec, &v).unwrap()
    }

    #[test]
    fn dare_zero_dynamics_returns_q() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -3.0]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = DMatrix::identity(1, 1);
        let p = dare_terminal_weight(&a, &b, &q, &r).unwrap();
        assert_relative_eq!(p, q, epsilon = 1e-15);
    }

    #[test]
    fn dare_scalar_closed_form() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::zeros(1, 1);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let p = dare_terminal_weight(&a, &b, &q, &r).unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        // 1000-step recursion oracle
        let mut oracle = 1.0;
        for _ in 0..1000 {
            oracle = 0.25 * oracle + 1.0;
        }
        assert_relative_eq!(p[(0, 0)], oracle, epsilon = 1e-12);
    }

    #[test]
    fn dare_unstabilizable_diverges() {
        let a = DMatrix::from_element(1, 1, 1.5);
        let b = DMatrix::zeros(1, 1);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            dare_terminal_weight(&a, &b, &q, &r),
            Err(Error::RiccatiDiverged { .. })
        ));
    }

    #[test]
    fn dare_chen_residual() {
        let (a, b) = discretize_linearization(
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            &DMatrix::from_column_slice(2, 1, &[0.5, 0.5]),
            0.06,
        )
        .unwrap();
        let q = DMatrix::identity(2, 2) * 0.1;
        let r = DMatrix::identity(1, 1) * 0.1;
        let p = dare_terminal_weight(&a, &b, &q, &r).unwrap();
        assert!(dare_residual(&p, &a, &b, &q, &r) <= 1e-10);
        assert_relative_eq!(p.clone(), p.transpose(), epsilon = 1e-12);

        // local control Lyapunov function under the LQR law
        let k = lqr_gain(&p, &a, &b, &r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let u = -&k * &x;
            let next = &a * &x + &b * &u;
            let lhs = (next.transpose() * &p * &next)[(0, 0)] - (x.transpose() * &p * &x)[(0, 0)];
            assert!(lhs <= -(x.transpose() * &q * &x)[(0, 0)] + 1e-10);
        }
    }

    #[test]
    fn discretization_closed_forms() {
        let bc = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let (a, b) = discretize_linearization(&DMatrix::zeros(2, 2), &bc, 0.3).unwrap();
        assert_relative_eq!(a, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_relative_eq!(b, &bc * 0.3, epsilon = 1e-15);

        let (a, b) = discretize_linearization(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(a[(0, 0)], e, epsilon = 1e-13);
        assert_relative_eq!(b[(0, 0)], e - 1.0, epsilon = 1e-13);

        let td = 0.06;
        let (a, _) = discretize_linearization(
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            &DMatrix::zeros(2, 1),
            td,
        )
        .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[td.cosh(), td.sinh(), td.sinh(), td.cosh()]);
        assert_relative_eq!(a, expected, epsilon = 1e-14);
        assert!(discretize_linearization(&DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1), 0.0).is_err());
    }

    fn unit_spec() -> OcpSpec {
        let plant = PlantModel::new(crate::plant::LinearPlant {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        })
        .unwrap();
        OcpSpec::with_terminal_weight(
            plant,
            1,
            1.0,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DVector::from_element(1, -5.0),
            DVector::from_element(1, 5.0),
            4,
        )
        .unwrap()
    }

    #[test]
    fn objective_by_hand() {
        let spec = unit_spec();
        let mut it = Iterate::zeros(&spec);
        assert_eq!(eval_objective(&spec, &it), 0.0);
        it.s[0] = DVector::from_vec(vec![1.0, 0.0]);
        it.u[0] = DVector::from_vec(vec![2.0]);
        it.s[1] = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(eval_objective(&spec, &it), 6.0);
    }

    #[test]
    fn objective_matches_loop_oracle_and_scales_quadratically() {
        let spec = OcpSpec::chen_default(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let it = random_iterate(&spec, &mut rng);
            // naive element loop
            let mut oracle = 0.0;
            for i in 0..spec.n_intervals {
                for a in 0..2 {
                    for b in 0..2 {
                        oracle += spec.dt() * it.s[i][a] * spec.q[(a, b)] * it.s[i][b];
                    }
                }
                oracle += spec.dt() * it.u[i][0] * spec.r[(0, 0)] * it.u[i][0];
            }
            for a in 0..2 {
                for b in 0..2 {
                    oracle += it.s[5][a] * spec.p[(a, b)] * it.s[5][b];
                }
            }
            let value = eval_objective(&spec, &it);
            assert_relative_eq!(value, oracle, epsilon = 1e-12, max_relative = 1e-12);

            let alpha = 3.0;
            let scaled = Iterate::from_vector(&spec, &(it.to_vector() * alpha)).unwrap();
            assert_relative_eq!(eval_objective(&spec, &scaled), alpha * alpha * value, max_relative = 1e-14);
        }
    }

    #[test]
    fn constraint_residuals() {
        let spec = OcpSpec::chen_default(0.5);
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let controls: Vec<_> = (0..5).map(|i| DVector::from_element(1, 0.1 * i as f64)).collect();
        let it = Iterate::forward_rollout(&spec, &x, &controls).unwrap();
        let res = eval_constraints(&spec, &x, &it).unwrap();
        assert!(res.equality.amax() <= 1e-12);
        assert_relative_eq!(res.bound_slack[4], 1.6, epsilon = 1e-15);

        let zero = Iterate::zeros(&spec);
        let res = eval_constraints(&spec, &DVector::from_vec(vec![1.0, 1.0]), &zero).unwrap();
        assert_eq!(res.equality.rows(0, 2).as_slice(), &[-1.0, -1.0]);

        // random iterate against direct recomputation with the plant integrator
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let it = random_iterate(&spec, &mut rng);
        let res = eval_constraints(&spec, &x, &it).unwrap();
        for i in 0..5 {
            let sim = crate::plant::simulate_zoh(&spec.plant, &it.s[i], &it.u[i], spec.dt(), spec.rk4_substeps)
                .unwrap();
            let expected = sim.final_state() - &it.s[i + 1];
            assert_relative_eq!(res.equality.rows((i + 1) * 2, 2).into_owned(), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn kkt_at_origin_is_zero() {
        let spec = OcpSpec::chen_default(0.5);
        let res = kkt_residual(&spec, &DVector::zeros(2), &Iterate::zeros(&spec)).unwrap();
        assert_eq!(res.max(), 0.0);
    }

    #[test]
    fn vector_layout_round_trip() {
        let spec = OcpSpec::chen_default(0.5);
        let v = DVector::from_fn(spec.n_z(), |i, _| i as f64);
        let it = Iterate::from_vector(&spec, &v).unwrap();
        assert_eq!(it.s[0].as_slice(), &[0.0, 1.0]);
        assert_eq!(it.u[0][0], 12.0);
        assert_eq!(it.lam[0].as_slice(), &[17.0, 18.0]);
        assert_eq!(it.mu_lo[0], 29.0);
        assert_eq!(it.mu_hi[0], 34.0);
        assert_eq!(it.to_vector(), v);
        assert_eq!(spec.n_z(), 39);
    }

    #[test]
    fn invalid_specs_rejected() {
        let plant = PlantModel::chen(0.5);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let i1 = DMatrix::<f64>::identity(1, 1);
        let lo = DVector::from_element(1, -2.0);
        let hi = DVector::from_element(1, 2.0);
        assert!(OcpSpec::new(plant.clone(), 0, 0.3, i2.clone(), i1.clone(), lo.clone(), hi.clone(), 10).is_err());
        assert!(OcpSpec::new(plant.clone(), 5, 0.3, -&i2, i1.clone(), lo.clone(), hi.clone(), 10).is_err());
        assert!(OcpSpec::new(plant.clone(), 5, 0.3, i2.clone(), i1.clone(), hi.clone(), lo.clone(), 10).is_err());
        assert!(OcpSpec::new(plant, 5, 0.3, i2, i1, lo, hi, 10).is_ok());
    }
}
