//! Dense convex QP with equality constraints and variable bounds:
//!
//! ```text
//! min 1/2 d'Hd + g'd   s.t.  A d = b,  lb <= d <= ub
//! ```
//!
//! Solved by a primal active-set method over bound constraints. Stationarity
//! of a solution reads `H d + g + A' nu - mu_lo + mu_hi = 0`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// May contain `-inf`.
    pub lb: DVector<f64>,
    /// May contain `+inf`.
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActiveBound {
    pub index: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    /// Sorted by index.
    pub active_set: Vec<ActiveBound>,
    pub status: QpStatus,
    /// Working-set additions and removals in phase 2.
    pub changes: usize,
}

impl DenseQp {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self> {
        let n = g.len();
        let dims = [
            ("H rows", n, h.nrows()),
            ("H cols", n, h.ncols()),
            ("A cols", n, a_eq.ncols()),
            ("b", a_eq.nrows(), b_eq.len()),
            ("lb", n, lb.len()),
            ("ub", n, ub.len()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        if !crate::linalg::is_symmetric(&h, 1e-10) {
            return Err(Error::InvalidArgument("QP Hessian is not symmetric".into()));
        }
        if lb.iter().zip(ub.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("QP bounds need lb <= ub".into()));
        }
        Ok(DenseQp { h, g, a_eq, b_eq, lb, ub })
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.b_eq.len()
    }

    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.h * d)) + self.g.dot(d)
    }

    /// Largest violation among stationarity, feasibility, dual sign and complementarity.
    pub fn kkt_error(&self, sol: &QpSolution) -> f64 {
        let d = &sol.primal;
        let stat = &self.h * d + &self.g + self.a_eq.transpose() * &sol.eq_duals - &sol.lower_duals
            + &sol.upper_duals;
        let mut err = stat.amax();
        if self.m() > 0 {
            err = err.max((&self.a_eq * d - &self.b_eq).amax());
        }
        for i in 0..self.n() {
            let (lo, hi) = (d[i] - self.lb[i], self.ub[i] - d[i]);
            err = err.max(-lo).max(-hi);
            err = err.max(-sol.lower_duals[i]).max(-sol.upper_duals[i]);
            if sol.lower_duals[i] != 0.0 {
                err = err.max((sol.lower_duals[i] * lo).abs());
            }
            if sol.upper_duals[i] != 0.0 {
                err = err.max((sol.upper_duals[i] * hi).abs());
            }
        }
        err
    }

    fn bound(&self, i: usize, side: Side) -> f64 {
        match side {
            Side::Lower => self.lb[i],
            Side::Upper => self.ub[i],
        }
    }
}

type WorkingSet = Vec<Option<Side>>;

/// Solves `qp`, optionally warm-started from a previous active set.
///
/// The equality-constrained subproblem for the warm working set is tried
/// first; if its solution respects all bounds, phase 2 starts there, so
/// re-solving an unchanged problem makes no working-set changes. Otherwise an
/// elastic phase 1 finds a feasible point.
pub fn solve_qp(qp: &DenseQp, warm_active_set: Option<&[ActiveBound]>) -> QpSolution {
    let n = qp.n();
    let mut ws: WorkingSet = vec![None; n];
    for ab in warm_active_set.unwrap_or(&[]) {
        if ab.index < n && qp.bound(ab.index, ab.side).is_finite() {
            ws[ab.index] = Some(ab.side);
        }
    }
    for i in 0..n {
        if qp.lb[i] == qp.ub[i] && ws[i].is_none() {
            ws[i] = Some(Side::Lower);
        }
    }

    let (target, _) = eqp(qp, &ws);
    let feas_tol = 1e-12 * (1.0 + target.amax());
    let warm_ok = (0..n).all(|i| ws[i].is_some() || (target[i] >= qp.lb[i] - feas_tol && target[i] <= qp.ub[i] + feas_tol))
        && (qp.m() == 0 || (&qp.a_eq * &target - &qp.b_eq).amax() <= 1e-9 * (1.0 + qp.b_eq.amax()));

    let start = if warm_ok {
        Some((clamp(qp, &target), ws))
    } else {
        phase_one(qp)
    };
    let Some((d0, ws0)) = start else {
        return QpSolution {
            primal: DVector::zeros(n),
            eq_duals: DVector::zeros(qp.m()),
            lower_duals: DVector::zeros(n),
            upper_duals: DVector::zeros(n),
            active_set: Vec::new(),
            status: QpStatus::Infeasible,
            changes: 0,
        };
    };
    let core = phase_two(qp, d0, ws0);
    let (lower_duals, upper_duals) = bound_duals(qp, &core.d, &core.nu, &core.ws);
    QpSolution {
        primal: core.d,
        eq_duals: core.nu,
        lower_duals,
        upper_duals,
        active_set: core
            .ws
            .iter()
            .enumerate()
            .filter_map(|(index, s)| s.map(|side| ActiveBound { index, side }))
            .collect(),
        status: core.status,
        changes: core.changes,
    }
}

struct Core {
    d: DVector<f64>,
    nu: DVector<f64>,
    ws: WorkingSet,
    status: QpStatus,
    changes: usize,
}

fn clamp(qp: &DenseQp, d: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(d.len(), |i, _| d[i].max(qp.lb[i]).min(qp.ub[i]))
}

/// Primal active-set iterations from a feasible point `d` with working set `ws`.
fn phase_two(qp: &DenseQp, mut d: DVector<f64>, mut ws: WorkingSet) -> Core {
    let n = qp.n();
    for (i, s) in ws.iter().enumerate() {
        if let Some(side) = s {
            d[i] = qp.bound(i, *side);
        }
    }
    let dual_scale = 1.0 + qp.h.amax() + qp.g.amax();
    let max_iter = 50 * n.max(1);
    let mut changes = 0;
    for _ in 0..max_iter {
        let (target, nu) = eqp(qp, &ws);
        let p = &target - &d;
        if p.amax() <= 1e-13 * (1.0 + d.amax()) {
            d = target;
            let (lo, hi) = bound_duals(qp, &d, &nu, &ws);
            let dual_tol = 1e-12 * dual_scale * (1.0 + d.amax());
            let mut drop: Option<(usize, f64)> = None;
            for i in 0..n {
                let value = match ws[i] {
                    Some(Side::Lower) => lo[i],
                    Some(Side::Upper) => hi[i],
                    None => continue,
                };
                if qp.lb[i] == qp.ub[i] {
                    continue;
                }
                if value < -dual_tol && drop.is_none_or(|(_, best)| value < best) {
                    drop = Some((i, value));
                }
            }
            match drop {
                None => {
                    return Core { d, nu, ws, status: QpStatus::Solved, changes };
                }
                Some((i, _)) => {
                    ws[i] = None;
                    changes += 1;
                }
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..n {
            if ws[i].is_some() {
                continue;
            }
            let candidate = if p[i] < 0.0 && qp.lb[i].is_finite() {
                Some(((qp.lb[i] - d[i]) / p[i], Side::Lower))
            } else if p[i] > 0.0 && qp.ub[i].is_finite() {
                Some(((qp.ub[i] - d[i]) / p[i], Side::Upper))
            } else {
                None
            };
            if let Some((a, side)) = candidate {
                let a = a.max(0.0);
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, side));
                }
            }
        }
        match blocking {
            Some((i, side)) => {
                d += p * alpha;
                d[i] = qp.bound(i, side);
                ws[i] = Some(side);
                changes += 1;
            }
            None => d = target,
        }
    }
    let (_, nu) = eqp(qp, &ws);
    Core { d, nu, ws, status: QpStatus::MaxIter, changes }
}

/// Elastic phase 1: `min 1/2 |t|^2 + eps/2 |d|^2  s.t.  A d + t = b`, bounds on `d`,
/// followed by a least-norm correction of the free variables.
fn phase_one(qp: &DenseQp) -> Option<(DVector<f64>, WorkingSet)> {
    const EPS: f64 = 1e-8;
    let (n, m) = (qp.n(), qp.m());
    let mut h = DMatrix::zeros(n + m, n + m);
    for i in 0..n {
        h[(i, i)] = EPS;
    }
    for i in 0..m {
        h[(n + i, n + i)] = 1.0;
    }
    let mut a = DMatrix::zeros(m, n + m);
    a.view_mut((0, 0), (m, n)).copy_from(&qp.a_eq);
    a.view_mut((0, n), (m, m)).fill_with_identity();
    let mut lb = DVector::from_element(n + m, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n + m, f64::INFINITY);
    lb.rows_mut(0, n).copy_from(&qp.lb);
    ub.rows_mut(0, n).copy_from(&qp.ub);
    let elastic = DenseQp {
        h,
        g: DVector::zeros(n + m),
        a_eq: a,
        b_eq: qp.b_eq.clone(),
        lb,
        ub,
    };

    let d0 = clamp(qp, &DVector::zeros(n));
    let mut y0 = DVector::zeros(n + m);
    y0.rows_mut(0, n).copy_from(&d0);
    y0.rows_mut(n, m).copy_from(&(&qp.b_eq - &qp.a_eq * &d0));
    let mut ws0: WorkingSet = vec![None; n + m];
    for i in 0..n {
        if d0[i] == qp.lb[i] && qp.lb[i] != 0.0 || qp.lb[i] == qp.ub[i] {
            ws0[i] = Some(Side::Lower);
        } else if d0[i] == qp.ub[i] && qp.ub[i] != 0.0 {
            ws0[i] = Some(Side::Upper);
        }
    }
    let core = phase_two(&elastic, y0, ws0);
    let mut d = core.d.rows(0, n).into_owned();
    let ws: WorkingSet = core.ws[..n].to_vec();

    let free: Vec<usize> = (0..n).filter(|&i| ws[i].is_none()).collect();
    let residual = &qp.b_eq - &qp.a_eq * &d;
    if m > 0 && !free.is_empty() {
        let a_free = DMatrix::from_fn(m, free.len(), |r, c| qp.a_eq[(r, free[c])]);
        let svd = a_free.svd(true, true);
        let tol = 1e-12 * svd.singular_values.amax().max(1.0);
        let delta = svd.solve(&residual, tol).ok()?;
        for (c, &i) in free.iter().enumerate() {
            d[i] += delta[c];
        }
    }
    let tol = 1e-9 * (1.0 + qp.b_eq.amax() + qp.a_eq.amax() * d.amax());
    let eq_ok = m == 0 || (&qp.a_eq * &d - &qp.b_eq).amax() <= tol;
    let bounds_ok = (0..n).all(|i| d[i] >= qp.lb[i] - tol && d[i] <= qp.ub[i] + tol);
    if core.status == QpStatus::Solved && eq_ok && bounds_ok {
        Some((clamp(qp, &d), ws))
    } else {
        None
    }
}

/// Solution of the equality-constrained QP with working-set variables fixed at their bounds.
fn eqp(qp: &DenseQp, ws: &[Option<Side>]) -> (DVector<f64>, DVector<f64>) {
    let (n, m) = (qp.n(), qp.m());
    let mut d = DVector::zeros(n);
    for (i, s) in ws.iter().enumerate() {
        if let Some(side) = s {
            d[i] = qp.bound(i, *side);
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| ws[i].is_none()).collect();
    let nf = free.len();
    let hd = &qp.h * &d;
    let ad = &qp.a_eq * &d;
    let dim = nf + m;
    let mut k = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = qp.h[(i, j)];
        }
        for r in 0..m {
            k[(a, nf + r)] = qp.a_eq[(r, i)];
            k[(nf + r, a)] = qp.a_eq[(r, i)];
        }
        rhs[a] = -qp.g[i] - hd[i];
    }
    for r in 0..m {
        rhs[nf + r] = qp.b_eq[r] - ad[r];
    }
    let sol = solve_kkt(&k, &rhs);
    for (a, &i) in free.iter().enumerate() {
        d[i] = sol[a];
    }
    (d, sol.rows(nf, m).into_owned())
}

/// LU solve, falling back to a least-squares SVD solve when the system is
/// singular or the LU result does not reproduce the right-hand side.
fn solve_kkt(k: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if rhs.is_empty() {
        return DVector::zeros(0);
    }
    let scale = 1.0 + k.amax() + rhs.amax();
    if let Some(x) = k.clone().lu().solve(rhs) {
        let ok = x.iter().all(|v| v.is_finite())
            && (k * &x - rhs).amax() <= 1e-11 * scale * (1.0 + x.amax())
            && x.amax() <= 1e12 * scale;
        if ok {
            return x;
        }
    }
    let svd = k.clone().svd(true, true);
    let tol = 1e-13 * svd.singular_values.amax().max(f64::MIN_POSITIVE);
    svd.solve(rhs, tol).expect("U and V were computed")
}

fn bound_duals(qp: &DenseQp, d: &DVector<f64>, nu: &DVector<f64>, ws: &[Option<Side>]) -> (DVector<f64>, DVector<f64>) {
    let n = qp.n();
    let r = &qp.h * d + &qp.g + qp.a_eq.transpose() * nu;
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        match ws[i] {
            Some(Side::Lower) => lo[i] = r[i],
            Some(Side::Upper) => hi[i] = -r[i],
            None => {}
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_qp(h: f64, g: f64, lb: f64, ub: f64) -> DenseQp {
        DenseQp::new(
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, g),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::from_element(1, lb),
            DVector::from_element(1, ub),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_scalar() {
        let sol = solve_qp(&scalar_qp(1.0, -1.0, f64::NEG_INFINITY, f64::INFINITY), None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.primal[0], 1.0, epsilon = 1e-15);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn upper_bound_active() {
        let qp = scalar_qp(1.0, -5.0, f64::NEG_INFINITY, 2.0);
        let sol = solve_qp(&qp, None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.primal[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(sol.upper_duals[0], 3.0, epsilon = 1e-14);
        assert_eq!(sol.active_set, vec![ActiveBound { index: 0, side: Side::Upper }]);
    }

    fn random_qp(rng: &mut ChaCha8Rng) -> DenseQp {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..n);
        let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        let n_bounded = rng.random_range(0..=n.min(4));
        for i in 0..n_bounded {
            let c: f64 = rng.random_range(-0.5..0.5);
            lb[i] = c - rng.random_range(0.1..1.0);
            ub[i] = c + rng.random_range(0.1..1.0);
        }
        // a point inside the box keeps the equalities consistent with the bounds
        let inside = DVector::from_fn(n, |i, _| if lb[i].is_finite() { 0.5 * (lb[i] + ub[i]) } else { rng.random_range(-1.0..1.0) });
        let b = &a * inside;
        DenseQp::new(h, g, a, b, lb, ub).unwrap()
    }

    /// Enumerates every free/lower/upper pattern and keeps the feasible KKT
    /// point with the least objective.
    fn brute_force(qp: &DenseQp) -> Option<DVector<f64>> {
        let n = qp.n();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut ws = vec![None; n];
            let mut c = code;
            let mut skip = false;
            for slot in ws.iter_mut().take(n) {
                *slot = match c % 3 {
                    0 => None,
                    1 => Some(Side::Lower),
                    _ => Some(Side::Upper),
                };
                c /= 3;
            }
            for (i, s) in ws.iter().enumerate() {
                if let Some(side) = s {
                    skip |= !qp.bound(i, *side).is_finite();
                }
            }
            if skip {
                continue;
            }
            let (d, nu) = eqp(qp, &ws);
            if qp.m() > 0 && (&qp.a_eq * &d - &qp.b_eq).amax() > 1e-9 {
                continue;
            }
            if (0..n).any(|i| d[i] < qp.lb[i] - 1e-10 || d[i] > qp.ub[i] + 1e-10) {
                continue;
            }
            let (lo, hi) = bound_duals(qp, &d, &nu, &ws);
            if lo.iter().chain(hi.iter()).any(|&v| v < -1e-10) {
                continue;
            }
            let obj = qp.objective(&d);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, d));
            }
        }
        best.map(|(_, d)| d)
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let qp = random_qp(&mut rng);
            let sol = solve_qp(&qp, None);
            assert_eq!(sol.status, QpStatus::Solved);
            assert!(qp.kkt_error(&sol) <= 1e-9, "kkt {}", qp.kkt_error(&sol));
            let oracle = brute_force(&qp).expect("oracle finds the KKT point");
            assert!((&sol.primal - oracle).amax() <= 1e-8);
        }
    }

    #[test]
    fn row_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let qp = random_qp(&mut rng);
            if qp.m() == 0 {
                continue;
            }
            let scales = DVector::from_fn(qp.m(), |_, _| rng.random_range(0.1..10.0));
            let mut scaled = qp.clone();
            for r in 0..qp.m() {
                scaled.a_eq.row_mut(r).scale_mut(scales[r]);
                scaled.b_eq[r] *= scales[r];
            }
            let a = solve_qp(&qp, None);
            let b = solve_qp(&scaled, None);
            assert!((&a.primal - &b.primal).amax() <= 1e-10);
            for r in 0..qp.m() {
                assert_relative_eq!(b.eq_duals[r] * scales[r], a.eq_duals[r], epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn warm_resolve_makes_no_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let qp = random_qp(&mut rng);
            let cold = solve_qp(&qp, None);
            let warm = solve_qp(&qp, Some(&cold.active_set));
            assert_eq!(warm.changes, 0);
            assert_eq!(warm.active_set, cold.active_set);
            assert!((&warm.primal - &cold.primal).amax() <= 1e-12);
        }
    }

    #[test]
    fn beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let qp = random_qp(&mut rng);
            let n = qp.n();
            let sol = solve_qp(&qp, None);
            let best = qp.objective(&sol.primal);
            let base = sol.primal.clone();
            // directions in the null space of A keep the equalities
            let proj = if qp.m() > 0 {
                let pinv = qp.a_eq.clone().pseudo_inverse(1e-12).unwrap();
                DMatrix::identity(n, n) - pinv * &qp.a_eq
            } else {
                DMatrix::identity(n, n)
            };
            for _ in 0..1000 {
                let v = &proj * DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let mut smax: f64 = 2.0;
                for i in 0..n {
                    if v[i] > 1e-14 {
                        smax = smax.min((qp.ub[i] - base[i]) / v[i]);
                    } else if v[i] < -1e-14 {
                        smax = smax.min((qp.lb[i] - base[i]) / v[i]);
                    }
                }
                let s = rng.random_range(0.0..=smax.max(0.0));
                let point = &base + v * s;
                assert!(qp.objective(&point) >= best - 1e-10);
            }
        }
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let qp = DenseQp::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_element(2, f64::INFINITY),
        )
        .unwrap();
        assert_eq!(solve_qp(&qp, None).status, QpStatus::Infeasible);

        let boxed = DenseQp::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![10.0]),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        assert_eq!(solve_qp(&boxed, None).status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(DenseQp::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .is_err());
        assert!(DenseQp::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .is_err());
    }
}
