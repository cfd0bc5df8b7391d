//! Small dense linear programs `max c'x s.t. A x <= b, x >= 0` by the
//! two-phase tableau simplex method with Bland's rule.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

const TOL: f64 = 1e-11;

struct Tableau {
    t: DMatrix<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn rhs(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[(row, col)];
        self.t.row_mut(row).scale_mut(1.0 / p);
        let pivot_row = self.t.row(row).into_owned();
        for i in 0..self.t.nrows() {
            if i != row {
                let f = self.t[(i, col)];
                if f != 0.0 {
                    for j in 0..self.t.ncols() {
                        self.t[(i, j)] -= f * pivot_row[j];
                    }
                }
            }
        }
        self.basis[row] = col;
    }

    /// Maximizes `cost' x` over the columns allowed by `allowed`. Returns false when unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: &dyn Fn(usize) -> bool) -> bool {
        let m = self.t.nrows();
        let rhs = self.rhs();
        loop {
            let entering = (0..rhs).filter(|&j| allowed(j)).find(|&j| {
                let reduced = cost[j] - (0..m).map(|i| cost[self.basis[i]] * self.t[(i, j)]).sum::<f64>();
                reduced > TOL
            });
            let Some(col) = entering else { return true };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.t[(i, col)];
                if a > TOL {
                    let ratio = self.t[(i, rhs)] / a;
                    let better = match leave {
                        None => true,
                        Some((best, r)) => ratio < r - TOL || (ratio <= r + TOL && self.basis[i] < self.basis[best]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, col),
                None => return false,
            }
        }
    }
}

pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    let (m, n) = (a.nrows(), a.ncols());
    assert_eq!(c.len(), n);
    assert_eq!(b.len(), m);
    let negative: Vec<usize> = (0..m).filter(|&i| b[i] < 0.0).collect();
    let k = negative.len();
    let cols = n + m + k;
    let mut t = DMatrix::zeros(m, cols + 1);
    let mut basis = vec![0; m];
    let mut art = 0;
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = sign * a[(i, j)];
        }
        t[(i, n + i)] = sign;
        t[(i, cols)] = sign * b[i];
        if b[i] < 0.0 {
            t[(i, n + m + art)] = 1.0;
            basis[i] = n + m + art;
            art += 1;
        } else {
            basis[i] = n + i;
        }
    }
    let mut tab = Tableau { t, basis };

    if k > 0 {
        let mut phase1 = vec![0.0; cols];
        for c in phase1.iter_mut().skip(n + m) {
            *c = -1.0;
        }
        tab.optimize(&phase1, &|_| true);
        let infeasibility: f64 = (0..m)
            .filter(|&i| tab.basis[i] >= n + m)
            .map(|i| tab.t[(i, cols)])
            .sum();
        if infeasibility > 1e-9 * (1.0 + b.amax()) {
            return LpOutcome::Infeasible;
        }
        // pivot remaining zero-level artificials out where possible
        for i in 0..m {
            if tab.basis[i] >= n + m {
                if let Some(j) = (0..n + m).find(|&j| tab.t[(i, j)].abs() > TOL) {
                    tab.pivot(i, j);
                }
            }
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..n].copy_from_slice(c.as_slice());
    if !tab.optimize(&cost, &|j| j < n + m) {
        return LpOutcome::Unbounded;
    }
    let mut x = DVector::zeros(n);
    for i in 0..m {
        if tab.basis[i] < n {
            x[tab.basis[i]] = tab.t[(i, cols)];
        }
    }
    let value = c.dot(&x);
    LpOutcome::Optimal { x, value }
}
