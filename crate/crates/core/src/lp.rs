//! Dense two-phase simplex for the small wrench-space programs.
//!
//! Problems have a handful of rows and at most a few hundred columns, so a
//! full tableau with Bland's anti-cycling rule is plenty.

/// Constraint sense.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Eq,
    Ge,
}

/// `minimize cᵀx  s.t.  rows,  x >= 0`.
#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub rows: Vec<(Vec<f64>, Cmp, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn is_feasible(&self) -> bool {
        !matches!(self, LpOutcome::Infeasible)
    }
}

const EPS: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 50_000;

impl LinearProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            cost: vec![0.0; num_vars],
            rows: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, cmp: Cmp, rhs: f64) {
        debug_assert_eq!(coeffs.len(), self.num_vars());
        self.rows.push((coeffs, cmp, rhs));
    }

    pub fn solve(&self) -> LpOutcome {
        Tableau::build(self).run(&self.cost)
    }
}

struct Tableau {
    /// `m × (cols + 1)`, last column is the right-hand side.
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n_orig: usize,
    n_struct: usize,
    cols: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let m = lp.rows.len();
        let n_slack = lp.rows.iter().filter(|r| r.1 != Cmp::Eq).count();
        let n_struct = n + n_slack;
        let cols = n_struct + m;
        let mut a = vec![vec![0.0; cols + 1]; m];
        let mut slack = n;
        for (i, (coeffs, cmp, rhs)) in lp.rows.iter().enumerate() {
            a[i][..n].copy_from_slice(coeffs);
            match cmp {
                Cmp::Le => {
                    a[i][slack] = 1.0;
                    slack += 1;
                }
                Cmp::Ge => {
                    a[i][slack] = -1.0;
                    slack += 1;
                }
                Cmp::Eq => {}
            }
            a[i][cols] = *rhs;
            if *rhs < 0.0 {
                for v in a[i].iter_mut() {
                    *v = -*v;
                }
            }
            a[i][n_struct + i] = 1.0;
        }
        Self {
            a,
            basis: (0..m).map(|i| n_struct + i).collect(),
            n_orig: n,
            n_struct,
            cols,
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.a[row][col];
        for v in self.a[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.a[row].clone();
        for (i, r) in self.a.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f.abs() > 0.0 {
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Minimizes `cost · x` over columns `< allowed`; returns false if unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> bool {
        for _ in 0..MAX_PIVOTS {
            // reduced costs, Bland's rule: first improving column
            let mut entering = None;
            for j in 0..allowed {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut rc = cost[j];
                for (i, &b) in self.basis.iter().enumerate() {
                    rc -= cost[b] * self.a[i][j];
                }
                if rc < -EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.a.len() {
                let v = self.a[i][col];
                if v > EPS {
                    let ratio = self.a[i][self.cols] / v;
                    match leave {
                        Some((li, lr)) if ratio > lr + EPS || (ratio > lr - EPS && self.basis[i] > self.basis[li]) => {}
                        _ => leave = Some((i, ratio)),
                    }
                }
            }
            let Some((row, _)) = leave else {
                return false;
            };
            self.pivot(row, col);
        }
        true
    }

    fn run(mut self, cost: &[f64]) -> LpOutcome {
        let m = self.a.len();
        // phase 1: minimize the sum of artificials
        let mut phase1 = vec![0.0; self.cols];
        for c in phase1.iter_mut().skip(self.n_struct) {
            *c = 1.0;
        }
        self.optimize(&phase1, self.cols);
        let infeas: f64 = (0..m)
            .filter(|&i| self.basis[i] >= self.n_struct)
            .map(|i| self.a[i][self.cols])
            .sum();
        if infeas > FEAS_TOL {
            return LpOutcome::Infeasible;
        }
        // drive remaining (zero-level) artificials out of the basis
        for i in 0..m {
            if self.basis[i] >= self.n_struct {
                if let Some(j) = (0..self.n_struct).find(|&j| self.a[i][j].abs() > 1e-9) {
                    self.pivot(i, j);
                }
            }
        }
        let mut full_cost = vec![0.0; self.cols];
        full_cost[..self.n_orig].copy_from_slice(cost);
        // redundant rows keep their artificial at zero; forbid re-entry
        for i in 0..m {
            if self.basis[i] >= self.n_struct {
                full_cost[self.basis[i]] = 0.0;
            }
        }
        if !self.optimize(&full_cost, self.n_struct) {
            return LpOutcome::Unbounded;
        }
        let mut x = vec![0.0; self.n_orig];
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.n_orig {
                x[b] = self.a[i][self.cols].max(0.0);
            }
        }
        let value = x.iter().zip(cost).map(|(a, b)| a * b).sum();
        LpOutcome::Optimal { x, value }
    }
}
