//! Dense two-phase tableau simplex for small linear programs.
//!
//! Minimizes `c'x` subject to `Ax {<=,=,>=} b` and `x >= 0`. Sized for the
//! master problems of the price update (tens of variables, hundreds of
//! rows), not for large-scale work. Dantzig pricing with a switch to
//! Bland's rule after a degeneracy stall, so cycling terminates.

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

/// One row `coeffs . x  (relation)  rhs`.
#[derive(Clone, Debug)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min objective . x` over `x >= 0` subject to the constraint rows.
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("problem is infeasible (phase-1 residual {residual})")]
    Infeasible { residual: f64 },
    #[error("objective is unbounded below")]
    Unbounded,
    #[error("iteration limit reached after {iterations} pivots")]
    IterationLimit { iterations: usize },
    #[error("constraint row {row} has {found} coefficients, expected {expected}")]
    ShapeMismatch { row: usize, expected: usize, found: usize },
}

const EPS: f64 = 1e-9;

/// Pivots without objective progress tolerated before switching to Bland's
/// rule.
const STALL_LIMIT: usize = 40;

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    obj: Vec<f64>,
    n_struct: usize,
    artificial_start: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.rows[row][col];
        let inv = 1.0 / piv;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        self.rhs[row] *= inv;
        let pivot_row = self.rows[row].clone();
        let pivot_rhs = self.rhs[row];
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let factor = self.rows[r][col];
            if factor.abs() <= f64::MIN_POSITIVE {
                continue;
            }
            for (v, pv) in self.rows[r].iter_mut().zip(&pivot_row) {
                *v -= factor * pv;
            }
            self.rhs[r] -= factor * pivot_rhs;
            if self.rhs[r].abs() < 1e-13 {
                self.rhs[r] = 0.0;
            }
        }
        let factor = self.obj[col];
        if factor.abs() > f64::MIN_POSITIVE {
            for (v, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= factor * pv;
            }
        }
        self.basis[row] = col;
    }

    /// Reduced-cost row for cost vector `c` under the current basis.
    fn reset_objective(&mut self, c: &[f64]) {
        self.obj = c.to_vec();
        for (r, &bi) in self.basis.iter().enumerate() {
            let cb = c[bi];
            if cb.abs() <= f64::MIN_POSITIVE {
                continue;
            }
            let row = self.rows[r].clone();
            for (v, rv) in self.obj.iter_mut().zip(&row) {
                *v -= cb * rv;
            }
        }
    }

    fn objective_value(&self, c: &[f64]) -> f64 {
        self.basis
            .iter()
            .zip(&self.rhs)
            .map(|(&bi, &b)| c[bi] * b)
            .sum()
    }

    /// Runs simplex iterations until optimal. `allow_artificial` permits
    /// artificial columns to enter (phase 1 only).
    fn optimize(
        &mut self,
        c: &[f64],
        allow_artificial: bool,
    ) -> Result<(), SimplexError> {
        let ncols = self.rows.first().map_or(0, Vec::len);
        let max_iters = 200 * (self.rows.len() + ncols) + 1000;
        let mut iters = 0;
        let mut stall = 0;
        let mut last_obj = self.objective_value(c);
        loop {
            let bland = stall > STALL_LIMIT;
            let limit = if allow_artificial { ncols } else { self.artificial_start };
            let mut entering = None;
            let mut best = -EPS;
            for j in 0..limit {
                let r = self.obj[j];
                if r < -EPS {
                    if bland {
                        entering = Some(j);
                        break;
                    }
                    if r < best {
                        best = r;
                        entering = Some(j);
                    }
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };

            let mut leaving: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][col];
                if a > EPS {
                    let ratio = self.rhs[r] / a;
                    let better = match leaving {
                        None => true,
                        Some((lr, lratio)) => {
                            ratio < lratio - EPS
                                || (ratio < lratio + EPS
                                    && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leaving = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leaving else {
                return Err(SimplexError::Unbounded);
            };

            self.pivot(row, col);
            iters += 1;
            if iters > max_iters {
                return Err(SimplexError::IterationLimit { iterations: iters });
            }
            let obj = self.objective_value(c);
            if obj < last_obj - EPS {
                stall = 0;
            } else {
                stall += 1;
            }
            last_obj = obj;
        }
    }
}

/// Solves the program; `x` holds the structural variables only.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, SimplexError> {
    let n = lp.objective.len();
    for (i, c) in lp.constraints.iter().enumerate() {
        if c.coeffs.len() != n {
            return Err(SimplexError::ShapeMismatch {
                row: i,
                expected: n,
                found: c.coeffs.len(),
            });
        }
    }

    // Normalize to equality rows with nonnegative rhs, then add slack and
    // artificial columns.
    let m = lp.constraints.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut relations = Vec::with_capacity(m);
    for c in &lp.constraints {
        let mut coeffs = c.coeffs.clone();
        let mut b = c.rhs;
        let mut rel = c.relation;
        if b < 0.0 {
            for v in coeffs.iter_mut() {
                *v = -*v;
            }
            b = -b;
            rel = match rel {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
        rows.push(coeffs);
        rhs.push(b);
        relations.push(rel);
    }

    let n_slack = relations
        .iter()
        .filter(|r| !matches!(r, Relation::Eq))
        .count();
    let n_artificial = relations
        .iter()
        .filter(|r| !matches!(r, Relation::Le))
        .count();
    let total = n + n_slack + n_artificial;
    let artificial_start = n + n_slack;

    let mut basis = vec![usize::MAX; m];
    let mut slack_idx = n;
    let mut art_idx = artificial_start;
    for (r, rel) in relations.iter().enumerate() {
        rows[r].resize(total, 0.0);
        match rel {
            Relation::Le => {
                rows[r][slack_idx] = 1.0;
                basis[r] = slack_idx;
                slack_idx += 1;
            }
            Relation::Ge => {
                rows[r][slack_idx] = -1.0;
                slack_idx += 1;
                rows[r][art_idx] = 1.0;
                basis[r] = art_idx;
                art_idx += 1;
            }
            Relation::Eq => {
                rows[r][art_idx] = 1.0;
                basis[r] = art_idx;
                art_idx += 1;
            }
        }
    }

    let mut t = Tableau {
        rows,
        rhs,
        basis,
        obj: Vec::new(),
        n_struct: n,
        artificial_start,
    };

    // Phase 1: drive the artificial variables to zero.
    if n_artificial > 0 {
        let mut c1 = vec![0.0; total];
        for j in artificial_start..total {
            c1[j] = 1.0;
        }
        t.reset_objective(&c1);
        t.optimize(&c1, true)?;
        let residual = t.objective_value(&c1);
        let scale = 1.0 + t.rhs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if residual > 1e-7 * scale {
            return Err(SimplexError::Infeasible { residual });
        }
        // Pivot any artificial still in the basis out on a real column.
        for r in 0..t.rows.len() {
            if t.basis[r] >= artificial_start {
                if let Some(col) =
                    (0..artificial_start).find(|&j| t.rows[r][j].abs() > EPS)
                {
                    t.pivot(r, col);
                }
            }
        }
    }

    // Phase 2 on the real objective.
    let mut c2 = vec![0.0; total];
    c2[..n].copy_from_slice(&lp.objective);
    t.reset_objective(&c2);
    t.optimize(&c2, false)?;

    let mut x = vec![0.0; n];
    for (r, &bi) in t.basis.iter().enumerate() {
        if bi < t.n_struct {
            x[bi] = t.rhs[r].max(0.0);
        }
    }
    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| c * v)
        .sum();
    Ok(LpSolution { x, objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn le(coeffs: &[f64], rhs: f64) -> Constraint {
        Constraint { coeffs: coeffs.to_vec(), relation: Relation::Le, rhs }
    }

    fn ge(coeffs: &[f64], rhs: f64) -> Constraint {
        Constraint { coeffs: coeffs.to_vec(), relation: Relation::Ge, rhs }
    }

    fn eq(coeffs: &[f64], rhs: f64) -> Constraint {
        Constraint { coeffs: coeffs.to_vec(), relation: Relation::Eq, rhs }
    }

    #[test]
    fn textbook_maximization() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18; optimum 36 at (2,6).
        let lp = LinearProgram {
            objective: vec![-3.0, -5.0],
            constraints: vec![
                le(&[1.0, 0.0], 4.0),
                le(&[0.0, 2.0], 12.0),
                le(&[3.0, 2.0], 18.0),
            ],
        };
        let sol = solve(&lp).unwrap();
        assert!((sol.objective + 36.0).abs() < 1e-9);
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
        assert!((sol.x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn ge_rows_need_phase_one() {
        let lp = LinearProgram {
            objective: vec![1.0],
            constraints: vec![ge(&[1.0], 3.0)],
        };
        let sol = solve(&lp).unwrap();
        assert!((sol.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn equality_rows() {
        // min 2x + y s.t. x + y = 2, x <= 0.5; optimum at x=0, y=2.
        let lp = LinearProgram {
            objective: vec![2.0, 1.0],
            constraints: vec![eq(&[1.0, 1.0], 2.0), le(&[1.0, 0.0], 0.5)],
        };
        let sol = solve(&lp).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-9);
        assert!(sol.x[0].abs() < 1e-9);
    }

    #[test]
    fn detects_infeasibility() {
        let lp = LinearProgram {
            objective: vec![0.0],
            constraints: vec![le(&[1.0], 1.0), ge(&[1.0], 2.0)],
        };
        assert!(matches!(solve(&lp), Err(SimplexError::Infeasible { .. })));
    }

    #[test]
    fn detects_unboundedness() {
        let lp = LinearProgram {
            objective: vec![-1.0],
            constraints: vec![ge(&[1.0], 1.0)],
        };
        assert!(matches!(solve(&lp), Err(SimplexError::Unbounded)));
    }

    #[test]
    fn beale_degenerate_example_terminates() {
        // Classic cycling instance; optimum is -0.05.
        let lp = LinearProgram {
            objective: vec![-0.75, 150.0, -0.02, 6.0],
            constraints: vec![
                le(&[0.25, -60.0, -0.04, 9.0], 0.0),
                le(&[0.5, -90.0, -0.02, 3.0], 0.0),
                le(&[0.0, 0.0, 1.0, 0.0], 1.0),
            ],
        };
        let sol = solve(&lp).unwrap();
        assert!((sol.objective + 0.05).abs() < 1e-9, "objective {}", sol.objective);
    }

    #[test]
    fn negative_rhs_is_normalized() {
        // x - y <= -1 with x,y >= 0 forces y >= x + 1.
        let lp = LinearProgram {
            objective: vec![0.0, 1.0],
            constraints: vec![le(&[1.0, -1.0], -1.0)],
        };
        let sol = solve(&lp).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-9);
        assert!((sol.x[1] - 1.0).abs() < 1e-9);
    }
}
