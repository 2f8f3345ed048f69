//! Two-phase revised simplex with Bland's anti-cycling rule.
//!
//! Problems are taken in the form
//!
//! ```text
//! min  cᵀx   s.t.  A x = b,  x ≥ l
//! ```
//!
//! Linearly dependent equality rows are removed up front (an inconsistent
//! dependent row means the problem is infeasible), so the basis matrix is
//! always square and nonsingular. The basis is refactorised every iteration;
//! the problems this crate solves have at most a few dozen rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REDUCED_COST_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-11;
const PHASE_ONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: Vec<f64>,
    pub lower_bounds: Vec<f64>,
}

impl LpProblem {
    /// Standard form with `x ≥ 0`.
    pub fn nonnegative(objective: Vec<f64>, eq_matrix: DMatrix<f64>, eq_rhs: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            eq_matrix,
            eq_rhs,
            lower_bounds: vec![0.0; n],
        }
    }

    fn check_dimensions(&self) -> Result<()> {
        let n = self.objective.len();
        if self.eq_matrix.ncols() != n
            || self.eq_matrix.nrows() != self.eq_rhs.len()
            || self.lower_bounds.len() != n
        {
            return Err(Error::DimensionMismatch(format!(
                "LP with {} objective coefficients, {}x{} constraint matrix, {} right-hand sides, {} bounds",
                n,
                self.eq_matrix.nrows(),
                self.eq_matrix.ncols(),
                self.eq_rhs.len(),
                self.lower_bounds.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Indices of the basic structural variables.
    pub basis: Vec<usize>,
    pub iterations: usize,
}

/// Rows of `[A | b]` that are linearly independent in `A`.
///
/// Rows are scanned in order and kept when their component orthogonal to the
/// rows already kept is non-negligible. A dependent row whose right-hand side
/// does not follow the same combination makes the system inconsistent.
pub fn independent_rows(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<usize>> {
    let n = a.ncols();
    let mut basis: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut kept = Vec::new();
    for r in 0..a.nrows() {
        let mut row: Vec<f64> = (0..n).map(|c| a[(r, c)]).collect();
        let mut rhs = b[r];
        let scale = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for (q, qb) in &basis {
                let coef: f64 = q.iter().zip(&row).map(|(x, y)| x * y).sum();
                for (v, qv) in row.iter_mut().zip(q) {
                    *v -= coef * qv;
                }
                rhs -= coef * qb;
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale {
            if rhs.abs() > 1e-8 * scale.max(b[r].abs()) {
                return Err(Error::InfeasibleLp);
            }
            continue;
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        basis.push((row, rhs / norm));
        kept.push(r);
    }
    Ok(kept)
}

struct Tableau<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    m: usize,
    n_structural: usize,
}

impl Tableau<'_> {
    /// Column `j` of `[A | I]`.
    fn column(&self, j: usize) -> DVector<f64> {
        if j < self.n_structural {
            self.a.column(j).into_owned()
        } else {
            let mut e = DVector::zeros(self.m);
            e[j - self.n_structural] = 1.0;
            e
        }
    }

    fn basis_matrix(&self, basis: &[usize]) -> DMatrix<f64> {
        let mut bm = DMatrix::zeros(self.m, self.m);
        for (k, &j) in basis.iter().enumerate() {
            bm.set_column(k, &self.column(j));
        }
        bm
    }

    /// Runs simplex iterations from `basis` until optimal. `allowed` bounds
    /// the entering candidates to indices `< allowed`.
    fn optimise(
        &self,
        costs: &[f64],
        basis: &mut [usize],
        allowed: usize,
        iterations: &mut usize,
        max_iterations: usize,
    ) -> Result<()> {
        let cost_scale = costs.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
        loop {
            if *iterations >= max_iterations {
                return Err(Error::SolverStall {
                    iterations: *iterations,
                });
            }
            let bm = self.basis_matrix(basis);
            let lu = bm.clone().lu();
            let x_b = lu.solve(self.b).ok_or(Error::SolverStall {
                iterations: *iterations,
            })?;
            let c_b = DVector::from_iterator(self.m, basis.iter().map(|&j| costs[j]));
            let y = bm.transpose().lu().solve(&c_b).ok_or(Error::SolverStall {
                iterations: *iterations,
            })?;

            // Bland: lowest-index improving column
            let mut in_basis = vec![false; self.n_structural + self.m];
            for &j in basis.iter() {
                in_basis[j] = true;
            }
            let entering = (0..allowed).find(|&j| {
                !in_basis[j] && costs[j] - self.column(j).dot(&y) < -REDUCED_COST_TOL * cost_scale
            });
            let Some(q) = entering else {
                return Ok(());
            };

            let d = lu.solve(&self.column(q)).ok_or(Error::SolverStall {
                iterations: *iterations,
            })?;
            // Bland: among minimum ratios, lowest basic variable index leaves
            let mut leave: Option<(usize, f64)> = None;
            for k in 0..self.m {
                if d[k] > PIVOT_TOL {
                    let ratio = x_b[k].max(0.0) / d[k];
                    leave = match leave {
                        None => Some((k, ratio)),
                        Some((best, best_ratio)) => {
                            let tie =
                                (ratio - best_ratio).abs() <= 1e-12 * best_ratio.abs().max(1.0);
                            if (tie && basis[k] < basis[best]) || (!tie && ratio < best_ratio) {
                                Some((k, ratio))
                            } else {
                                Some((best, best_ratio))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::UnboundedLp);
            };
            basis[r] = q;
            *iterations += 1;
        }
    }
}

/// Solves the LP, returning a basic optimal solution.
pub fn lp_solve(problem: &LpProblem) -> Result<LpSolution> {
    problem.check_dimensions()?;
    let n = problem.objective.len();
    let lower = DVector::from_column_slice(&problem.lower_bounds);
    let shifted: Vec<f64> = {
        let al = &problem.eq_matrix * &lower;
        problem
            .eq_rhs
            .iter()
            .zip(al.iter())
            .map(|(b, s)| b - s)
            .collect()
    };
    let rows = independent_rows(&problem.eq_matrix, &shifted)?;
    let m = rows.len();

    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for (k, &r) in rows.iter().enumerate() {
        let sign = if shifted[r] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..n {
            a[(k, c)] = sign * problem.eq_matrix[(r, c)];
        }
        b[k] = sign * shifted[r];
    }

    let tableau = Tableau {
        a: &a,
        b: &b,
        m,
        n_structural: n,
    };
    let max_iterations = 100 * (n + m) + 1000;
    let mut iterations = 0;

    // phase one: artificial slack per row
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut phase_one_costs = vec![0.0; n + m];
    for c in phase_one_costs.iter_mut().skip(n) {
        *c = 1.0;
    }
    tableau.optimise(
        &phase_one_costs,
        &mut basis,
        n + m,
        &mut iterations,
        max_iterations,
    )?;
    let x_b = tableau
        .basis_matrix(&basis)
        .lu()
        .solve(&b)
        .ok_or(Error::SolverStall { iterations })?;
    let infeasibility: f64 = basis
        .iter()
        .zip(x_b.iter())
        .filter(|(&j, _)| j >= n)
        .map(|(_, v)| v.max(0.0))
        .sum();
    if infeasibility > PHASE_ONE_TOL * b.amax().max(1.0) {
        return Err(Error::InfeasibleLp);
    }

    // pivot zero-level artificials out of the basis
    for k in 0..m {
        if basis[k] < n {
            continue;
        }
        let bm = tableau.basis_matrix(&basis);
        let lu = bm.lu();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if basis.contains(&j) {
                continue;
            }
            let d = lu
                .solve(&tableau.column(j))
                .ok_or(Error::SolverStall { iterations })?;
            let mag = d[k].abs();
            if mag > 1e-9 && best.is_none_or(|(_, bm)| mag > bm) {
                best = Some((j, mag));
            }
        }
        match best {
            Some((j, _)) => basis[k] = j,
            // full row rank was established above, so this is a numerical failure
            None => return Err(Error::SolverStall { iterations }),
        }
    }

    let mut costs = problem.objective.clone();
    costs.extend(std::iter::repeat_n(0.0, m));
    tableau.optimise(&costs, &mut basis, n, &mut iterations, max_iterations)?;

    let x_b = tableau
        .basis_matrix(&basis)
        .lu()
        .solve(&b)
        .ok_or(Error::SolverStall { iterations })?;
    let mut x = problem.lower_bounds.clone();
    for (k, &j) in basis.iter().enumerate() {
        x[j] += x_b[k].max(0.0);
    }
    let objective = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    let mut basis_sorted = basis;
    basis_sorted.sort_unstable();
    Ok(LpSolution {
        x,
        objective,
        basis: basis_sorted,
        iterations,
    })
}
