//! Euclidean projection onto `{x : A x = b, x ≥ l}`.
//!
//! The projection QP `min ½‖y − x‖²` is solved by a primal active-set method
//! over the bound constraints. Each subproblem fixes the working-set bounds
//! and solves the equality-constrained part in closed form through the
//! normal equations `A_F A_Fᵀ λ = r` on the free columns.

use nalgebra::{DMatrix, DVector};

use super::lp::{independent_rows, lp_solve, LpProblem};
use crate::error::{Error, Result};

/// Linear equalities plus elementwise lower bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    eq_matrix: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    lower: Vec<f64>,
}

impl Polytope {
    /// Builds the set, dropping dependent equality rows.
    pub fn new(eq_matrix: DMatrix<f64>, eq_rhs: Vec<f64>, lower: Vec<f64>) -> Result<Self> {
        if eq_matrix.nrows() != eq_rhs.len() || eq_matrix.ncols() != lower.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} equalities with {} right-hand sides and {} bounds",
                eq_matrix.nrows(),
                eq_matrix.ncols(),
                eq_rhs.len(),
                lower.len()
            )));
        }
        let rows = independent_rows(&eq_matrix, &eq_rhs)?;
        let n = eq_matrix.ncols();
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (k, &r) in rows.iter().enumerate() {
            a.set_row(k, &eq_matrix.row(r));
            b[k] = eq_rhs[r];
        }
        Ok(Self {
            eq_matrix: a,
            eq_rhs: b,
            lower,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn n_equalities(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &DVector<f64> {
        &self.eq_rhs
    }

    /// Largest equality residual `|A x − b|∞`.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        let ax = &self.eq_matrix * DVector::from_column_slice(x);
        (ax - &self.eq_rhs).amax()
    }

    /// Largest bound violation `max (l − x)⁺`.
    pub fn bound_violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.lower)
            .map(|(v, l)| (l - v).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        self.equality_residual(x).max(self.bound_violation(x))
    }

    /// Minimum-norm shift of `x` onto `{A x = b}`, ignoring the bounds.
    pub fn restore_equalities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xv = DVector::from_column_slice(x);
        let r = &self.eq_matrix * &xv - &self.eq_rhs;
        let gram = &self.eq_matrix * self.eq_matrix.transpose();
        let w = gram
            .svd(true, true)
            .solve(&r, 1e-12)
            .map_err(|e| Error::ProjectionFailed(e.to_string()))?;
        Ok((xv - self.eq_matrix.transpose() * w)
            .iter()
            .copied()
            .collect())
    }

    /// Some feasible vertex, from phase one of the simplex method.
    pub fn feasible_point(&self) -> Result<Vec<f64>> {
        let problem = LpProblem {
            objective: vec![0.0; self.dim()],
            eq_matrix: self.eq_matrix.clone(),
            eq_rhs: self.eq_rhs.iter().copied().collect(),
            lower_bounds: self.lower.clone(),
        };
        Ok(lp_solve(&problem)?.x)
    }
}

/// Active-set projector that remembers its working set between calls.
#[derive(Debug, Clone)]
pub struct Projector<'a> {
    set: &'a Polytope,
    working: Vec<bool>,
}

struct EqpSolution {
    y: Vec<f64>,
    lambda: DVector<f64>,
}

impl<'a> Projector<'a> {
    pub fn new(set: &'a Polytope) -> Self {
        Self {
            working: vec![false; set.dim()],
            set,
        }
    }

    /// Minimiser of `½‖y − target‖²` with the working-set bounds held at
    /// their limits. `None` when the free columns lose full row rank.
    fn solve_eqp(&self, target: &[f64]) -> Option<EqpSolution> {
        let a = &self.set.eq_matrix;
        let m = a.nrows();
        let n = a.ncols();
        let mut normal = DMatrix::<f64>::zeros(m, m);
        let mut rhs = self.set.eq_rhs.clone();
        for j in 0..n {
            let col = a.column(j);
            if self.working[j] {
                rhs.axpy(-self.set.lower[j], &col, 1.0);
            } else {
                rhs.axpy(-target[j], &col, 1.0);
                normal.ger(1.0, &col, &col, 1.0);
            }
        }
        let lambda = if m == 0 {
            DVector::zeros(0)
        } else {
            normal.cholesky()?.solve(&rhs)
        };
        let y = (0..n)
            .map(|j| {
                if self.working[j] {
                    self.set.lower[j]
                } else {
                    target[j] + a.column(j).dot(&lambda)
                }
            })
            .collect();
        Some(EqpSolution { y, lambda })
    }

    /// Projects `target`, starting the active-set walk from the feasible
    /// point `start`.
    pub fn project_from(&mut self, start: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        let n = self.set.dim();
        if start.len() != n || target.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "projection in dimension {n} given vectors of length {} and {}",
                start.len(),
                target.len()
            )));
        }
        let lower = &self.set.lower;
        let mut y = start.to_vec();
        for j in 0..n {
            if self.working[j] && (y[j] - lower[j]).abs() > 1e-14 * (1.0 + lower[j].abs()) {
                self.working[j] = false;
            }
            if self.working[j] {
                y[j] = lower[j];
            }
        }
        let scale = 1.0
            + target
                .iter()
                .zip(start)
                .map(|(t, s)| (t - s).abs())
                .fold(0.0, f64::max);

        let max_iterations = 10 * n + 100;
        for _ in 0..max_iterations {
            let eqp = match self.solve_eqp(target) {
                Some(s) => s,
                None if self.working.iter().any(|&w| w) => {
                    self.working.iter_mut().for_each(|w| *w = false);
                    continue;
                }
                None => {
                    return Err(Error::ProjectionFailed(
                        "equality constraints are rank deficient".into(),
                    ))
                }
            };

            let mut alpha = 1.0;
            let mut blocking = None;
            for j in 0..n {
                if self.working[j] {
                    continue;
                }
                let p = eqp.y[j] - y[j];
                if eqp.y[j] < lower[j] - 1e-15 * (1.0 + lower[j].abs()) && p < 0.0 {
                    let ratio = ((lower[j] - y[j]) / p).max(0.0);
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(j);
                    }
                }
            }
            if let Some(j) = blocking {
                for k in 0..n {
                    y[k] += alpha * (eqp.y[k] - y[k]);
                }
                y[j] = lower[j];
                self.working[j] = true;
                continue;
            }

            y = eqp.y;
            // bound multipliers ν_j = l_j − target_j − (Aᵀλ)_j must be ≥ 0
            let mut release: Option<(usize, f64)> = None;
            for j in 0..n {
                if !self.working[j] {
                    continue;
                }
                let nu = lower[j] - target[j] - self.set.eq_matrix.column(j).dot(&eqp.lambda);
                if nu < -1e-12 * scale && release.is_none_or(|(_, best)| nu < best) {
                    release = Some((j, nu));
                }
            }
            match release {
                Some((j, _)) => self.working[j] = false,
                None => {
                    for (v, l) in y.iter_mut().zip(lower) {
                        if *v < *l {
                            *v = *l;
                        }
                    }
                    return Ok(y);
                }
            }
        }
        Err(Error::ProjectionFailed(format!(
            "active set did not settle within {max_iterations} iterations"
        )))
    }
}

/// Euclidean projection of `x` onto `set`.
pub fn project_to_affine_nonneg(x: &[f64], set: &Polytope) -> Result<Vec<f64>> {
    let start = set.feasible_point()?;
    Projector::new(set).project_from(&start, x)
}
