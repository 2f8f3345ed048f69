//! Projected gradient descent over a [`Polytope`].
//!
//! Each iteration backtracks along the projection arc
//! `x(s) = Proj(x − s∇f(x))` until the Armijo condition
//! `f(x(s)) ≤ f(x) + c·∇f(x)ᵀ(x(s) − x)` holds. The first trial step is the
//! Barzilai–Borwein step from the previous iteration; the accepted sequence of
//! objective values is therefore monotone. Stationarity is measured by
//! `‖x − Proj(x − ∇f(x))‖∞`.

use serde::{Deserialize, Serialize};

use super::projection::{Polytope, Projector};
use crate::error::{Error, Result};

/// A differentiable objective on the feasible set.
pub trait Objective: Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f(x)` into `grad` and returns `f(x)`.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub armijo_c: f64,
    pub shrink: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            armijo_c: 1e-4,
            shrink: 0.5,
        }
    }
}

pub struct NlpProblem<'a> {
    pub objective: &'a dyn Objective,
    pub feasible_set: &'a Polytope,
    pub x0: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub line_search: LineSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    IterationCap,
    LineSearchFail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub iterates_objective: Vec<f64>,
    pub final_kkt_residual: f64,
    pub status: SolveStatus,
}

impl SolveTrace {
    pub fn final_objective(&self) -> f64 {
        *self.iterates_objective.last().unwrap_or(&f64::NAN)
    }

    pub fn iterations(&self) -> usize {
        self.iterates_objective.len().saturating_sub(1)
    }
}

const MIN_STEP: f64 = 1e-30;
const MAX_STEP: f64 = 1e30;

fn stationarity(x: &[f64], projected: &[f64]) -> f64 {
    x.iter()
        .zip(projected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn nlp_minimize(problem: &NlpProblem<'_>) -> Result<(Vec<f64>, SolveTrace)> {
    let set = problem.feasible_set;
    let n = set.dim();
    if problem.x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "start point of length {} for a {n}-dimensional problem",
            problem.x0.len()
        )));
    }
    if !(problem.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {}",
            problem.tol
        )));
    }
    let residual = set.residual(&problem.x0);
    if !(residual <= 1e-9) {
        return Err(Error::InfeasibleStart { residual });
    }

    let mut projector = Projector::new(set);
    let mut x = problem.x0.clone();
    // snap onto the bounds so later feasibility is exact
    for (v, l) in x.iter_mut().zip(set.lower()) {
        if *v < *l {
            *v = *l;
        }
    }
    let mut grad = vec![0.0; n];
    let mut f = problem.objective.value_and_gradient(&x, &mut grad);
    if !f.is_finite() {
        return Err(Error::InfeasibleStart { residual: f });
    }
    let mut values = vec![f];
    let mut step = 1.0;
    let mut trial = vec![0.0; n];
    let mut next_grad = vec![0.0; n];
    let LineSearch { armijo_c, shrink } = problem.line_search;

    let mut kkt = f64::INFINITY;
    for _ in 0..problem.max_iters {
        for k in 0..n {
            trial[k] = x[k] - grad[k];
        }
        let unit = projector.project_from(&x, &trial)?;
        kkt = stationarity(&x, &unit);
        if kkt <= problem.tol {
            return Ok((
                x,
                SolveTrace {
                    iterates_objective: values,
                    final_kkt_residual: kkt,
                    status: SolveStatus::Converged,
                },
            ));
        }

        let mut s = step;
        let accepted = loop {
            for k in 0..n {
                trial[k] = x[k] - s * grad[k];
            }
            let candidate = projector.project_from(&x, &trial)?;
            let decrease: f64 = grad
                .iter()
                .zip(candidate.iter().zip(&x))
                .map(|(g, (c, v))| g * (c - v))
                .sum();
            let fc = problem.objective.value(&candidate);
            if fc.is_finite() && fc <= f + armijo_c * decrease && fc <= f {
                break Some((candidate, fc));
            }
            s *= shrink;
            if s < MIN_STEP {
                break None;
            }
        };
        let Some((candidate, _)) = accepted else {
            return Ok((
                x,
                SolveTrace {
                    iterates_objective: values,
                    final_kkt_residual: kkt,
                    status: SolveStatus::LineSearchFail,
                },
            ));
        };

        let fc = problem
            .objective
            .value_and_gradient(&candidate, &mut next_grad);
        let mut sy = 0.0;
        let mut ss = 0.0;
        for k in 0..n {
            let dx = candidate[k] - x[k];
            sy += dx * (next_grad[k] - grad[k]);
            ss += dx * dx;
        }
        step = if sy > 0.0 && ss > 0.0 {
            (ss / sy).clamp(MIN_STEP, MAX_STEP)
        } else {
            (s / shrink).min(MAX_STEP)
        };
        x = candidate;
        f = fc;
        std::mem::swap(&mut grad, &mut next_grad);
        values.push(f);
    }

    Ok((
        x,
        SolveTrace {
            iterates_objective: values,
            final_kkt_residual: kkt,
            status: SolveStatus::IterationCap,
        },
    ))
}
