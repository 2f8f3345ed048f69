//! Feasible-start Newton method under linear equalities for objectives whose
//! Hessian is diagonal plus an optional constant rank-one term.
//!
//! The Newton system reduces to the Schur complement
//! `A H⁻¹ Aᵀ w = r − A H⁻¹ g`, `Δ = −H⁻¹(g + Aᵀw)`, where `r = A x − b` is
//! the equality residual and `H⁻¹` follows from Sherman–Morrison. Steps are damped by Armijo
//! backtracking and limited to keep every coordinate strictly above its
//! lower bound.

use nalgebra::DVector;

use super::nlp::{LineSearch, SolveStatus, SolveTrace};
use super::projection::Polytope;
use crate::error::{Error, Result};

/// Objective with Hessian `D(x) + ρ·vvᵀ`, `D` diagonal and `(v, ρ)` constant.
pub trait SeparableObjective: Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f(x)` and the diagonal part `D(x)`; returns `f(x)`.
    fn derivatives(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64;

    /// Constant rank-one Hessian term `(v, ρ)` with `ρ ≥ 0`.
    fn rank_one(&self) -> Option<(&[f64], f64)> {
        None
    }
}

pub struct NewtonProblem<'a> {
    pub objective: &'a dyn SeparableObjective,
    pub feasible_set: &'a Polytope,
    pub x0: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub line_search: LineSearch,
}

const BOUNDARY_FRACTION: f64 = 0.99;

/// `(D + ρvvᵀ)⁻¹ = D⁻¹ − ρ D⁻¹v vᵀD⁻¹ / (1 + ρ vᵀD⁻¹v)`.
struct InverseHessian<'a> {
    d_inv: Vec<f64>,
    rank_one: Option<(&'a [f64], f64, Vec<f64>)>,
}

impl<'a> InverseHessian<'a> {
    fn new(d_inv: Vec<f64>, rank_one: Option<(&'a [f64], f64)>) -> Self {
        let rank_one = rank_one.filter(|(_, rho)| *rho > 0.0).map(|(v, rho)| {
            let dv: Vec<f64> = v.iter().zip(&d_inv).map(|(a, b)| a * b).collect();
            let denom = 1.0 + rho * v.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>();
            (v, rho / denom, dv)
        });
        Self { d_inv, rank_one }
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = y.iter().zip(&self.d_inv).map(|(a, b)| a * b).collect();
        if let Some((v, scale, dv)) = &self.rank_one {
            let t = scale * v.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>();
            for (o, d) in out.iter_mut().zip(dv) {
                *o -= t * d;
            }
        }
        out
    }
}

/// Minimises over `{A x = b, x > l}`. The start must satisfy the equalities
/// within `1e-9` and lie strictly above the bounds.
pub fn newton_minimize(problem: &NewtonProblem<'_>) -> Result<(Vec<f64>, SolveTrace)> {
    let set = problem.feasible_set;
    let n = set.dim();
    if problem.x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "start point of length {} for a {n}-dimensional problem",
            problem.x0.len()
        )));
    }
    let lower = set.lower();
    let residual = set.equality_residual(&problem.x0);
    if !(residual <= 1e-9) || problem.x0.iter().zip(lower).any(|(x, l)| !(x > l)) {
        return Err(Error::InfeasibleStart {
            residual: residual.max(set.bound_violation(&problem.x0)),
        });
    }
    let a = set.eq_matrix();
    let b = set.eq_rhs();
    let LineSearch { armijo_c, shrink } = problem.line_search;

    let mut x = problem.x0.clone();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut f = problem.objective.derivatives(&x, &mut grad, &mut hess);
    let mut values = vec![f];
    let mut kkt = f64::INFINITY;

    for _ in 0..problem.max_iters {
        let h_max = hess.iter().copied().fold(0.0, f64::max);
        if !(h_max > 0.0) {
            if problem.objective.rank_one().is_some() {
                return Err(Error::InvalidArgument(
                    "Newton step needs a positive diagonal Hessian part".into(),
                ));
            }
            // flat objective: every feasible point is optimal
            kkt = 0.0;
            break;
        }
        let d_inv: Vec<f64> = hess.iter().map(|h| 1.0 / h.max(1e-14 * h_max)).collect();
        let h_inv = InverseHessian::new(d_inv, problem.objective.rank_one());
        // columns of H⁻¹Aᵀ
        let mut scaled = a.transpose();
        for mut col in scaled.column_iter_mut() {
            let v = h_inv.apply(col.as_slice());
            col.copy_from_slice(&v);
        }
        let schur = a * &scaled;
        let r = a * DVector::from_column_slice(&x) - b;
        let rhs = &r - scaled.transpose() * DVector::from_column_slice(&grad);
        let w = match schur.cholesky() {
            Some(c) => c.solve(&rhs),
            None => {
                return Err(Error::ProjectionFailed(
                    "Newton system lost positive definiteness".into(),
                ))
            }
        };
        let atw = a.transpose() * &w;
        let reduced: Vec<f64> = (0..n).map(|k| grad[k] + atw[k]).collect();
        kkt = reduced.iter().fold(0.0, |m, v| m.max(v.abs()));
        let step: Vec<f64> = h_inv.apply(&reduced).into_iter().map(|v| -v).collect();
        let decrement: f64 = (0..n).map(|k| -step[k] * grad[k]).sum();
        if kkt <= problem.tol || decrement.abs() <= 1e-15 * f.abs().max(1.0) {
            break;
        }

        let mut t: f64 = 1.0;
        for k in 0..n {
            if step[k] < 0.0 {
                t = t.min(BOUNDARY_FRACTION * (x[k] - lower[k]) / -step[k]);
            }
        }
        let slope: f64 = grad.iter().zip(&step).map(|(g, d)| g * d).sum();
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(v, d)| v + t * d).collect();
            let ft = problem.objective.value(&trial);
            if ft.is_finite() && ft <= f + armijo_c * t * slope.min(0.0) && ft <= f {
                break Some(trial);
            }
            t *= shrink;
            if t < 1e-20 {
                break None;
            }
        };
        let Some(next) = accepted else {
            return Ok((
                x,
                SolveTrace {
                    iterates_objective: values,
                    final_kkt_residual: kkt,
                    status: SolveStatus::LineSearchFail,
                },
            ));
        };
        x = next;
        f = problem.objective.derivatives(&x, &mut grad, &mut hess);
        values.push(f);
        if values.len() > problem.max_iters {
            return Ok((
                x,
                SolveTrace {
                    iterates_objective: values,
                    final_kkt_residual: kkt,
                    status: SolveStatus::IterationCap,
                },
            ));
        }
    }
    Ok((
        x,
        SolveTrace {
            iterates_objective: values,
            final_kkt_residual: kkt,
            status: SolveStatus::Converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dense(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    /// `Σ (x_k − c_k)² − Σ log x_k`.
    struct LogQuadratic {
        centre: Vec<f64>,
    }

    impl SeparableObjective for LogQuadratic {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(&self.centre)
                .map(|(v, c)| (v - c).powi(2) - v.ln())
                .sum()
        }
        fn derivatives(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
            for k in 0..x.len() {
                grad[k] = 2.0 * (x[k] - self.centre[k]) - 1.0 / x[k];
                hess[k] = 2.0 + 1.0 / (x[k] * x[k]);
            }
            self.value(x)
        }
    }

    #[test]
    fn simplex_stationary_point() {
        let set = Polytope::new(dense(1, 3, &[1.0, 1.0, 1.0]), vec![1.0], vec![0.0; 3]).unwrap();
        let obj = LogQuadratic {
            centre: vec![0.5, 0.2, 0.1],
        };
        let (x, trace) = newton_minimize(&NewtonProblem {
            objective: &obj,
            feasible_set: &set,
            x0: vec![1.0 / 3.0; 3],
            tol: 1e-12,
            max_iters: 100,
            line_search: LineSearch::default(),
        })
        .unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        // stationarity: all partial derivatives equal on the simplex
        let g: Vec<f64> = (0..3)
            .map(|k| 2.0 * (x[k] - obj.centre[k]) - 1.0 / x[k])
            .collect();
        assert!((g[0] - g[1]).abs() < 1e-8 && (g[1] - g[2]).abs() < 1e-8);
        assert!(trace.iterates_objective.windows(2).all(|w| w[1] <= w[0]));
    }

    /// `(cᵀx − t)² + Σ x log x`.
    struct EntropyLike {
        c: Vec<f64>,
        t: f64,
    }

    impl SeparableObjective for EntropyLike {
        fn value(&self, x: &[f64]) -> f64 {
            let r: f64 = self.c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.t;
            r * r + x.iter().map(|v| v * v.ln()).sum::<f64>()
        }
        fn derivatives(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
            let r: f64 = self.c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.t;
            for k in 0..x.len() {
                grad[k] = 2.0 * r * self.c[k] + x[k].ln() + 1.0;
                hess[k] = 1.0 / x[k];
            }
            self.value(x)
        }
        fn rank_one(&self) -> Option<(&[f64], f64)> {
            Some((&self.c, 2.0))
        }
    }

    #[test]
    fn rank_one_hessian_converges_quadratically() {
        let set = Polytope::new(dense(1, 4, &[1.0; 4]), vec![1.0], vec![0.0; 4]).unwrap();
        let obj = EntropyLike {
            c: vec![3.0, 1.0, 0.5, 2.0],
            t: 0.4,
        };
        let (x, trace) = newton_minimize(&NewtonProblem {
            objective: &obj,
            feasible_set: &set,
            x0: vec![0.1, 0.2, 0.3, 0.4],
            tol: 1e-12,
            max_iters: 50,
            line_search: LineSearch::default(),
        })
        .unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!(trace.iterations() < 20);
        let r: f64 = obj.c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() - obj.t;
        let g: Vec<f64> = (0..4)
            .map(|k| 2.0 * r * obj.c[k] + x[k].ln() + 1.0)
            .collect();
        assert!(g.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn start_on_bound_is_rejected() {
        let set = Polytope::new(dense(1, 2, &[1.0, 1.0]), vec![1.0], vec![0.0; 2]).unwrap();
        let obj = LogQuadratic {
            centre: vec![0.5, 0.5],
        };
        let err = newton_minimize(&NewtonProblem {
            objective: &obj,
            feasible_set: &set,
            x0: vec![1.0, 0.0],
            tol: 1e-10,
            max_iters: 10,
            line_search: LineSearch::default(),
        })
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleStart { .. }));
    }
}
