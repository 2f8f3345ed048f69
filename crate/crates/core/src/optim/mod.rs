//! Self-contained solvers: simplex LP, polytope projection, projected
//! gradient descent and a separable Newton method.

pub mod lp;
pub mod newton;
pub mod nlp;
pub mod projection;

pub use lp::{lp_solve, LpProblem, LpSolution};
pub use newton::{newton_minimize, NewtonProblem, SeparableObjective};
pub use nlp::{nlp_minimize, LineSearch, NlpProblem, Objective, SolveStatus, SolveTrace};
pub use projection::{project_to_affine_nonneg, Polytope, Projector};
