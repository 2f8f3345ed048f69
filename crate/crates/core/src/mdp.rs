//! Finite average-cost MDPs, occupation measures and stationary policies.
//!
//! Indices are row-major throughout: the state-action pair `(i, u)` lives at
//! `i * n_actions + u`, and the transition probability `P[i][u][j]` at
//! `(i * n_actions + u) * n_states + j`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{stationary_vector, to_rows};
use crate::optim::{lp_solve, LpProblem};

pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpModelDoc", into = "MdpModelDoc")]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    cost: Vec<f64>,
}

/// JSON layout of a model: nested row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpModelDoc {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    cost: Vec<Vec<f64>>,
}

impl TryFrom<MdpModelDoc> for MdpModel {
    type Error = Error;

    fn try_from(doc: MdpModelDoc) -> Result<Self> {
        MdpModel::new(doc.n_states, doc.n_actions, &doc.transition, &doc.cost)
    }
}

impl From<MdpModel> for MdpModelDoc {
    fn from(m: MdpModel) -> Self {
        MdpModelDoc {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transition: m.transition_nested(),
            cost: to_rows(&m.cost, m.n_actions),
        }
    }
}

impl MdpModel {
    /// Builds a model from nested `transition[i][u][j]` and `cost[i][u]`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: &[Vec<Vec<f64>>],
        cost: &[Vec<f64>],
    ) -> Result<Self> {
        let shape_err = || {
            Error::InvalidModel(format!(
                "expected transition {n_states}x{n_actions}x{n_states} and cost {n_states}x{n_actions}"
            ))
        };
        if transition.len() != n_states || cost.len() != n_states {
            return Err(shape_err());
        }
        let mut flat_p = Vec::with_capacity(n_states * n_actions * n_states);
        for per_state in transition {
            if per_state.len() != n_actions {
                return Err(shape_err());
            }
            for row in per_state {
                if row.len() != n_states {
                    return Err(shape_err());
                }
                flat_p.extend_from_slice(row);
            }
        }
        let mut flat_c = Vec::with_capacity(n_states * n_actions);
        for row in cost {
            if row.len() != n_actions {
                return Err(shape_err());
            }
            flat_c.extend_from_slice(row);
        }
        Self::from_flat(n_states, n_actions, flat_p, flat_c)
    }

    pub fn from_flat(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        cost: Vec<f64>,
    ) -> Result<Self> {
        let model = Self {
            n_states,
            n_actions,
            transition,
            cost,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let (x, u) = (self.n_states, self.n_actions);
        if x == 0 || u == 0 {
            return Err(Error::InvalidModel(
                "n_states and n_actions must be positive".into(),
            ));
        }
        if self.transition.len() != x * u * x || self.cost.len() != x * u {
            return Err(Error::InvalidModel(
                "buffer sizes do not match dimensions".into(),
            ));
        }
        for i in 0..x {
            for a in 0..u {
                let row = self.transition_row(i, a);
                if let Some(p) = row.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "transition P[{i}][{a}] has non-positive entry {p}"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidModel(format!(
                        "transition row P[{i}][{a}] sums to {sum}"
                    )));
                }
                let c = self.cost(i, a);
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "cost c[{i}][{a}] = {c} must be finite and non-negative"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn p(&self, i: usize, u: usize, j: usize) -> f64 {
        self.transition[(i * self.n_actions + u) * self.n_states + j]
    }

    pub fn transition_row(&self, i: usize, u: usize) -> &[f64] {
        let start = (i * self.n_actions + u) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.transition
    }

    pub fn transition_nested(&self) -> Vec<Vec<Vec<f64>>> {
        self.transition
            .chunks(self.n_actions * self.n_states)
            .map(|per_state| to_rows(per_state, self.n_states))
            .collect()
    }

    pub fn cost(&self, i: usize, u: usize) -> f64 {
        self.cost[i * self.n_actions + u]
    }

    pub fn cost_flat(&self) -> &[f64] {
        &self.cost
    }

    pub fn cost_rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.cost, self.n_actions)
    }

    /// Same dynamics, different costs.
    pub fn with_cost(&self, cost: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.n_states, self.n_actions, self.transition.clone(), cost)
    }

    /// Same costs, different dynamics.
    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.n_states, self.n_actions, transition, self.cost.clone())
    }

    /// Stable 64-bit fingerprint (FNV-1a over the raw bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.n_states as u64);
        feed(self.n_actions as u64);
        for v in self.transition.iter().chain(&self.cost) {
            feed(v.to_bits());
        }
        h
    }

    /// Flow-balance rows `Σ_u π(j,u) − Σ_{i,u} P_ij(u) π(i,u) = 0` for every
    /// `j`, followed by the normalisation row.
    pub fn flow_constraints(&self) -> (DMatrix<f64>, Vec<f64>) {
        flow_constraints(self.n_states, self.n_actions, &self.transition)
    }

    /// State-to-state matrix `Σ_u μ(u|i) P_ij(u)` under `policy`.
    pub fn state_chain(&self, policy: &Policy) -> Result<DMatrix<f64>> {
        check_shape(self, policy.n_states, policy.n_actions)?;
        let x = self.n_states;
        let mut m = DMatrix::zeros(x, x);
        for i in 0..x {
            for u in 0..self.n_actions {
                let w = policy.prob(i, u);
                if w == 0.0 {
                    continue;
                }
                for (j, p) in self.transition_row(i, u).iter().enumerate() {
                    m[(i, j)] += w * p;
                }
            }
        }
        Ok(m)
    }

    /// Occupation measure induced by running `policy` forever.
    pub fn occupation_of(&self, policy: &Policy) -> Result<OccupationMeasure> {
        let d = stationary_vector(&self.state_chain(policy)?)?;
        let u = self.n_actions;
        let mut pi = vec![0.0; self.n_pairs()];
        for i in 0..self.n_states {
            for a in 0..u {
                pi[i * u + a] = d[i].max(0.0) * policy.prob(i, a);
            }
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= total);
        OccupationMeasure::new(self, pi)
    }
}

/// Flow-balance and normalisation rows for an arbitrary flat transition
/// tensor. Row `j < n_states` is balance at state `j`; the last row is
/// `Σ π = 1`.
pub fn flow_constraints(
    n_states: usize,
    n_actions: usize,
    transition: &[f64],
) -> (DMatrix<f64>, Vec<f64>) {
    let n = n_states * n_actions;
    let mut a = DMatrix::zeros(n_states + 1, n);
    for i in 0..n_states {
        for u in 0..n_actions {
            let col = i * n_actions + u;
            a[(i, col)] += 1.0;
            for j in 0..n_states {
                a[(j, col)] -= transition[col * n_states + j];
            }
            a[(n_states, col)] = 1.0;
        }
    }
    let mut b = vec![0.0; n_states + 1];
    b[n_states] = 1.0;
    (a, b)
}

/// Largest flow-balance or normalisation residual of `pi` under `transition`.
pub fn flow_residual(n_states: usize, n_actions: usize, transition: &[f64], pi: &[f64]) -> f64 {
    let (a, b) = flow_constraints(n_states, n_actions, transition);
    let r = a * DVector::from_column_slice(pi) - DVector::from_vec(b);
    r.amax()
}

fn check_shape(model: &MdpModel, n_states: usize, n_actions: usize) -> Result<()> {
    if model.n_states != n_states || model.n_actions != n_actions {
        return Err(Error::DimensionMismatch(format!(
            "model is {}x{}, argument is {n_states}x{n_actions}",
            model.n_states, model.n_actions
        )));
    }
    Ok(())
}

/// Long-run joint frequency `π(i,u)` of state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationMeasure {
    n_states: usize,
    n_actions: usize,
    pi: Vec<f64>,
    model_id: u64,
}

impl OccupationMeasure {
    /// Validates non-negativity, normalisation and flow balance against
    /// `model` at the default feasibility tolerance.
    pub fn new(model: &MdpModel, pi: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(
            model.n_states,
            model.n_actions,
            model.transition_flat(),
            pi,
            FEASIBILITY_TOL,
        )
        .map(|mut occ| {
            occ.model_id = model.fingerprint();
            occ
        })
    }

    /// Shape, sign and normalisation checks only, for measures read back
    /// from disk whose transition tensor is not at hand.
    pub fn unchecked(n_states: usize, n_actions: usize, pi: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || pi.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "occupation measure of length {} for {n_states}x{n_actions}",
                pi.len()
            )));
        }
        if pi.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "occupation measure has a negative entry".into(),
            ));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > FEASIBILITY_TOL {
            return Err(Error::InvalidArgument(format!(
                "occupation measure sums to {total}"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            pi,
            model_id: 0,
        })
    }

    /// Validation against an arbitrary transition tensor, e.g. a perturbed one.
    pub fn with_tolerance(
        n_states: usize,
        n_actions: usize,
        transition: &[f64],
        pi: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        if pi.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "occupation measure of length {} for {n_states}x{n_actions}",
                pi.len()
            )));
        }
        if let Some(v) = pi.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "occupation measure has negative entry {v}"
            )));
        }
        let residual = flow_residual(n_states, n_actions, transition, &pi);
        if residual > tol {
            return Err(Error::InvalidArgument(format!(
                "occupation measure violates flow balance by {residual:e}"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            pi,
            model_id: 0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn get(&self, i: usize, u: usize) -> f64 {
        self.pi[i * self.n_actions + u]
    }

    /// Fingerprint of the model this measure was validated against (0 when
    /// validated against a bare transition tensor).
    pub fn model_id(&self) -> u64 {
        self.model_id
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.pi, self.n_actions)
    }

    /// `Σ_u π(i,u)` for every state.
    pub fn state_marginals(&self) -> Vec<f64> {
        self.pi
            .chunks(self.n_actions)
            .map(|r| r.iter().sum())
            .collect()
    }
}

/// Stationary randomised policy `μ(u|i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    mu: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Policy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Policy::from_rows(&rows)
    }
}

impl From<Policy> for Vec<Vec<f64>> {
    fn from(p: Policy) -> Self {
        p.rows()
    }
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, mu: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || mu.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy buffer of length {} for {n_states}x{n_actions}",
                mu.len()
            )));
        }
        for (i, row) in mu.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            mu,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::DimensionMismatch("ragged policy rows".into()));
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, i: usize, u: usize) -> f64 {
        self.mu[i * self.n_actions + u]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.mu[i * self.n_actions..(i + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mu
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.mu, self.n_actions)
    }

    /// Whether every row puts mass at least `1 − tol` on one action.
    pub fn is_deterministic(&self, tol: f64) -> bool {
        self.mu
            .chunks(self.n_actions)
            .all(|r| r.iter().any(|&p| p >= 1.0 - tol))
    }
}

/// `μ(u|i) = π(i,u) / Σ_u π(i,u)`.
pub fn extract_policy(pi: &OccupationMeasure) -> Result<Policy> {
    let u = pi.n_actions;
    let mut mu = Vec::with_capacity(pi.pi.len());
    for (i, row) in pi.pi.chunks(u).enumerate() {
        let mass: f64 = row.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::ZeroStateMass { state: i });
        }
        mu.extend(row.iter().map(|v| v / mass));
    }
    Policy::new(pi.n_states, u, mu)
}

/// `Σ_{i,u} c(i,u) π(i,u)`.
pub fn average_cost(pi: &OccupationMeasure, model: &MdpModel) -> Result<f64> {
    check_shape(model, pi.n_states, pi.n_actions)?;
    Ok(model.cost.iter().zip(&pi.pi).map(|(c, p)| c * p).sum())
}

/// Optimal occupation measure of the average-cost LP.
///
/// The last flow-balance row is implied by the others together with the
/// normalisation row and is dropped before solving.
pub fn solve_average_cost_lp(model: &MdpModel) -> Result<OccupationMeasure> {
    let (full, mut rhs) = model.flow_constraints();
    let x = model.n_states;
    let keep: Vec<usize> = (0..x - 1).chain(std::iter::once(x)).collect();
    let a = full.select_rows(keep.iter());
    rhs = keep.iter().map(|&r| rhs[r]).collect();
    let problem = LpProblem::nonnegative(model.cost.clone(), a, rhs);
    let solution = lp_solve(&problem).map_err(|e| match e {
        Error::UnboundedLp => Error::InfeasibleLp,
        other => other,
    })?;
    OccupationMeasure::new(model, solution.x)
}

/// Optimal average cost by relative value iteration.
///
/// Iterates `h ← T h − (T h)(0)` with the Bellman operator
/// `(T h)(i) = min_u c(i,u) + Σ_j P_ij(u) h(j)` and stops when the span of
/// `T h − h` falls below `tol`; the gain is the midpoint of that span.
pub fn relative_value_iteration(model: &MdpModel, tol: f64) -> Result<f64> {
    const MAX_ITERATIONS: usize = 1_000_000;
    let x = model.n_states;
    let mut h = vec![0.0; x];
    let mut next = vec![0.0; x];
    let mut span = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        for (i, slot) in next.iter_mut().enumerate() {
            *slot = (0..model.n_actions)
                .map(|u| {
                    model.cost(i, u)
                        + model
                            .transition_row(i, u)
                            .iter()
                            .zip(&h)
                            .map(|(p, v)| p * v)
                            .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
        }
        let (lo, hi) = next
            .iter()
            .zip(&h)
            .map(|(t, v)| t - v)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            });
        span = hi - lo;
        if span < tol {
            return Ok(0.5 * (lo + hi));
        }
        let offset = next[0];
        for (v, t) in h.iter_mut().zip(&next) {
            *v = t - offset;
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        span,
    })
}

/// Random policy with all entries positive (normalised uniform draws).
pub fn random_positive_policy<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
) -> Policy {
    let mut mu = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let row: Vec<f64> = (0..n_actions)
            .map(|_| rng.random_range(0.05..1.0))
            .collect();
        let s: f64 = row.iter().sum();
        mu.extend(row.iter().map(|v| v / s));
    }
    Policy::new(n_states, n_actions, mu).expect("normalised rows")
}

/// Random model with strictly positive transitions and costs in `[0, 1)`.
pub fn random_positive_model<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
) -> MdpModel {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        transition.extend(row.iter().map(|v| v / s));
    }
    let cost = (0..n_states * n_actions)
        .map(|_| rng.random::<f64>())
        .collect();
    MdpModel::from_flat(n_states, n_actions, transition, cost).expect("valid random model")
}

/// Rescales each length-`width` row to sum to one.
pub fn renormalise_rows(flat: &mut [f64], width: usize) {
    for row in flat.chunks_mut(width) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}
