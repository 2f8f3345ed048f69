//! Masked sensing plans.
//!
//! Four maskers share one pipeline: each Monte Carlo run draws random
//! interior starting plans from its own RNG stream, solves the masking
//! problem from each start and keeps the best objective; the per-run plans
//! are then averaged entrywise, renormalised and projected back onto the flow
//! polytope of the transition tensor in force.
//!
//! * [`mask_total_cost`]: `(c₀ᵀπ − c₀ᵀπ₀)² + γ·Σ_i log Σ_u π(i,u)`.
//! * [`mask_state_action_cost`]: block coordinate descent over `(c, π)` for
//!   `(cᵀπ − c₀ᵀπ₀)² + γ₁‖c − c₀‖² + γ₂·Σ_i log Σ_u π(i,u)`.
//! * [`mask_transition`]: block coordinate descent over `(P, π)` for
//!   `(c₀ᵀ(π − π₀))² + γ₁‖P − P₀‖₁ + γ₂(|X||U|·Σ_i log Σ_u π(i,u) − Σ log P)`.
//! * [`mask_max_entropy`]: `(c₀ᵀ(π − π₀))² + γ·Σ π log π`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::fisher_report_raw;
use crate::linalg::{dot, to_rows};
use crate::mdp::{
    average_cost, extract_policy, flow_constraints, random_positive_policy, MdpModel,
    OccupationMeasure, Policy,
};
use crate::optim::{
    newton_minimize, nlp_minimize, LineSearch, NewtonProblem, NlpProblem, Objective, Polytope,
    Projector, SeparableObjective, SolveStatus, SolveTrace,
};

/// Numerical settings shared by every nonlinear subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    /// Lower bound on every occupation and transition entry.
    pub floor: f64,
    /// `δ` in the smoothed absolute value `√(y² + δ²)`.
    pub smoothing: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 10_000,
            armijo_c: 1e-4,
            shrink: 0.5,
            floor: 1e-9,
            smoothing: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Cost-model rate of the scenario, carried for provenance only.
    pub chi: f64,
    pub bcd_threshold: f64,
    pub bcd_max_rounds: usize,
    pub monte_carlo_runs: usize,
    pub master_seed: u64,
    pub starts_per_run: usize,
    pub solver: SolverSettings,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            gamma1: 1.0,
            gamma2: 0.01,
            chi: 10.0,
            bcd_threshold: 1e-8,
            bcd_max_rounds: 50,
            monte_carlo_runs: 200,
            master_seed: 0,
            starts_per_run: 8,
            solver: SolverSettings::default(),
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [
            ("gamma", self.gamma),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.chi > 0.0 && self.chi.is_finite()) {
            return bad(format!("chi must be positive, got {}", self.chi));
        }
        if !(self.bcd_threshold > 0.0) {
            return bad(format!(
                "bcd_threshold must be positive, got {}",
                self.bcd_threshold
            ));
        }
        if self.bcd_max_rounds == 0 || self.monte_carlo_runs == 0 || self.starts_per_run == 0 {
            return bad("round, run and start counts must be at least 1".into());
        }
        let s = &self.solver;
        if !(s.tol > 0.0) || s.max_iters == 0 {
            return bad("solver tolerance and iteration cap must be positive".into());
        }
        if !(s.armijo_c > 0.0 && s.armijo_c < 1.0) || !(s.shrink > 0.0 && s.shrink < 1.0) {
            return bad("line-search constants must lie in (0, 1)".into());
        }
        if !(s.floor > 0.0 && s.floor < 1e-3) || !(s.smoothing > 0.0) {
            return bad("floor must lie in (0, 1e-3) and smoothing must be positive".into());
        }
        Ok(())
    }

    fn line_search(&self) -> LineSearch {
        LineSearch {
            armijo_c: self.solver.armijo_c,
            shrink: self.solver.shrink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMethod {
    Total,
    Cost,
    Transition,
    Entropy,
}

impl MaskingMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Total => "total",
            Self::Cost => "cost",
            Self::Transition => "transition",
            Self::Entropy => "entropy",
        }
    }
}

/// Compact summary of one nonlinear solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub final_objective: f64,
    pub final_kkt_residual: f64,
    pub status: SolveStatus,
}

impl From<&SolveTrace> for SolveSummary {
    fn from(t: &SolveTrace) -> Self {
        Self {
            iterations: t.iterations(),
            final_objective: t.final_objective(),
            final_kkt_residual: t.final_kkt_residual,
            status: t.status,
        }
    }
}

/// One block coordinate descent round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcdRound {
    pub round: usize,
    pub objective: f64,
    pub displacement: f64,
}

/// Outcome of one Monte Carlo run (its best start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub best_start: usize,
    pub objective: f64,
    pub log_det_paper: f64,
    pub log_det_oracle: f64,
    pub cost_perturbation: f64,
    pub cost_perturbation_pct: f64,
    pub param_perturbation: f64,
    /// Single-problem maskers: the final solve. Descent maskers: the last
    /// policy step.
    pub solve: SolveSummary,
    pub rounds: Vec<BcdRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeans {
    pub log_det_paper: f64,
    pub log_det_oracle: f64,
    pub cost_perturbation: f64,
    pub cost_perturbation_pct: f64,
    pub param_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingResult {
    pub method: MaskingMethod,
    #[serde(with = "occupation_rows")]
    pub masked_pi: OccupationMeasure,
    pub masked_policy: Policy,
    pub perturbed_cost: Option<Vec<Vec<f64>>>,
    pub perturbed_transition: Option<Vec<Vec<Vec<f64>>>>,
    /// `(c₀ᵀπ − c₀ᵀπ₀)²` of the averaged plan.
    pub total_cost_perturbation: f64,
    /// `100·|c₀ᵀπ − c₀ᵀπ₀| / c₀ᵀπ₀` of the averaged plan.
    pub relative_cost_perturbation_pct: f64,
    /// `Σ(c − c₀)²` or `Σ|P − P₀|` of the averaged parameters; zero otherwise.
    pub param_perturbation: f64,
    pub log_det_paper: f64,
    pub log_det_oracle: f64,
    pub run_means: RunMeans,
    pub runs: Vec<RunRecord>,
}

mod occupation_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        pi: &OccupationMeasure,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        pi.rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<OccupationMeasure, D::Error> {
        use serde::de::Error as _;
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(D::Error::custom("ragged occupation rows"));
        }
        OccupationMeasure::unchecked(n_states, n_actions, rows.concat()).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------- objectives

/// `(cᵀπ − target)² + γ·w·Σ_i log Σ_u π(i,u)`.
pub struct TotalCostObjective<'a> {
    pub cost: &'a [f64],
    pub target: f64,
    pub gamma: f64,
    /// Exponent on the state marginals inside the logarithm.
    pub marginal_weight: f64,
    pub n_actions: usize,
}

impl Objective for TotalCostObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let r = dot(self.cost, x) - self.target;
        let logs: f64 = x
            .chunks(self.n_actions)
            .map(|row| row.iter().sum::<f64>().ln())
            .sum();
        r * r + self.gamma * self.marginal_weight * logs
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r = dot(self.cost, x) - self.target;
        let w = self.gamma * self.marginal_weight;
        let mut logs = 0.0;
        for (i, row) in x.chunks(self.n_actions).enumerate() {
            let mass: f64 = row.iter().sum();
            logs += mass.ln();
            for u in 0..self.n_actions {
                let k = i * self.n_actions + u;
                grad[k] = 2.0 * r * self.cost[k] + w / mass;
            }
        }
        r * r + w * logs
    }
}

/// `(cᵀπ − target)² + γ·Σ π log π`.
pub struct EntropyObjective<'a> {
    pub cost: &'a [f64],
    pub target: f64,
    pub gamma: f64,
}

impl Objective for EntropyObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let r = dot(self.cost, x) - self.target;
        r * r + self.gamma * x.iter().map(|v| v * v.ln()).sum::<f64>()
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r = dot(self.cost, x) - self.target;
        let mut neg_entropy = 0.0;
        for k in 0..x.len() {
            let l = x[k].ln();
            neg_entropy += x[k] * l;
            grad[k] = 2.0 * r * self.cost[k] + self.gamma * (l + 1.0);
        }
        r * r + self.gamma * neg_entropy
    }
}

impl SeparableObjective for EntropyObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        Objective::value(self, x)
    }

    fn derivatives(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        for (h, v) in hess.iter_mut().zip(x) {
            *h = self.gamma / v;
        }
        self.value_and_gradient(x, grad)
    }

    fn rank_one(&self) -> Option<(&[f64], f64)> {
        Some((self.cost, 2.0))
    }
}

/// `γ₁·Σ √((P − P₀)² + δ²) − γ₂·Σ log P` over the flat transition tensor.
pub struct TransitionObjective<'a> {
    pub reference: &'a [f64],
    pub gamma1: f64,
    pub gamma2: f64,
    pub smoothing: f64,
}

impl TransitionObjective<'_> {
    fn smoothed_l1(&self, x: &[f64]) -> f64 {
        let d2 = self.smoothing * self.smoothing;
        x.iter()
            .zip(self.reference)
            .map(|(p, p0)| ((p - p0).powi(2) + d2).sqrt())
            .sum()
    }
}

impl Objective for TransitionObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let logs: f64 = x.iter().map(|p| p.ln()).sum();
        self.gamma1 * self.smoothed_l1(x) - self.gamma2 * logs
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d2 = self.smoothing * self.smoothing;
        let mut l1 = 0.0;
        let mut logs = 0.0;
        for k in 0..x.len() {
            let y = x[k] - self.reference[k];
            let s = (y * y + d2).sqrt();
            l1 += s;
            logs += x[k].ln();
            grad[k] = self.gamma1 * y / s - self.gamma2 / x[k];
        }
        self.gamma1 * l1 - self.gamma2 * logs
    }
}

impl SeparableObjective for TransitionObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        Objective::value(self, x)
    }

    fn derivatives(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d2 = self.smoothing * self.smoothing;
        let mut total = 0.0;
        for k in 0..x.len() {
            let y = x[k] - self.reference[k];
            let s = (y * y + d2).sqrt();
            total += self.gamma1 * s - self.gamma2 * x[k].ln();
            grad[k] = self.gamma1 * y / s - self.gamma2 / x[k];
            hess[k] = self.gamma1 * d2 / (s * s * s) + self.gamma2 / (x[k] * x[k]);
        }
        total
    }
}

// ------------------------------------------------------------------ pipeline

struct Context<'a> {
    model: &'a MdpModel,
    cfg: &'a MaskingConfig,
    /// `c₀ᵀπ₀`.
    baseline: f64,
    plan_set: Polytope,
}

impl<'a> Context<'a> {
    fn new(
        model: &'a MdpModel,
        pi0: &'a OccupationMeasure,
        cfg: &'a MaskingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let baseline = average_cost(pi0, model)?;
        let plan_set = plan_polytope(model, model.transition_flat(), cfg.solver.floor)?;
        Ok(Self {
            model,
            cfg,
            baseline,
            plan_set,
        })
    }

    fn x(&self) -> usize {
        self.model.n_states()
    }

    fn u(&self) -> usize {
        self.model.n_actions()
    }

    fn rng(&self, run: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.master_seed);
        rng.set_stream(run as u64);
        rng
    }

    fn minimize(
        &self,
        objective: &dyn Objective,
        set: &Polytope,
        x0: Vec<f64>,
    ) -> Result<(Vec<f64>, SolveTrace)> {
        nlp_minimize(&NlpProblem {
            objective,
            feasible_set: set,
            x0,
            tol: self.cfg.solver.tol,
            max_iters: self.cfg.solver.max_iters,
            line_search: self.cfg.line_search(),
        })
    }

    fn cost_gap(&self, pi: &[f64]) -> (f64, f64) {
        let d = dot(self.model.cost_flat(), pi) - self.baseline;
        (d * d, 100.0 * d.abs() / self.baseline)
    }
}

/// Flow polytope `{π ≥ floor : flow balance under transition, Σπ = 1}`.
pub fn plan_polytope(model: &MdpModel, transition: &[f64], floor: f64) -> Result<Polytope> {
    let (a, b) = flow_constraints(model.n_states(), model.n_actions(), transition);
    Polytope::new(a, b, vec![floor; model.n_pairs()])
}

/// Transition tensors with unit rows that keep `pi` stationary:
/// `{P ≥ lower : Σ_j P_ij(u) = 1, Σ_{i,u} P_ij(u) π(i,u) = Σ_u π(j,u)}`.
pub fn transition_polytope(
    n_states: usize,
    n_actions: usize,
    pi: &[f64],
    lower: Vec<f64>,
) -> Result<Polytope> {
    let s = n_states * n_actions;
    let n = s * n_states;
    let mut a = DMatrix::zeros(s + n_states, n);
    let mut b = vec![1.0; s + n_states];
    for m in 0..s {
        for j in 0..n_states {
            a[(m, m * n_states + j)] = 1.0;
            a[(s + j, m * n_states + j)] = pi[m];
        }
    }
    for j in 0..n_states {
        b[s + j] = pi[j * n_actions..(j + 1) * n_actions].iter().sum();
    }
    Polytope::new(a, b, lower)
}

/// Plan induced by a random positive policy, moved inside the floor if
/// needed.
fn random_interior_plan(
    ctx: &Context<'_>,
    transition: &[f64],
    set: &Polytope,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let policy = random_positive_policy(rng, ctx.x(), ctx.u());
    let model = ctx.model.with_transition(transition.to_vec())?;
    let pi = model.occupation_of(&policy)?.as_slice().to_vec();
    if set.bound_violation(&pi) == 0.0 {
        return Ok(pi);
    }
    let start = set.feasible_point()?;
    Projector::new(set).project_from(&start, &pi)
}

struct RunOutcome {
    pi: Vec<f64>,
    param: Option<Vec<f64>>,
    objective: f64,
    best_start: usize,
    solve: SolveSummary,
    rounds: Vec<BcdRound>,
}

fn keep_best(best: &mut Option<RunOutcome>, candidate: RunOutcome) {
    if best
        .as_ref()
        .is_none_or(|b| candidate.objective < b.objective)
    {
        *best = Some(candidate);
    }
}

fn total_cost_run(ctx: &Context<'_>, run: usize) -> Result<RunOutcome> {
    let mut rng = ctx.rng(run);
    let objective = TotalCostObjective {
        cost: ctx.model.cost_flat(),
        target: ctx.baseline,
        gamma: ctx.cfg.gamma,
        marginal_weight: 1.0,
        n_actions: ctx.u(),
    };
    let mut best = None;
    for start in 0..ctx.cfg.starts_per_run {
        let x0 = random_interior_plan(ctx, ctx.model.transition_flat(), &ctx.plan_set, &mut rng)?;
        let (pi, trace) = ctx.minimize(&objective, &ctx.plan_set, x0)?;
        keep_best(
            &mut best,
            RunOutcome {
                pi,
                param: None,
                objective: trace.final_objective(),
                best_start: start,
                solve: (&trace).into(),
                rounds: Vec::new(),
            },
        );
    }
    Ok(best.expect("at least one start"))
}

fn entropy_run(ctx: &Context<'_>, run: usize) -> Result<RunOutcome> {
    let mut rng = ctx.rng(run);
    let objective = EntropyObjective {
        cost: ctx.model.cost_flat(),
        target: ctx.baseline,
        gamma: ctx.cfg.gamma,
    };
    let mut best = None;
    for start in 0..ctx.cfg.starts_per_run {
        let x0 = random_interior_plan(ctx, ctx.model.transition_flat(), &ctx.plan_set, &mut rng)?;
        // strictly convex for γ > 0, where Newton applies
        let (pi, trace) = if ctx.cfg.gamma > 0.0 {
            newton_minimize(&NewtonProblem {
                objective: &objective,
                feasible_set: &ctx.plan_set,
                x0,
                tol: ctx.cfg.solver.tol,
                max_iters: ctx.cfg.solver.max_iters,
                line_search: ctx.cfg.line_search(),
            })?
        } else {
            ctx.minimize(&objective, &ctx.plan_set, x0)?
        };
        keep_best(
            &mut best,
            RunOutcome {
                pi,
                param: None,
                objective: trace.final_objective(),
                best_start: start,
                solve: (&trace).into(),
                rounds: Vec::new(),
            },
        );
    }
    Ok(best.expect("at least one start"))
}

/// Full state-action-cost objective.
pub fn cost_bcd_objective(
    model: &MdpModel,
    baseline: f64,
    cost: &[f64],
    pi: &[f64],
    gamma1: f64,
    gamma2: f64,
) -> f64 {
    let r = dot(cost, pi) - baseline;
    let shift: f64 = cost
        .iter()
        .zip(model.cost_flat())
        .map(|(c, c0)| (c - c0).powi(2))
        .sum();
    let logs: f64 = pi
        .chunks(model.n_actions())
        .map(|row| row.iter().sum::<f64>().ln())
        .sum();
    r * r + gamma1 * shift + gamma2 * logs
}

/// Exact minimiser of `(cᵀπ − target)² + γ₁‖c − c₀‖²` over unconstrained `c`.
pub fn cost_step(c0: &[f64], pi: &[f64], target: f64, gamma1: f64) -> Vec<f64> {
    let r = dot(c0, pi) - target;
    let t = r / (gamma1 + dot(pi, pi));
    c0.iter().zip(pi).map(|(c, p)| c - t * p).collect()
}

fn check_descent(round: usize, previous: f64, current: f64) -> Result<()> {
    if current > previous + 1e-10 * previous.abs().max(1.0) {
        return Err(Error::BcdNoProgress {
            round,
            previous,
            current,
        });
    }
    Ok(())
}

fn cost_bcd_from(ctx: &Context<'_>, mut pi: Vec<f64>) -> Result<RunOutcome> {
    let cfg = ctx.cfg;
    let c0 = ctx.model.cost_flat();
    let mut c = c0.to_vec();
    let mut value = cost_bcd_objective(ctx.model, ctx.baseline, &c, &pi, cfg.gamma1, cfg.gamma2);
    let mut rounds = Vec::new();
    let mut solve = None;
    for round in 1..=cfg.bcd_max_rounds {
        let c_next = cost_step(c0, &pi, ctx.baseline, cfg.gamma1);
        let objective = TotalCostObjective {
            cost: &c_next,
            target: ctx.baseline,
            gamma: cfg.gamma2,
            marginal_weight: 1.0,
            n_actions: ctx.u(),
        };
        let start = within(&ctx.plan_set, &pi)?;
        let (pi_next, trace) = ctx.minimize(&objective, &ctx.plan_set, start)?;
        let next_value = cost_bcd_objective(
            ctx.model,
            ctx.baseline,
            &c_next,
            &pi_next,
            cfg.gamma1,
            cfg.gamma2,
        );
        check_descent(round, value, next_value)?;
        let displacement: f64 = c_next
            .iter()
            .zip(&c)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            + pi_next
                .iter()
                .zip(&pi)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        rounds.push(BcdRound {
            round,
            objective: next_value,
            displacement,
        });
        solve = Some(SolveSummary::from(&trace));
        c = c_next;
        pi = pi_next;
        value = next_value;
        if displacement <= cfg.bcd_threshold {
            break;
        }
    }
    Ok(RunOutcome {
        pi,
        param: Some(c),
        objective: value,
        best_start: 0,
        solve: solve.expect("at least one round"),
        rounds,
    })
}

fn cost_run(ctx: &Context<'_>, run: usize) -> Result<RunOutcome> {
    let mut rng = ctx.rng(run);
    let mut best = None;
    for start in 0..ctx.cfg.starts_per_run {
        let x0 = random_interior_plan(ctx, ctx.model.transition_flat(), &ctx.plan_set, &mut rng)?;
        let mut outcome = cost_bcd_from(ctx, x0)?;
        outcome.best_start = start;
        keep_best(&mut best, outcome);
    }
    Ok(best.expect("at least one start"))
}

/// Full transition objective with the smoothed ℓ1 term.
#[allow(clippy::too_many_arguments)]
pub fn transition_bcd_objective(
    model: &MdpModel,
    baseline: f64,
    transition: &[f64],
    pi: &[f64],
    gamma1: f64,
    gamma2: f64,
    smoothing: f64,
) -> f64 {
    let r = dot(model.cost_flat(), pi) - baseline;
    let step = TransitionObjective {
        reference: model.transition_flat(),
        gamma1,
        gamma2,
        smoothing,
    };
    let logs: f64 = pi
        .chunks(model.n_actions())
        .map(|row| row.iter().sum::<f64>().ln())
        .sum();
    let weight = model.n_pairs() as f64;
    r * r + Objective::value(&step, transition) + gamma2 * weight * logs
}

/// Per-entry lower bound for the transition step: the floor, or the original
/// entry when that is already smaller.
fn transition_lower(reference: &[f64], floor: f64) -> Vec<f64> {
    reference.iter().map(|p| p.min(floor)).collect()
}

const STAGE_ITERS: usize = 500;

/// Solves the transition step by Newton continuation on the smoothing width,
/// from `0.1` down to the configured value. The warm start is kept when the
/// result does not improve on it, and each stage restarts from the warm start
/// when that is better for the stage objective.
/// `x` moved back into `set` when it has drifted by roundoff. Iterates from
/// solves with large gradients keep the equalities only to `ε·‖step‖`, which
/// the next block's strict start check rejects.
fn within(set: &Polytope, x: &[f64]) -> Result<Vec<f64>> {
    if set.residual(x) <= 1e-12 {
        return Ok(x.to_vec());
    }
    let shifted = set.restore_equalities(x)?;
    if set.bound_violation(&shifted) == 0.0 {
        return Ok(shifted);
    }
    Projector::new(set).project_from(&set.feasible_point()?, x)
}

fn transition_step(
    step: &TransitionObjective<'_>,
    set: &Polytope,
    warm: &[f64],
    settings: &SolverSettings,
    line_search: LineSearch,
) -> Result<Vec<f64>> {
    let mut widths = Vec::new();
    let mut delta = 0.1_f64;
    while delta > settings.smoothing {
        widths.push(delta);
        delta *= 0.1;
    }
    widths.push(settings.smoothing);
    let warm = &within(set, warm)?[..];
    let mut x = warm.to_vec();
    for width in widths {
        let stage = TransitionObjective {
            smoothing: width,
            ..*step
        };
        if Objective::value(&stage, warm) < Objective::value(&stage, &x) {
            x = warm.to_vec();
        }
        x = newton_minimize(&NewtonProblem {
            objective: &stage,
            feasible_set: set,
            x0: x,
            tol: settings.tol,
            max_iters: settings.max_iters.min(STAGE_ITERS),
            line_search,
        })?
        .0;
    }
    if Objective::value(step, &x) <= Objective::value(step, warm) {
        Ok(x)
    } else {
        Ok(warm.to_vec())
    }
}

fn transition_bcd_from(ctx: &Context<'_>, mut pi: Vec<f64>) -> Result<RunOutcome> {
    let cfg = ctx.cfg;
    let s = &cfg.solver;
    let p0 = ctx.model.transition_flat();
    let lower = transition_lower(p0, s.floor);
    let mut p = p0.to_vec();
    let mut value = transition_bcd_objective(
        ctx.model,
        ctx.baseline,
        &p,
        &pi,
        cfg.gamma1,
        cfg.gamma2,
        s.smoothing,
    );
    let step = TransitionObjective {
        reference: p0,
        gamma1: cfg.gamma1,
        gamma2: cfg.gamma2,
        smoothing: s.smoothing,
    };
    let plan_objective = TotalCostObjective {
        cost: ctx.model.cost_flat(),
        target: ctx.baseline,
        gamma: cfg.gamma2,
        marginal_weight: ctx.model.n_pairs() as f64,
        n_actions: ctx.u(),
    };
    let mut rounds = Vec::new();
    let mut solve = None;
    for round in 1..=cfg.bcd_max_rounds {
        let p_set = transition_polytope(ctx.x(), ctx.u(), &pi, vec![0.0; p.len()])?;
        let p_next = within(
            &p_set,
            &transition_step(&step, &p_set, &p, s, cfg.line_search())?,
        )?;
        if let Some(k) = (0..p_next.len()).find(|&k| p_next[k] < lower[k]) {
            return Err(Error::NonPositiveEntry {
                context: "perturbed transition at the floor",
                value: p_next[k],
            });
        }
        let pi_set = plan_polytope(ctx.model, &p_next, s.floor)?;
        let start = within(&pi_set, &pi)?;
        let (pi_next, trace) = ctx.minimize(&plan_objective, &pi_set, start)?;
        let next_value = transition_bcd_objective(
            ctx.model,
            ctx.baseline,
            &p_next,
            &pi_next,
            cfg.gamma1,
            cfg.gamma2,
            s.smoothing,
        );
        check_descent(round, value, next_value)?;
        let displacement: f64 = p_next
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            + pi_next
                .iter()
                .zip(&pi)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        rounds.push(BcdRound {
            round,
            objective: next_value,
            displacement,
        });
        solve = Some(SolveSummary::from(&trace));
        p = p_next;
        pi = pi_next;
        value = next_value;
        if displacement <= cfg.bcd_threshold {
            break;
        }
    }
    Ok(RunOutcome {
        pi,
        param: Some(p),
        objective: value,
        best_start: 0,
        solve: solve.expect("at least one round"),
        rounds,
    })
}

fn transition_run(ctx: &Context<'_>, run: usize) -> Result<RunOutcome> {
    let mut rng = ctx.rng(run);
    let mut best = None;
    for start in 0..ctx.cfg.starts_per_run {
        let x0 = random_interior_plan(ctx, ctx.model.transition_flat(), &ctx.plan_set, &mut rng)?;
        let mut outcome = transition_bcd_from(ctx, x0)?;
        outcome.best_start = start;
        keep_best(&mut best, outcome);
    }
    Ok(best.expect("at least one start"))
}

fn param_perturbation(method: MaskingMethod, model: &MdpModel, param: Option<&[f64]>) -> f64 {
    match (method, param) {
        (MaskingMethod::Cost, Some(c)) => c
            .iter()
            .zip(model.cost_flat())
            .map(|(a, b)| (a - b).powi(2))
            .sum(),
        (MaskingMethod::Transition, Some(p)) => p
            .iter()
            .zip(model.transition_flat())
            .map(|(a, b)| (a - b).abs())
            .sum(),
        _ => 0.0,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn run_masking(
    method: MaskingMethod,
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
) -> Result<MaskingResult> {
    let ctx = Context::new(model, pi0, cfg)?;
    if pi0.n_states() != model.n_states() || pi0.n_actions() != model.n_actions() {
        return Err(Error::DimensionMismatch(
            "unmasked plan does not match the model".into(),
        ));
    }
    let solve_run = |run: usize| match method {
        MaskingMethod::Total => total_cost_run(&ctx, run),
        MaskingMethod::Cost => cost_run(&ctx, run),
        MaskingMethod::Transition => transition_run(&ctx, run),
        MaskingMethod::Entropy => entropy_run(&ctx, run),
    };
    let outcomes: Vec<RunOutcome> = (0..cfg.monte_carlo_runs)
        .into_par_iter()
        .map(solve_run)
        .collect::<Result<Vec<_>>>()?;

    let (x, u) = (model.n_states(), model.n_actions());
    let mut runs = Vec::with_capacity(outcomes.len());
    for (run, o) in outcomes.iter().enumerate() {
        let transition = match method {
            MaskingMethod::Transition => o.param.as_deref().expect("transition run"),
            _ => model.transition_flat(),
        };
        let report = fisher_report_raw(x, u, transition, &o.pi)?;
        let (sq, pct) = ctx.cost_gap(&o.pi);
        runs.push(RunRecord {
            run,
            best_start: o.best_start,
            objective: o.objective,
            log_det_paper: report.log_det_paper,
            log_det_oracle: report.log_det_oracle,
            cost_perturbation: sq,
            cost_perturbation_pct: pct,
            param_perturbation: param_perturbation(method, model, o.param.as_deref()),
            solve: o.solve.clone(),
            rounds: o.rounds.clone(),
        });
    }

    // entrywise average in run order
    let n_runs = outcomes.len() as f64;
    let mut pi_avg = vec![0.0; model.n_pairs()];
    let mut param_avg = outcomes[0].param.as_ref().map(|p| vec![0.0; p.len()]);
    for o in &outcomes {
        for (a, v) in pi_avg.iter_mut().zip(&o.pi) {
            *a += v / n_runs;
        }
        if let (Some(acc), Some(p)) = (param_avg.as_mut(), o.param.as_ref()) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v / n_runs;
            }
        }
    }
    let total: f64 = pi_avg.iter().sum();
    pi_avg.iter_mut().for_each(|v| *v /= total);

    let transition_in_force = match (method, param_avg.as_mut()) {
        (MaskingMethod::Transition, Some(p)) => {
            crate::mdp::renormalise_rows(p, x);
            p.clone()
        }
        _ => model.transition_flat().to_vec(),
    };
    let set = plan_polytope(model, &transition_in_force, cfg.solver.floor)?;
    let start = set.feasible_point()?;
    let pi_final = Projector::new(&set).project_from(&start, &pi_avg)?;
    let masked_pi = OccupationMeasure::with_tolerance(x, u, &transition_in_force, pi_final, 1e-8)?;
    let masked_policy = extract_policy(&masked_pi)?;
    let report = fisher_report_raw(x, u, &transition_in_force, masked_pi.as_slice())?;
    let (sq, pct) = ctx.cost_gap(masked_pi.as_slice());

    let run_means = RunMeans {
        log_det_paper: mean(runs.iter().map(|r| r.log_det_paper)),
        log_det_oracle: mean(runs.iter().map(|r| r.log_det_oracle)),
        cost_perturbation: mean(runs.iter().map(|r| r.cost_perturbation)),
        cost_perturbation_pct: mean(runs.iter().map(|r| r.cost_perturbation_pct)),
        param_perturbation: mean(runs.iter().map(|r| r.param_perturbation)),
    };
    Ok(MaskingResult {
        method,
        perturbed_cost: match method {
            MaskingMethod::Cost => param_avg.as_ref().map(|c| to_rows(c, u)),
            _ => None,
        },
        perturbed_transition: match method {
            MaskingMethod::Transition => Some(
                to_rows(&transition_in_force, x)
                    .chunks(u)
                    .map(<[Vec<f64>]>::to_vec)
                    .collect(),
            ),
            _ => None,
        },
        param_perturbation: param_perturbation(method, model, param_avg.as_deref()),
        masked_pi,
        masked_policy,
        total_cost_perturbation: sq,
        relative_cost_perturbation_pct: pct,
        log_det_paper: report.log_det_paper,
        log_det_oracle: report.log_det_oracle,
        run_means,
        runs,
    })
}

/// Masks by perturbing the total operation cost.
pub fn mask_total_cost(
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
) -> Result<MaskingResult> {
    run_masking(MaskingMethod::Total, model, pi0, cfg)
}

/// Masks by perturbing state-action costs (block coordinate descent).
pub fn mask_state_action_cost(
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
) -> Result<MaskingResult> {
    run_masking(MaskingMethod::Cost, model, pi0, cfg)
}

/// Masks by perturbing the transition tensor (block coordinate descent).
pub fn mask_transition(
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
) -> Result<MaskingResult> {
    run_masking(MaskingMethod::Transition, model, pi0, cfg)
}

/// Entropy-promoting baseline.
pub fn mask_max_entropy(
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
) -> Result<MaskingResult> {
    run_masking(MaskingMethod::Entropy, model, pi0, cfg)
}

pub fn mask(
    method: MaskingMethod,
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
) -> Result<MaskingResult> {
    run_masking(method, model, pi0, cfg)
}

/// Runs one descent masker from a given plan and returns its round log.
/// Exposed for convergence diagnostics.
pub fn bcd_rounds(
    method: MaskingMethod,
    model: &MdpModel,
    pi0: &OccupationMeasure,
    cfg: &MaskingConfig,
    start: Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<BcdRound>)> {
    let ctx = Context::new(model, pi0, cfg)?;
    let outcome = match method {
        MaskingMethod::Cost => cost_bcd_from(&ctx, start)?,
        MaskingMethod::Transition => transition_bcd_from(&ctx, start)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{} masking has no descent rounds",
                method.name()
            )))
        }
    };
    Ok((
        outcome.pi,
        outcome.param.expect("descent parameters"),
        outcome.rounds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::solve_average_cost_lp;

    fn small_model() -> MdpModel {
        MdpModel::new(
            2,
            2,
            &[
                vec![vec![0.3, 0.7], vec![0.6, 0.4]],
                vec![vec![0.2, 0.8], vec![0.5, 0.5]],
            ],
            &[vec![1.0, 2.0], vec![0.5, 1.5]],
        )
        .unwrap()
    }

    fn quick(gamma: f64) -> MaskingConfig {
        MaskingConfig {
            gamma,
            gamma1: 1.0,
            gamma2: gamma,
            monte_carlo_runs: 3,
            starts_per_run: 2,
            ..MaskingConfig::default()
        }
    }

    #[test]
    fn cost_step_is_stationary() {
        let c0 = [1.0, 2.0, 0.5];
        let pi = [0.2, 0.3, 0.5];
        let c = cost_step(&c0, &pi, 1.1, 0.7);
        let r = dot(&c, &pi) - 1.1;
        for k in 0..3 {
            let g = 2.0 * r * pi[k] + 2.0 * 0.7 * (c[k] - c0[k]);
            assert!(g.abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gamma_keeps_cost() {
        let m = small_model();
        let pi0 = solve_average_cost_lp(&m).unwrap();
        let res = mask_total_cost(&m, &pi0, &quick(0.0)).unwrap();
        let base = average_cost(&pi0, &m).unwrap();
        assert!((average_cost(&res.masked_pi, &m).unwrap() - base).abs() < 1e-6);
        assert!(res.total_cost_perturbation < 1e-12);
    }

    #[test]
    fn deterministic_across_calls() {
        let m = small_model();
        let pi0 = solve_average_cost_lp(&m).unwrap();
        let a = mask_total_cost(&m, &pi0, &quick(0.05)).unwrap();
        let b = mask_total_cost(&m, &pi0, &quick(0.05)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let m = small_model();
        let pi0 = solve_average_cost_lp(&m).unwrap();
        let cfg = MaskingConfig {
            gamma: -1.0,
            ..quick(0.0)
        };
        assert!(matches!(
            mask_total_cost(&m, &pi0, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn result_round_trips_through_json() {
        let m = small_model();
        let pi0 = solve_average_cost_lp(&m).unwrap();
        let res = mask_max_entropy(&m, &pi0, &quick(0.1)).unwrap();
        let json = serde_json::to_string(&res).unwrap();
        let back: MaskingResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.masked_pi.as_slice(), res.masked_pi.as_slice());
        assert_eq!(back.masked_policy, res.masked_policy);
    }
}
