//! Radar mode-switching scenario.
//!
//! States are uniform SINR bins, represented by their midpoints in dB.
//! Actions are radar modes. Operation cost falls with SINR through
//! `c(i,u) = (1 − tanh(ρ_i/χ))·C_u`; transitions favour lower-SINR bins
//! through the softmax `P_ij(u) ∝ exp(K_i t_u (ρ_i − ρ_j))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::MdpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub sinr_min_db: f64,
    pub sinr_max_db: f64,
    pub n_states: usize,
    pub chi: f64,
    pub c_u: Vec<f64>,
    pub k_i: Vec<f64>,
    pub t_u: Vec<f64>,
    pub action_names: Vec<String>,
}

pub const DEFAULT_CHI: f64 = 10.0;
pub const CHI_SWEEP: [f64; 3] = [2.0, 10.0, 50.0];

pub const ACTION_NAMES: [&str; 4] = [
    "Fine Scanning",
    "Coarse Scanning",
    "Fine Tracking",
    "Coarse Tracking",
];

impl ScenarioParams {
    /// Ten 3.5 dB bins over 0–35 dB with the reference radar parameters.
    pub fn paper_default(chi: f64) -> Self {
        Self {
            sinr_min_db: 0.0,
            sinr_max_db: 35.0,
            n_states: 10,
            chi,
            c_u: vec![0.606, 0.407, 0.977, 0.465],
            k_i: vec![
                0.0040, 0.0210, 0.0960, 0.1310, 0.2130, 0.5020, 0.5280, 0.7910, 0.8450, 0.8500,
            ],
            t_u: vec![0.083, 0.413, 0.590, 0.928],
            action_names: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.c_u.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.sinr_min_db < self.sinr_max_db) || !self.sinr_max_db.is_finite() {
            return bad(format!(
                "SINR range [{}, {}] is empty",
                self.sinr_min_db, self.sinr_max_db
            ));
        }
        if self.n_states < 2 {
            return bad(format!("need at least 2 SINR bins, got {}", self.n_states));
        }
        if !(self.chi > 0.0 && self.chi.is_finite()) {
            return bad(format!("chi must be positive, got {}", self.chi));
        }
        if self.c_u.is_empty() || self.c_u.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return bad("every C_u must be positive".into());
        }
        if self.t_u.len() != self.c_u.len() || self.action_names.len() != self.c_u.len() {
            return bad(format!(
                "{} action costs, {} processing factors, {} action names",
                self.c_u.len(),
                self.t_u.len(),
                self.action_names.len()
            ));
        }
        if self.t_u.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return bad("every t_u must be non-negative".into());
        }
        if self.k_i.len() != self.n_states {
            return bad(format!(
                "{} K_i values for {} states",
                self.k_i.len(),
                self.n_states
            ));
        }
        if self.k_i.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return bad("every K_i must be non-negative".into());
        }
        if self.k_i.windows(2).any(|w| w[1] < w[0]) {
            return bad("K_i must be non-decreasing in SINR".into());
        }
        Ok(())
    }

    /// Bin midpoints in dB.
    pub fn sinr_midpoints(&self) -> Vec<f64> {
        let width = (self.sinr_max_db - self.sinr_min_db) / self.n_states as f64;
        (0..self.n_states)
            .map(|i| self.sinr_min_db + (i as f64 + 0.5) * width)
            .collect()
    }

    /// `(lower, upper)` edges of each bin in dB.
    pub fn sinr_bins(&self) -> Vec<(f64, f64)> {
        let width = (self.sinr_max_db - self.sinr_min_db) / self.n_states as f64;
        (0..self.n_states)
            .map(|i| {
                let lo = self.sinr_min_db + i as f64 * width;
                (lo, lo + width)
            })
            .collect()
    }
}

/// Cost matrix `c[i][u]`.
pub fn build_cost(params: &ScenarioParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    Ok(params
        .sinr_midpoints()
        .iter()
        .map(|rho| {
            let c_rho = 1.0 - (rho / params.chi).tanh();
            params.c_u.iter().map(|c| c_rho * c).collect()
        })
        .collect())
}

/// Transition tensor `P[i][u][j]`.
pub fn build_transition(params: &ScenarioParams) -> Result<Vec<Vec<Vec<f64>>>> {
    params.validate()?;
    let rho = params.sinr_midpoints();
    Ok((0..params.n_states)
        .map(|i| {
            params
                .t_u
                .iter()
                .map(|t| softmax_row(params.k_i[i] * t, rho[i], &rho))
                .collect()
        })
        .collect())
}

fn softmax_row(rate: f64, from: f64, rho: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = rho.iter().map(|r| rate * (from - r)).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

pub fn build_model(params: &ScenarioParams) -> Result<MdpModel> {
    let transition = build_transition(params)?;
    let cost = build_cost(params)?;
    MdpModel::new(params.n_states, params.n_actions(), &transition, &cost)
}

/// The reference 10-state, 4-action radar model at cost rate `chi`.
pub fn paper_default_scenario(chi: f64) -> Result<(MdpModel, ScenarioParams)> {
    let params = ScenarioParams::paper_default(chi);
    Ok((build_model(&params)?, params))
}
