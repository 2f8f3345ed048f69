//! Augmented state-action chain and the adversary's Fisher information.
//!
//! The adversary watches pairs `y_k = (x_k, u_k)`. Under a stationary policy
//! these form a Markov chain on `S = |X||U|` states with transition matrix
//! `A[iu][ju'] = μ(u'|j)·P_ij(u)`, whose stationary vector is the flattened
//! occupation measure. The free parameters are the first `S − 1` entries of
//! each row of `A`; the last entry of a row is the dependent one. With that
//! convention the FIM is block diagonal with blocks
//! `F_m = a_m (diag(1/a_mn) + 1/a_mS · 11ᵀ)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{stationary_vector, strongly_connected};
use crate::mdp::{MdpModel, OccupationMeasure, STOCHASTIC_TOL};

/// Smallest value accepted inside a logarithm.
pub const LOG_FLOOR: f64 = 1e-300;

/// Row-stochastic matrix over state-action pairs, indexed `m = i·|U| + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedChain {
    n_states: usize,
    n_actions: usize,
    a: DMatrix<f64>,
}

impl AugmentedChain {
    /// Wraps a square row-stochastic matrix; `n_states·n_actions` must equal
    /// its size. A plain Markov chain is the case `n_actions = 1`.
    pub fn from_matrix(a: DMatrix<f64>, n_states: usize, n_actions: usize) -> Result<Self> {
        let s = a.nrows();
        if s == 0 || a.ncols() != s || n_states * n_actions != s {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} chain for {n_states} states and {n_actions} actions",
                a.nrows(),
                a.ncols()
            )));
        }
        for (m, row) in a.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidModel(format!("row {m} has a negative entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidModel(format!("row {m} sums to {total}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            a,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let s = rows.len();
        if rows.iter().any(|r| r.len() != s) {
            return Err(Error::DimensionMismatch("chain rows are ragged".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_matrix(DMatrix::from_row_slice(s, s, &flat), s, 1)
    }

    pub fn size(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn entry(&self, m: usize, n: usize) -> f64 {
        self.a[(m, n)]
    }

    fn check_positive(&self) -> Result<()> {
        match self.a.iter().copied().find(|v| !(*v >= LOG_FLOOR)) {
            Some(value) => Err(Error::NonPositiveEntry {
                context: "augmented chain",
                value,
            }),
            None => Ok(()),
        }
    }
}

/// Builds `A` from a model and an occupation measure.
pub fn augment(model: &MdpModel, pi: &OccupationMeasure) -> Result<AugmentedChain> {
    if pi.n_states() != model.n_states() || pi.n_actions() != model.n_actions() {
        return Err(Error::DimensionMismatch(format!(
            "occupation measure is {}x{}, model is {}x{}",
            pi.n_states(),
            pi.n_actions(),
            model.n_states(),
            model.n_actions()
        )));
    }
    augment_raw(
        model.n_states(),
        model.n_actions(),
        model.transition_flat(),
        pi.as_slice(),
    )
}

/// [`augment`] on a flat transition tensor `P[(i·U + u)·X + j]` and a flat
/// occupation vector. Used when the transition tensor is being perturbed.
pub fn augment_raw(
    n_states: usize,
    n_actions: usize,
    transition: &[f64],
    pi: &[f64],
) -> Result<AugmentedChain> {
    let s = n_states * n_actions;
    if transition.len() != s * n_states || pi.len() != s {
        return Err(Error::DimensionMismatch(format!(
            "transition of length {} and occupation of length {} for {n_states}x{n_actions}",
            transition.len(),
            pi.len()
        )));
    }
    let mut policy = vec![0.0; s];
    for j in 0..n_states {
        let row = &pi[j * n_actions..(j + 1) * n_actions];
        let mass: f64 = row.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::ZeroStateMass { state: j });
        }
        for (u, v) in row.iter().enumerate() {
            policy[j * n_actions + u] = v / mass;
        }
    }
    let mut a = DMatrix::zeros(s, s);
    for m in 0..s {
        let p = &transition[m * n_states..(m + 1) * n_states];
        for j in 0..n_states {
            for u2 in 0..n_actions {
                a[(m, j * n_actions + u2)] = p[j] * policy[j * n_actions + u2];
            }
        }
    }
    AugmentedChain::from_matrix(a, n_states, n_actions)
}

/// Stationary vector of an irreducible chain.
pub fn stationary_distribution(chain: &AugmentedChain) -> Result<Vec<f64>> {
    if !strongly_connected(&chain.a) {
        return Err(Error::NotIrreducible);
    }
    stationary_vector(&chain.a)
}

/// `(marginal_term, transition_term)` of the closed-form log-determinant:
/// `|X||U|²·Σ_i log Σ_u π(i,u)` and `|U|·Σ log P_ij(u)`.
pub fn log_det_paper_terms(
    n_states: usize,
    n_actions: usize,
    transition: &[f64],
    pi: &[f64],
) -> Result<(f64, f64)> {
    let s = n_states * n_actions;
    if transition.len() != s * n_states || pi.len() != s {
        return Err(Error::DimensionMismatch(format!(
            "transition of length {} and occupation of length {} for {n_states}x{n_actions}",
            transition.len(),
            pi.len()
        )));
    }
    let mut log_marginals = 0.0;
    for row in pi.chunks(n_actions) {
        let mass: f64 = row.iter().sum();
        if !(mass >= LOG_FLOOR) {
            return Err(Error::NonPositiveEntry {
                context: "state marginal",
                value: mass,
            });
        }
        log_marginals += mass.ln();
    }
    let mut log_p = 0.0;
    for &p in transition {
        if !(p >= LOG_FLOOR) {
            return Err(Error::NonPositiveEntry {
                context: "transition probability",
                value: p,
            });
        }
        log_p += p.ln();
    }
    let (x, u) = (n_states as f64, n_actions as f64);
    Ok((x * u * u * log_marginals, u * log_p))
}

/// Closed-form log-determinant of the adversary's FIM as a function of the
/// plan and the transition tensor.
pub fn log_det_fim_paper(pi: &OccupationMeasure, model: &MdpModel) -> Result<f64> {
    if pi.n_states() != model.n_states() || pi.n_actions() != model.n_actions() {
        return Err(Error::DimensionMismatch(
            "occupation measure and model disagree in shape".into(),
        ));
    }
    let (marginal, transition) = log_det_paper_terms(
        model.n_states(),
        model.n_actions(),
        model.transition_flat(),
        pi.as_slice(),
    )?;
    Ok(marginal - transition)
}

/// Block-diagonal FIM, one `(S−1)×(S−1)` block per chain row.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonal {
    blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagonal {
    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut dense = DMatrix::zeros(n, n);
        let mut offset = 0;
        for b in &self.blocks {
            let k = b.nrows();
            dense.view_mut((offset, offset), (k, k)).copy_from(b);
            offset += k;
        }
        dense
    }

    /// Log-determinant through a Cholesky factor of each block.
    pub fn log_det(&self) -> Result<f64> {
        let mut total = 0.0;
        for b in &self.blocks {
            if b.nrows() == 0 {
                continue;
            }
            let chol = b.clone().cholesky().ok_or(Error::NonPositiveEntry {
                context: "Fisher information block pivot",
                value: 0.0,
            })?;
            total += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        Ok(total)
    }
}

/// Assembles the FIM of a positive chain at its stationary distribution.
pub fn assemble_fim(chain: &AugmentedChain) -> Result<BlockDiagonal> {
    chain.check_positive()?;
    let a = stationary_distribution(chain)?;
    let k = chain.size() - 1;
    let blocks = (0..chain.size())
        .map(|m| fim_block(chain, a[m], m, k))
        .collect();
    Ok(BlockDiagonal { blocks })
}

/// FIM block of row `m` with column `dependent` as the dependent entry.
fn fim_block(chain: &AugmentedChain, weight: f64, m: usize, dependent: usize) -> DMatrix<f64> {
    let k = chain.size() - 1;
    let free: Vec<usize> = (0..chain.size()).filter(|&n| n != dependent).collect();
    let last = chain.a[(m, dependent)];
    DMatrix::from_fn(k, k, |p, q| {
        let diag = if p == q {
            1.0 / chain.a[(m, free[p])]
        } else {
            0.0
        };
        weight * (diag + 1.0 / last)
    })
}

/// Log-determinant of the assembled FIM; `0.0` for a one-state chain.
///
/// Each block is factored with the row's largest entry as the dependent
/// one. Switching the dependent entry is a unimodular change of free
/// parameters, so the determinant is unchanged, but the rank-one part stays
/// bounded and the Cholesky factor does not lose the diagonal to
/// cancellation when the last entry of a row is tiny.
pub fn log_det_fim_oracle(chain: &AugmentedChain) -> Result<f64> {
    chain.check_positive()?;
    let a = stationary_distribution(chain)?;
    let blocks = (0..chain.size())
        .map(|m| {
            let row = chain.a.row(m);
            let dependent =
                (0..row.len()).fold(0, |best, n| if row[n] > row[best] { n } else { best });
            fim_block(chain, a[m], m, dependent)
        })
        .collect();
    BlockDiagonal { blocks }.log_det()
}

/// Central-difference Hessian of the negated expected one-step
/// log-likelihood `ℓ(θ) = Σ_m a_m Σ_n a_mn log a_mn(θ)`, with the weights
/// `a_m a_mn` frozen at the evaluation point and `θ` the first `S − 1`
/// entries of each row.
pub fn fim_finite_difference_oracle(chain: &AugmentedChain, h: f64) -> Result<DMatrix<f64>> {
    let min_entry = chain.a.iter().copied().fold(f64::INFINITY, f64::min);
    if !(1e-6..=1e-3).contains(&h) || !(min_entry >= 10.0 * h) {
        return Err(Error::StepTooLarge { h, min_entry });
    }
    let a = stationary_distribution(chain)?;
    let s = chain.size();
    let k = s - 1;
    let dim = s * k;

    // change in ℓ when the free entries listed in `moves` are shifted; each
    // shifted entry also moves the dependent entry of its row
    let delta = |moves: &[(usize, f64)]| -> f64 {
        let mut rows: Vec<usize> = moves.iter().map(|(p, _)| p / k).collect();
        rows.dedup();
        let mut total = 0.0;
        for m in rows {
            let mut shift_last = 0.0;
            let mut row_sum = 0.0;
            for &(p, d) in moves.iter().filter(|(p, _)| p / k == m) {
                let n = p % k;
                let base = chain.a[(m, n)];
                row_sum += base * (d / base).ln_1p();
                shift_last -= d;
            }
            let last = chain.a[(m, k)];
            row_sum += last * (shift_last / last).ln_1p();
            total += a[m] * row_sum;
        }
        total
    };

    let mut f = DMatrix::zeros(dim, dim);
    for p in 0..dim {
        let plus = delta(&[(p, h)]);
        let minus = delta(&[(p, -h)]);
        f[(p, p)] = -(plus + minus) / (h * h);
        for q in p + 1..dim {
            let pp = delta(&[(p, h), (q, h)]);
            let pm = delta(&[(p, h), (q, -h)]);
            let mp = delta(&[(p, -h), (q, h)]);
            let mm = delta(&[(p, -h), (q, -h)]);
            let v = -(pp - pm - mp + mm) / (4.0 * h * h);
            f[(p, q)] = v;
            f[(q, p)] = v;
        }
    }
    Ok(f)
}

/// Both log-determinant trackers for one plan, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub log_det_paper: f64,
    pub log_det_oracle: f64,
    pub stationary: Vec<f64>,
    pub marginal_term: f64,
    pub transition_term: f64,
}

pub fn fisher_report(model: &MdpModel, pi: &OccupationMeasure) -> Result<FisherReport> {
    fisher_report_raw(
        model.n_states(),
        model.n_actions(),
        model.transition_flat(),
        pi.as_slice(),
    )
}

pub fn fisher_report_raw(
    n_states: usize,
    n_actions: usize,
    transition: &[f64],
    pi: &[f64],
) -> Result<FisherReport> {
    let (marginal_term, transition_term) =
        log_det_paper_terms(n_states, n_actions, transition, pi)?;
    let chain = augment_raw(n_states, n_actions, transition, pi)?;
    let stationary = stationary_distribution(&chain)?;
    let log_det_oracle = log_det_fim_oracle(&chain)?;
    Ok(FisherReport {
        log_det_paper: marginal_term - transition_term,
        log_det_oracle,
        stationary,
        marginal_term,
        transition_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn half_chain() -> AugmentedChain {
        AugmentedChain::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn single_action_augment_is_p() {
        let m = MdpModel::new(
            2,
            1,
            &[vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            &[vec![1.0], vec![3.0]],
        )
        .unwrap();
        let pi = OccupationMeasure::new(&m, vec![0.5, 0.5]).unwrap();
        let chain = augment(&m, &pi).unwrap();
        assert_eq!(chain.matrix(), half_chain().matrix());
    }

    #[test]
    fn one_state_two_actions() {
        let m = MdpModel::new(1, 2, &[vec![vec![1.0], vec![1.0]]], &[vec![0.0, 1.0]]).unwrap();
        let pi = OccupationMeasure::new(&m, vec![0.5, 0.5]).unwrap();
        let chain = augment(&m, &pi).unwrap();
        assert!(chain.matrix().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn stationary_examples() {
        assert_eq!(
            stationary_distribution(&half_chain()).unwrap(),
            vec![0.5, 0.5]
        );
        let c = AugmentedChain::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let a = stationary_distribution(&c).unwrap();
        assert_abs_diff_eq!(a[0], 5.0 / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a[1], 1.0 / 6.0, epsilon = 1e-14);
        let id = AugmentedChain::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(stationary_distribution(&id), Err(Error::NotIrreducible));
    }

    #[test]
    fn simplified_form_trivial_cases() {
        let (m, t) = log_det_paper_terms(1, 1, &[1.0], &[1.0]).unwrap();
        assert_eq!(m - t, 0.0);
        let (m, t) = log_det_paper_terms(2, 1, &[0.5; 4], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(m - t, 0.0, epsilon = 1e-14);
        assert!(matches!(
            log_det_paper_terms(2, 1, &[1.0, 0.0, 0.5, 0.5], &[0.5, 0.5]),
            Err(Error::NonPositiveEntry { .. })
        ));
    }

    #[test]
    fn assembled_examples() {
        let f = assemble_fim(&half_chain()).unwrap().to_dense();
        assert_abs_diff_eq!(
            f,
            DMatrix::from_diagonal_element(2, 2, 2.0),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            log_det_fim_oracle(&half_chain()).unwrap(),
            4f64.ln(),
            epsilon = 1e-14
        );

        let third = vec![1.0 / 3.0; 3];
        let c = AugmentedChain::from_rows(&[third.clone(), third.clone(), third]).unwrap();
        for b in assemble_fim(&c).unwrap().blocks() {
            assert_abs_diff_eq!(
                *b,
                DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
                epsilon = 1e-12
            );
        }

        let single = AugmentedChain::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(log_det_fim_oracle(&single).unwrap(), 0.0);
    }

    #[test]
    fn finite_difference_examples() {
        let f = fim_finite_difference_oracle(&half_chain(), 1e-5).unwrap();
        assert_abs_diff_eq!(f, DMatrix::from_diagonal_element(2, 2, 2.0), epsilon = 1e-4);
        let c = AugmentedChain::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let fd = fim_finite_difference_oracle(&c, 1e-5).unwrap();
        assert_abs_diff_eq!(fd, assemble_fim(&c).unwrap().to_dense(), epsilon = 1e-4);
        assert!(matches!(
            fim_finite_difference_oracle(&c, 0.02),
            Err(Error::StepTooLarge { .. })
        ));
        assert!(matches!(
            fim_finite_difference_oracle(&c, 1e-7),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn zero_entries_rejected() {
        let c = AugmentedChain::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(stationary_distribution(&c).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            assemble_fim(&c),
            Err(Error::NonPositiveEntry { .. })
        ));
    }

    #[test]
    fn report_terms_are_consistent() {
        let m = MdpModel::new(
            2,
            2,
            &[
                vec![vec![0.3, 0.7], vec![0.6, 0.4]],
                vec![vec![0.2, 0.8], vec![0.5, 0.5]],
            ],
            &[vec![1.0, 2.0], vec![0.5, 1.5]],
        )
        .unwrap();
        let policy = crate::mdp::Policy::from_rows(&[vec![0.4, 0.6], vec![0.7, 0.3]]).unwrap();
        let pi = m.occupation_of(&policy).unwrap();
        let r = fisher_report(&m, &pi).unwrap();
        assert_eq!(r.log_det_paper, r.marginal_term - r.transition_term);
        for (x, y) in r.stationary.iter().zip(pi.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let json = serde_json::to_string(&r).unwrap();
        let back: FisherReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
