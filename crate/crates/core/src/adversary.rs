//! Simulated adversary.
//!
//! The adversary observes a state-action trajectory, counts transitions
//! between consecutive pairs, and forms the maximum-likelihood estimate
//! `â_mn = N_mn / N_m` of the augmented chain. Transition and policy
//! estimates follow by inverting `A[iu][ju'] = μ(u'|j)·P_ij(u)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{augment, stationary_distribution};
use crate::mdp::{MdpModel, Policy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Number of observed transitions; both sequences hold `n_steps + 1`
    /// entries.
    pub n_steps: usize,
    pub seed: u64,
    pub stream: u64,
}

struct Sampler {
    actions: Vec<WeightedIndex<f64>>,
    next: Vec<WeightedIndex<f64>>,
    n_actions: usize,
}

impl Sampler {
    fn new(model: &MdpModel, policy: &Policy) -> Result<Self> {
        if policy.n_states() != model.n_states() || policy.n_actions() != model.n_actions() {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, model is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                model.n_states(),
                model.n_actions()
            )));
        }
        let weights = |row: &[f64]| {
            WeightedIndex::new(row.iter().copied())
                .map_err(|e| Error::InvalidArgument(format!("cannot sample from row: {e}")))
        };
        let actions = (0..model.n_states())
            .map(|i| weights(policy.row(i)))
            .collect::<Result<_>>()?;
        let next = (0..model.n_states())
            .flat_map(|i| (0..model.n_actions()).map(move |u| (i, u)))
            .map(|(i, u)| weights(model.transition_row(i, u)))
            .collect::<Result<_>>()?;
        Ok(Self {
            actions,
            next,
            n_actions: model.n_actions(),
        })
    }

    fn run(&self, rng: &mut ChaCha8Rng, x0: usize, n_steps: usize) -> (Vec<usize>, Vec<usize>) {
        let mut states = Vec::with_capacity(n_steps + 1);
        let mut actions = Vec::with_capacity(n_steps + 1);
        let mut x = x0;
        for k in 0..=n_steps {
            let u = self.actions[x].sample(rng);
            states.push(x);
            actions.push(u);
            if k < n_steps {
                x = self.next[x * self.n_actions + u].sample(rng);
            }
        }
        (states, actions)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples `n_steps` transitions of the state-action process from `x0`.
pub fn sample_trajectory(
    model: &MdpModel,
    policy: &Policy,
    n_steps: usize,
    seed: u64,
    x0: usize,
) -> Result<TrajectorySample> {
    sample_trajectory_stream(model, policy, n_steps, seed, 0, x0)
}

/// [`sample_trajectory`] on RNG stream `stream` of `seed`.
pub fn sample_trajectory_stream(
    model: &MdpModel,
    policy: &Policy,
    n_steps: usize,
    seed: u64,
    stream: u64,
    x0: usize,
) -> Result<TrajectorySample> {
    if x0 >= model.n_states() {
        return Err(Error::InvalidArgument(format!(
            "initial state {x0} out of range for {} states",
            model.n_states()
        )));
    }
    let sampler = Sampler::new(model, policy)?;
    let (states, actions) = sampler.run(&mut stream_rng(seed, stream), x0, n_steps);
    Ok(TrajectorySample {
        states,
        actions,
        n_steps,
        seed,
        stream,
    })
}

/// Maximum-likelihood estimate with the quantities derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryEstimate {
    pub n_states: usize,
    pub n_actions: usize,
    /// `N_mn`, row-major `S×S`.
    pub visit_counts: Vec<u64>,
    /// `â_mn`, row-major `S×S`; unvisited rows are all zero.
    pub a_hat: Vec<f64>,
    /// `P̂[(i·U + u)·X + j]`; unvisited rows are all zero.
    pub p_hat: Vec<f64>,
    /// Count-weighted `μ̂[j·U + u']`; rows of never-entered states are zero.
    pub policy_hat: Vec<f64>,
    pub sample_size: usize,
}

impl AdversaryEstimate {
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn row_count(&self, m: usize) -> u64 {
        let s = self.n_pairs();
        self.visit_counts[m * s..(m + 1) * s].iter().sum()
    }

    pub fn is_visited(&self, m: usize) -> bool {
        self.row_count(m) > 0
    }

    pub fn unvisited_rows(&self) -> Vec<(usize, usize)> {
        (0..self.n_pairs())
            .filter(|&m| !self.is_visited(m))
            .map(|m| (m / self.n_actions, m % self.n_actions))
            .collect()
    }

    pub fn a_hat_matrix(&self) -> DMatrix<f64> {
        let s = self.n_pairs();
        DMatrix::from_row_slice(s, s, &self.a_hat)
    }
}

/// Counts transitions between consecutive pairs and normalises each row.
pub fn mle_estimate(
    sample: &TrajectorySample,
    n_states: usize,
    n_actions: usize,
) -> Result<AdversaryEstimate> {
    if sample.states.len() < 2 || sample.actions.len() != sample.states.len() {
        return Err(Error::EmptySample);
    }
    let s = n_states * n_actions;
    if sample
        .states
        .iter()
        .zip(&sample.actions)
        .any(|(&x, &u)| x >= n_states || u >= n_actions)
    {
        return Err(Error::InvalidArgument(
            "trajectory index out of range".into(),
        ));
    }
    let mut counts = vec![0u64; s * s];
    let pairs: Vec<usize> = sample
        .states
        .iter()
        .zip(&sample.actions)
        .map(|(&x, &u)| x * n_actions + u)
        .collect();
    for w in pairs.windows(2) {
        counts[w[0] * s + w[1]] += 1;
    }
    Ok(estimate_from_counts(
        n_states,
        n_actions,
        counts,
        pairs.len() - 1,
    ))
}

/// Estimate from a row-major `S×S` matrix of transition counts.
pub fn estimate_from_counts(
    n_states: usize,
    n_actions: usize,
    counts: Vec<u64>,
    sample_size: usize,
) -> AdversaryEstimate {
    let s = n_states * n_actions;
    let mut a_hat = vec![0.0; s * s];
    let mut p_hat = vec![0.0; s * n_states];
    for m in 0..s {
        let row = &counts[m * s..(m + 1) * s];
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        for n in 0..s {
            let v = row[n] as f64 / total as f64;
            a_hat[m * s + n] = v;
            p_hat[m * n_states + n / n_actions] += v;
        }
    }
    // μ̂(u'|j): entries into pair (j,u') over entries into state j, pooled
    // over source rows
    let mut policy_hat = vec![0.0; s];
    for j in 0..n_states {
        let into = |u: usize| -> u64 { (0..s).map(|m| counts[m * s + j * n_actions + u]).sum() };
        let per_action: Vec<u64> = (0..n_actions).map(into).collect();
        let total: u64 = per_action.iter().sum();
        if total > 0 {
            for (u, c) in per_action.iter().enumerate() {
                policy_hat[j * n_actions + u] = *c as f64 / total as f64;
            }
        }
    }
    AdversaryEstimate {
        n_states,
        n_actions,
        visit_counts: counts,
        a_hat,
        p_hat,
        policy_hat,
        sample_size,
    }
}

/// Nested `(P̂[i][u][j], μ̂[j][u])`; every row must have been observed.
pub fn extract_estimates(est: &AdversaryEstimate) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    let (x, u) = (est.n_states, est.n_actions);
    if let Some(&(state, action)) = est.unvisited_rows().first() {
        return Err(Error::UnvisitedRow { state, action });
    }
    for j in 0..x {
        if est.policy_hat[j * u..(j + 1) * u].iter().all(|v| *v == 0.0) {
            return Err(Error::UnvisitedRow {
                state: j,
                action: 0,
            });
        }
    }
    let p = (0..x)
        .map(|i| {
            (0..u)
                .map(|a| est.p_hat[(i * u + a) * x..(i * u + a + 1) * x].to_vec())
                .collect()
        })
        .collect();
    let mu = est.policy_hat.chunks(u).map(<[f64]>::to_vec).collect();
    Ok((p, mu))
}

/// `Σ_{i,u} ½‖P̂_i·(u) − P_i·(u)‖₁`.
pub fn tv_error(p_hat: &[Vec<Vec<f64>>], p_true: &[Vec<Vec<f64>>]) -> Result<f64> {
    let shape = |t: &[Vec<Vec<f64>>]| -> Vec<Vec<usize>> {
        t.iter().map(|r| r.iter().map(Vec::len).collect()).collect()
    };
    if shape(p_hat) != shape(p_true) {
        return Err(Error::DimensionMismatch(
            "estimated and true transition tensors differ in shape".into(),
        ));
    }
    Ok(0.5
        * p_hat
            .iter()
            .flatten()
            .flatten()
            .zip(p_true.iter().flatten().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// Plain ℓ1 distance, twice [`tv_error`].
pub fn l1_error(p_hat: &[Vec<Vec<f64>>], p_true: &[Vec<Vec<f64>>]) -> Result<f64> {
    tv_error(p_hat, p_true).map(|tv| 2.0 * tv)
}

/// TV error summed over observed rows only, with the number of rows left out.
pub fn visited_tv_error(est: &AdversaryEstimate, model: &MdpModel) -> Result<(f64, usize)> {
    if est.n_states != model.n_states() || est.n_actions != model.n_actions() {
        return Err(Error::DimensionMismatch(
            "estimate and model differ in shape".into(),
        ));
    }
    let x = est.n_states;
    let mut tv = 0.0;
    let mut missing = 0;
    for m in 0..est.n_pairs() {
        if !est.is_visited(m) {
            missing += 1;
            continue;
        }
        let truth = &model.transition_flat()[m * x..(m + 1) * x];
        let hat = &est.p_hat[m * x..(m + 1) * x];
        tv += 0.5
            * hat
                .iter()
                .zip(truth)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
    }
    Ok((tv, missing))
}

/// Draws the initial state from the stationary state marginal.
fn stationary_start(model: &MdpModel, policy: &Policy, rng: &mut ChaCha8Rng) -> Result<usize> {
    let d = crate::linalg::stationary_vector(&model.state_chain(policy)?)?;
    let w = WeightedIndex::new(d.iter().map(|v| v.max(0.0)))
        .map_err(|e| Error::InvalidArgument(format!("stationary marginal: {e}")))?;
    Ok(w.sample(rng))
}

/// One row of the per-run error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub run: usize,
    pub n_steps: usize,
    pub tv_error: f64,
    pub l1_error: f64,
    pub unvisited_rows: usize,
}

/// Transition-estimate errors over `n_runs` trajectories; run `r` uses RNG
/// stream `r` of `seed` and starts from a stationary draw.
pub fn estimation_errors(
    model: &MdpModel,
    policy: &Policy,
    n_steps: usize,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<ErrorSample>> {
    let sampler = Sampler::new(model, policy)?;
    (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream_rng(seed, run as u64);
            let x0 = stationary_start(model, policy, &mut rng)?;
            let (states, actions) = sampler.run(&mut rng, x0, n_steps);
            let sample = TrajectorySample {
                states,
                actions,
                n_steps,
                seed,
                stream: run as u64,
            };
            let est = mle_estimate(&sample, model.n_states(), model.n_actions())?;
            let (tv, missing) = visited_tv_error(&est, model)?;
            Ok(ErrorSample {
                run,
                n_steps,
                tv_error: tv,
                l1_error: 2.0 * tv,
                unvisited_rows: missing,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbReport {
    pub n_steps: usize,
    pub n_runs: usize,
    pub seed: u64,
    /// Runs in which every row was observed; only these enter the statistics.
    pub complete_runs: usize,
    pub n_params: usize,
    /// Diagonal of `F⁻¹`.
    pub crb_diag: Vec<f64>,
    /// Diagonal of `N·Cov(θ̂)`.
    pub scaled_variance: Vec<f64>,
    /// `N·Var(θ̂_k) / [F⁻¹]_kk`.
    pub variance_ratios: Vec<f64>,
    /// Mean of `θ̂ − θ`.
    pub bias: Vec<f64>,
    pub min_eigenvalue: f64,
    /// `3·λ_max(F⁻¹)·√(2d/(n − 1))`, a three-sigma allowance for the
    /// sampling error of an `n`-run covariance estimate in dimension `d`.
    pub tolerance: f64,
    pub dominated: bool,
}

/// Inverse FIM over the free parameters: one block
/// `(diag(a_m·) − a_m· a_m·ᵀ) / a_m` per row.
pub fn inverse_fim(a: &DMatrix<f64>, stationary: &[f64]) -> DMatrix<f64> {
    let s = a.nrows();
    let k = s - 1;
    let mut inv = DMatrix::zeros(s * k, s * k);
    for m in 0..s {
        for n in 0..k {
            for n2 in 0..k {
                let diag = if n == n2 { a[(m, n)] } else { 0.0 };
                inv[(m * k + n, m * k + n2)] = (diag - a[(m, n)] * a[(m, n2)]) / stationary[m];
            }
        }
    }
    inv
}

/// Monte Carlo comparison of the MLE covariance with the Cramér–Rao bound.
pub fn crb_check(
    model: &MdpModel,
    policy: &Policy,
    n_steps: usize,
    n_runs: usize,
    seed: u64,
) -> Result<CrbReport> {
    if n_runs < 2 || n_steps == 0 {
        return Err(Error::InvalidArgument(
            "CRB check needs at least two runs of at least one step".into(),
        ));
    }
    if policy.as_slice().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(
            "CRB check needs a strictly positive policy".into(),
        ));
    }
    let pi = model.occupation_of(policy)?;
    let chain = augment(model, &pi)?;
    let a = chain.matrix().clone();
    let stationary = stationary_distribution(&chain)?;
    let s = chain.size();
    let k = s - 1;
    let d = s * k;
    let theta: Vec<f64> = (0..s)
        .flat_map(|m| (0..k).map(move |n| (m, n)))
        .map(|(m, n)| a[(m, n)])
        .collect();
    let f_inv = inverse_fim(&a, &stationary);

    let sampler = Sampler::new(model, policy)?;
    let estimates: Vec<Option<Vec<f64>>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream_rng(seed, run as u64);
            let x0 = stationary_start(model, policy, &mut rng)?;
            let (states, actions) = sampler.run(&mut rng, x0, n_steps);
            let sample = TrajectorySample {
                states,
                actions,
                n_steps,
                seed,
                stream: run as u64,
            };
            let est = mle_estimate(&sample, model.n_states(), model.n_actions())?;
            if (0..s).any(|m| !est.is_visited(m)) {
                return Ok(None);
            }
            Ok(Some(
                (0..s)
                    .flat_map(|m| (0..k).map(move |n| (m, n)))
                    .map(|(m, n)| est.a_hat[m * s + n])
                    .collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let complete: Vec<&Vec<f64>> = estimates.iter().flatten().collect();
    let n = complete.len();
    if n < 2 {
        return Err(Error::IncompleteSamples {
            complete: n,
            runs: n_runs,
        });
    }
    let mut mean = vec![0.0; d];
    for e in &complete {
        for (acc, v) in mean.iter_mut().zip(e.iter()) {
            *acc += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for e in &complete {
        for p in 0..d {
            for q in 0..d {
                cov[(p, q)] += (e[p] - mean[p]) * (e[q] - mean[q]);
            }
        }
    }
    cov *= n_steps as f64 / (n - 1) as f64;
    let gap = &cov - &f_inv;
    let gap = (&gap + gap.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(gap).eigenvalues.min();
    let lambda_max = SymmetricEigen::new(f_inv.clone()).eigenvalues.max();
    let tolerance = 3.0 * lambda_max * (2.0 * d as f64 / (n - 1) as f64).sqrt();
    let crb_diag: Vec<f64> = f_inv.diagonal().iter().copied().collect();
    let scaled_variance: Vec<f64> = cov.diagonal().iter().copied().collect();
    Ok(CrbReport {
        n_steps,
        n_runs,
        seed,
        complete_runs: n,
        n_params: d,
        variance_ratios: scaled_variance
            .iter()
            .zip(&crb_diag)
            .map(|(v, c)| v / c)
            .collect(),
        crb_diag,
        scaled_variance,
        bias: mean.iter().zip(&theta).map(|(m, t)| m - t).collect(),
        min_eigenvalue,
        tolerance,
        dominated: min_eigenvalue >= -tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fim::{assemble_fim, AugmentedChain};

    fn one_action(rows: &[Vec<f64>]) -> MdpModel {
        let p: Vec<Vec<Vec<f64>>> = rows.iter().map(|r| vec![r.clone()]).collect();
        let c: Vec<Vec<f64>> = rows.iter().map(|_| vec![1.0]).collect();
        MdpModel::new(rows.len(), 1, &p, &c).unwrap()
    }

    fn sample_of(states: Vec<usize>, actions: Vec<usize>) -> TrajectorySample {
        TrajectorySample {
            n_steps: states.len() - 1,
            states,
            actions,
            seed: 0,
            stream: 0,
        }
    }

    #[test]
    fn alternating_counts() {
        let s = sample_of(vec![0, 1, 0, 1, 0], vec![0; 5]);
        let est = mle_estimate(&s, 2, 1).unwrap();
        assert_eq!(est.a_hat, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(est.sample_size, 4);
    }

    #[test]
    fn single_transition() {
        let est = mle_estimate(&sample_of(vec![1, 0], vec![0, 0]), 2, 1).unwrap();
        assert_eq!(est.a_hat, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(est.unvisited_rows(), vec![(0, 0)]);
        assert_eq!(
            extract_estimates(&est),
            Err(Error::UnvisitedRow {
                state: 0,
                action: 0
            })
        );
    }

    #[test]
    fn empty_sample() {
        let s = sample_of(vec![0], vec![0]);
        assert_eq!(mle_estimate(&s, 1, 1), Err(Error::EmptySample));
    }

    #[test]
    fn one_state_stays_put() {
        let m = one_action(&[vec![1.0]]);
        let p = Policy::from_rows(&[vec![1.0]]).unwrap();
        let t = sample_trajectory(&m, &p, 50, 3, 0).unwrap();
        assert!(t.states.iter().all(|&x| x == 0));
        assert_eq!(t.states.len(), 51);
    }

    #[test]
    fn tv_examples() {
        let p = vec![vec![vec![0.5, 0.5]], vec![vec![0.2, 0.8]]];
        assert_eq!(tv_error(&p, &p).unwrap(), 0.0);
        let mut q = p.clone();
        q[1][0] = vec![0.3, 0.7];
        assert!((tv_error(&q, &p).unwrap() - 0.1).abs() < 1e-15);
        assert!((l1_error(&q, &p).unwrap() - 0.2).abs() < 1e-15);
        assert!(tv_error(&q[..1], &p).is_err());
    }

    #[test]
    fn exact_inversion() {
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
        let policy = Policy::from_rows(&[vec![0.4, 0.6], vec![0.7, 0.3]]).unwrap();
        let pi = m.occupation_of(&policy).unwrap();
        let a = augment(&m, &pi).unwrap();
        // exact expected counts, scaled to integers
        let s = 4;
        let scale = 1e12;
        let counts: Vec<u64> = (0..s * s)
            .map(|k| (pi.as_slice()[k / s] * a.entry(k / s, k % s) * scale).round() as u64)
            .collect();
        let est = estimate_from_counts(2, 2, counts, 0);
        let (p_hat, mu_hat) = extract_estimates(&est).unwrap();
        for i in 0..2 {
            for u in 0..2 {
                for j in 0..2 {
                    assert!((p_hat[i][u][j] - m.p(i, u, j)).abs() < 1e-9);
                }
                assert!((mu_hat[i][u] - policy.prob(i, u)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_fim_inverts() {
        let chain = AugmentedChain::from_rows(&[
            vec![0.2, 0.3, 0.5],
            vec![0.6, 0.1, 0.3],
            vec![0.25, 0.25, 0.5],
        ])
        .unwrap();
        let st = stationary_distribution(&chain).unwrap();
        let f = assemble_fim(&chain).unwrap().to_dense();
        let prod = f * inverse_fim(chain.matrix(), &st);
        assert!((prod - DMatrix::identity(6, 6)).amax() < 1e-12);
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = one_action(&[vec![0.3, 0.7], vec![0.6, 0.4]]);
        let p = Policy::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let a = sample_trajectory(&m, &p, 1000, 9, 0).unwrap();
        let b = sample_trajectory(&m, &p, 1000, 9, 0).unwrap();
        assert_eq!(a, b);
        let c = sample_trajectory_stream(&m, &p, 1000, 9, 1, 0).unwrap();
        assert_ne!(a.states, c.states);
    }
}
