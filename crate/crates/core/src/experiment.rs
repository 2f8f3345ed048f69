//! Configuration-driven experiments: parameter sweeps, adversary runs and the
//! matched-perturbation comparison. Everything here returns in-memory
//! artifacts (rows, JSON values, SVG text); file I/O lives in the binary.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adversary::{crb_check, estimation_errors, CrbReport, ErrorSample};
use crate::error::{Error, Result};
use crate::masking::{mask, MaskingConfig, MaskingMethod, MaskingResult};
use crate::mdp::{average_cost, MdpModel, OccupationMeasure, Policy};
use crate::radar_scenario::{build_model, ScenarioParams, DEFAULT_CHI};

/// Where the model comes from: scenario parameters, or a model JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Params(ScenarioParams),
    File { model_path: PathBuf },
}

impl Default for ScenarioSource {
    fn default() -> Self {
        ScenarioSource::Params(ScenarioParams::paper_default(DEFAULT_CHI))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Gamma,
    Gamma1,
    Gamma2,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Gamma => "gamma",
            SweepParameter::Gamma1 => "gamma1",
            SweepParameter::Gamma2 => "gamma2",
        }
    }

    pub fn apply(self, cfg: &mut MaskingConfig, value: f64) {
        match self {
            SweepParameter::Gamma => cfg.gamma = value,
            SweepParameter::Gamma1 => cfg.gamma1 = value,
            SweepParameter::Gamma2 => cfg.gamma2 = value,
        }
    }
}

/// Log-spaced grid `10^start_exp … 10^end_exp`, or an explicit value list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub start_exp: f64,
    pub end_exp: f64,
    pub points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            parameter: SweepParameter::Gamma,
            start_exp: -3.0,
            end_exp: -1.0,
            points: 10,
            values: None,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.values {
            Some(v) => {
                if v.is_empty() || v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(Error::InvalidArgument(
                        "sweep values must be a non-empty list of finite non-negative numbers"
                            .into(),
                    ));
                }
            }
            None => {
                if self.points < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "a log-spaced sweep needs at least 2 points, got {}",
                        self.points
                    )));
                }
                if !(self.start_exp.is_finite() && self.end_exp.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "sweep exponents must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn is_log_spaced(&self) -> bool {
        self.values.is_none()
    }

    pub fn grid(&self) -> Vec<f64> {
        if let Some(v) = &self.values {
            return v.clone();
        }
        let n = self.points;
        (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                10f64.powf(self.start_exp + t * (self.end_exp - self.start_exp))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySpec {
    pub sample_sizes: Vec<usize>,
    pub runs: usize,
    pub crb_steps: usize,
    pub crb_runs: usize,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        Self {
            sample_sizes: vec![10_000],
            runs: 100,
            crb_steps: 10_000,
            crb_runs: 500,
        }
    }
}

impl AdversarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "adversary sample sizes must be a non-empty list of positive lengths".into(),
            ));
        }
        if self.runs == 0 || self.crb_steps == 0 || self.crb_runs < 2 {
            return Err(Error::InvalidArgument(
                "adversary runs and CRB steps must be positive, CRB runs at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    pub masking: MaskingConfig,
    pub sweep: SweepSpec,
    pub adversary: AdversarySpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSource::default(),
            masking: MaskingConfig::default(),
            sweep: SweepSpec::default(),
            adversary: AdversarySpec::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let ScenarioSource::Params(p) = &self.scenario {
            p.validate()?;
        }
        self.masking.validate()?;
        self.sweep.validate()?;
        self.adversary.validate()
    }

    /// Model built from scenario parameters; `None` for a model file.
    pub fn scenario_model(&self) -> Option<Result<MdpModel>> {
        match &self.scenario {
            ScenarioSource::Params(p) => Some(build_model(p)),
            ScenarioSource::File { .. } => None,
        }
    }
}

/// Plan file written by `solve` and `compare`, read by `adversary`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub method: String,
    pub gamma: Option<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub pi: Vec<Vec<f64>>,
    pub policy: Policy,
    pub average_cost: f64,
    pub cost_perturbation_pct: f64,
    pub seed: u64,
}

impl PlanFile {
    pub fn unmasked(
        pi: &OccupationMeasure,
        policy: Policy,
        model: &MdpModel,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            method: "unmasked".into(),
            gamma: None,
            n_states: model.n_states(),
            n_actions: model.n_actions(),
            pi: pi.rows(),
            policy,
            average_cost: average_cost(pi, model)?,
            cost_perturbation_pct: 0.0,
            seed,
        })
    }

    pub fn masked(result: &MaskingResult, gamma: f64, model: &MdpModel, seed: u64) -> Result<Self> {
        Ok(Self {
            method: result.method.name().into(),
            gamma: Some(gamma),
            n_states: model.n_states(),
            n_actions: model.n_actions(),
            pi: result.masked_pi.rows(),
            policy: result.masked_policy.clone(),
            average_cost: average_cost(&result.masked_pi, model)?,
            cost_perturbation_pct: result.relative_cost_perturbation_pct,
            seed,
        })
    }

    pub fn check_against(&self, model: &MdpModel) -> Result<()> {
        if self.n_states != model.n_states()
            || self.n_actions != model.n_actions()
            || self.policy.n_states() != model.n_states()
            || self.policy.n_actions() != model.n_actions()
        {
            return Err(Error::DimensionMismatch(format!(
                "plan is {}x{} but the model is {}x{}",
                self.policy.n_states(),
                self.policy.n_actions(),
                model.n_states(),
                model.n_actions()
            )));
        }
        Ok(())
    }
}

// --------------------------------------------------------------------- sweep

pub const SWEEP_HEADER: &str = "gamma,gamma1,gamma2,mean_logdet_paper,mean_logdet_oracle,mean_cost_perturbation_pct,mean_param_perturbation,n_runs,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub mean_logdet_paper: f64,
    pub mean_logdet_oracle: f64,
    pub mean_cost_perturbation_pct: f64,
    pub mean_param_perturbation: f64,
    pub n_runs: usize,
    pub seed: u64,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.gamma,
            self.gamma1,
            self.gamma2,
            self.mean_logdet_paper,
            self.mean_logdet_oracle,
            self.mean_cost_perturbation_pct,
            self.mean_param_perturbation,
            self.n_runs,
            self.seed
        )
    }
}

/// Runs one grid point of a sweep.
pub fn sweep_point(
    method: MaskingMethod,
    model: &MdpModel,
    pi0: &OccupationMeasure,
    base: &MaskingConfig,
    parameter: SweepParameter,
    value: f64,
) -> Result<(SweepRow, MaskingResult)> {
    let mut cfg = base.clone();
    parameter.apply(&mut cfg, value);
    let result = mask(method, model, pi0, &cfg)?;
    let m = &result.run_means;
    let row = SweepRow {
        gamma: cfg.gamma,
        gamma1: cfg.gamma1,
        gamma2: cfg.gamma2,
        mean_logdet_paper: m.log_det_paper,
        mean_logdet_oracle: m.log_det_oracle,
        mean_cost_perturbation_pct: m.cost_perturbation_pct,
        mean_param_perturbation: m.param_perturbation,
        n_runs: cfg.monte_carlo_runs,
        seed: cfg.master_seed,
    };
    Ok((row, result))
}

/// Polyline chart with optional log-scaled x axis.
pub fn svg_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    log_x: bool,
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    let xs: Vec<f64> = points
        .iter()
        .map(|p| {
            if log_x {
                p.0.max(f64::MIN_POSITIVE).log10()
            } else {
                p.0
            }
        })
        .collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let span = |v: &[f64]| {
        let lo = v
            .iter()
            .copied()
            .filter(|x| x.is_finite())
            .fold(f64::INFINITY, f64::min);
        let hi = v
            .iter()
            .copied()
            .filter(|x| x.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let x_name = if log_x {
        format!("log10 {x_label}")
    } else {
        x_label.to_string()
    };
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        H - 15.0,
        escape(&x_name)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, anchor_x, anchor_y) in [(x0, px(x0), H - PAD + 18.0), (x1, px(x1), H - PAD + 18.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x:.1}" y="{anchor_y:.1}" text-anchor="middle" font-size="11">{v:.3}</text>"#
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{v:.3}</text>"#,
            PAD - 6.0,
            py(v) + 4.0
        );
    }
    let coords: Vec<String> = xs
        .iter()
        .zip(&ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        coords.join(" ")
    );
    for c in &coords {
        let (cx, cy) = c.split_once(',').expect("formatted pair");
        let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="steelblue"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

// ----------------------------------------------------------------- adversary

pub const ADVERSARY_HEADER: &str = "run,N,tv_error,l1_error,unvisited_rows,seed";

pub fn adversary_line(sample: &ErrorSample, seed: u64) -> String {
    format!(
        "{},{},{:e},{:e},{},{}",
        sample.run, sample.n_steps, sample.tv_error, sample.l1_error, sample.unvisited_rows, seed
    )
}

/// Error table for every configured sample size, in config order.
pub fn adversary_errors(
    model: &MdpModel,
    policy: &Policy,
    spec: &AdversarySpec,
    seed: u64,
) -> Result<Vec<ErrorSample>> {
    let mut rows = Vec::new();
    for &n in &spec.sample_sizes {
        rows.extend(estimation_errors(model, policy, n, spec.runs, seed)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeSummary {
    pub n_steps: usize,
    pub mean_tv_error: f64,
    pub mean_l1_error: f64,
    pub mean_unvisited_rows: f64,
    pub max_unvisited_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub seed: u64,
    pub deterministic_plan: bool,
    /// Pairs `(state, action)` with zero plan probability; the adversary
    /// never observes these rows.
    pub unreachable_rows: Vec<(usize, usize)>,
    pub by_sample_size: Vec<SampleSizeSummary>,
    pub crb: Option<CrbReport>,
    /// Why the CRB check did not run.
    pub crb_skipped: Option<String>,
}

pub fn adversary_report(
    model: &MdpModel,
    policy: &Policy,
    spec: &AdversarySpec,
    samples: &[ErrorSample],
    seed: u64,
) -> Result<AdversaryReport> {
    let (x, u) = (model.n_states(), model.n_actions());
    let unreachable_rows = (0..x)
        .flat_map(|i| (0..u).map(move |a| (i, a)))
        .filter(|&(i, a)| policy.prob(i, a) <= 0.0)
        .collect::<Vec<_>>();
    let by_sample_size = spec
        .sample_sizes
        .iter()
        .map(|&n| {
            let rows: Vec<&ErrorSample> = samples.iter().filter(|s| s.n_steps == n).collect();
            let k = rows.len().max(1) as f64;
            SampleSizeSummary {
                n_steps: n,
                mean_tv_error: rows.iter().map(|s| s.tv_error).sum::<f64>() / k,
                mean_l1_error: rows.iter().map(|s| s.l1_error).sum::<f64>() / k,
                mean_unvisited_rows: rows.iter().map(|s| s.unvisited_rows as f64).sum::<f64>() / k,
                max_unvisited_rows: rows.iter().map(|s| s.unvisited_rows).max().unwrap_or(0),
            }
        })
        .collect();
    let (crb, crb_skipped) = if !unreachable_rows.is_empty() {
        (None, Some("plan has zero-probability rows".to_string()))
    } else {
        match crb_check(model, policy, spec.crb_steps, spec.crb_runs, seed) {
            Ok(report) => (Some(report), None),
            // rows with tiny probability are missed by almost every run
            Err(e @ Error::IncompleteSamples { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        }
    };
    Ok(AdversaryReport {
        seed,
        deterministic_plan: policy.is_deterministic(1e-12),
        unreachable_rows,
        by_sample_size,
        crb,
        crb_skipped,
    })
}

// --------------------------------------------------------------- comparison

/// Masker result at the `gamma` whose relative cost perturbation of the
/// averaged plan matches `target_pct` within `rel_tol` (relative). Bisects
/// `log10 γ` over `[lo, hi]`, assuming the perturbation grows with `γ`.
pub fn bisect_gamma(
    method: MaskingMethod,
    model: &MdpModel,
    pi0: &OccupationMeasure,
    base: &MaskingConfig,
    target_pct: f64,
    rel_tol: f64,
    (lo, hi): (f64, f64),
    max_steps: usize,
) -> Result<(f64, MaskingResult)> {
    if !(lo > 0.0 && hi > lo && target_pct > 0.0 && rel_tol > 0.0) {
        return Err(Error::InvalidArgument(
            "bisection needs 0 < lo < hi, a positive target and a positive tolerance".into(),
        ));
    }
    let eval = |gamma: f64| -> Result<MaskingResult> {
        let mut cfg = base.clone();
        cfg.gamma = gamma;
        mask(method, model, pi0, &cfg)
    };
    let (mut a, mut b) = (lo.log10(), hi.log10());
    let mut best: Option<(f64, MaskingResult)> = None;
    let mut best_gap = f64::INFINITY;
    for _ in 0..max_steps {
        let mid = 0.5 * (a + b);
        let gamma = 10f64.powf(mid);
        let result = eval(gamma)?;
        let pct = result.relative_cost_perturbation_pct;
        let gap = (pct - target_pct).abs() / target_pct;
        if gap < best_gap {
            best_gap = gap;
            best = Some((gamma, result));
        }
        if gap <= rel_tol {
            break;
        }
        if pct < target_pct {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(best.expect("at least one bisection step"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodErrors {
    pub method: MaskingMethod,
    pub gamma: f64,
    pub cost_perturbation_pct: f64,
    pub mean_l1_error: f64,
    pub mean_tv_error: f64,
    pub mean_unvisited_rows: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n_steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub matched_within: f64,
    pub fisher: MethodErrors,
    pub entropy: MethodErrors,
    /// Mean of paired differences `l1_fisher − l1_entropy` over seeds.
    pub mean_difference: f64,
    pub standard_error: f64,
    /// `mean_difference / standard_error`; undefined when every paired
    /// difference is equal.
    pub z_score: Option<f64>,
}

pub const COMPARE_HEADER: &str =
    "method,gamma,cost_perturbation_pct,run,N,tv_error,l1_error,unvisited_rows,seed";

pub struct ComparisonOutput {
    pub summary: Comparison,
    pub fisher_plan: MaskingResult,
    pub entropy_plan: MaskingResult,
    pub fisher_errors: Vec<ErrorSample>,
    pub entropy_errors: Vec<ErrorSample>,
}

impl ComparisonOutput {
    pub fn csv_lines(&self) -> Vec<String> {
        let s = &self.summary;
        let mut lines = Vec::new();
        for (m, errs) in [
            (&s.fisher, &self.fisher_errors),
            (&s.entropy, &self.entropy_errors),
        ] {
            for e in errs {
                lines.push(format!(
                    "{},{:e},{:e},{},{},{:e},{:e},{},{}",
                    m.method.name(),
                    m.gamma,
                    m.cost_perturbation_pct,
                    e.run,
                    e.n_steps,
                    e.tv_error,
                    e.l1_error,
                    e.unvisited_rows,
                    s.seed
                ));
            }
        }
        lines
    }
}

/// Relative tolerance used to match cost perturbations.
pub const MATCH_TOLERANCE: f64 = 0.01;

/// Fisher masking at `base.gamma` against max-entropy masking with `γ`
/// bisected to the same relative cost perturbation; both plans face the
/// same adversary seeds.
pub fn matched_comparison(
    model: &MdpModel,
    pi0: &OccupationMeasure,
    base: &MaskingConfig,
    n_steps: usize,
    runs: usize,
) -> Result<ComparisonOutput> {
    let fisher_plan = mask(MaskingMethod::Total, model, pi0, base)?;
    let target = fisher_plan.relative_cost_perturbation_pct;
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(
            "Fisher masking left the cost unchanged; raise gamma".into(),
        ));
    }
    let (entropy_gamma, entropy_plan) = bisect_gamma(
        MaskingMethod::Entropy,
        model,
        pi0,
        base,
        target,
        MATCH_TOLERANCE,
        (1e-8, 1e2),
        60,
    )?;
    let seed = base.master_seed;
    let fisher_errors = estimation_errors(model, &fisher_plan.masked_policy, n_steps, runs, seed)?;
    let entropy_errors =
        estimation_errors(model, &entropy_plan.masked_policy, n_steps, runs, seed)?;
    let diffs: Vec<f64> = fisher_errors
        .iter()
        .zip(&entropy_errors)
        .map(|(f, e)| f.l1_error - e.l1_error)
        .collect();
    let n = diffs.len() as f64;
    let mean_difference = diffs.iter().sum::<f64>() / n;
    let var = diffs
        .iter()
        .map(|d| (d - mean_difference).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let standard_error = (var / n).sqrt();
    let summarise = |method, gamma, plan: &MaskingResult, errs: &[ErrorSample]| MethodErrors {
        method,
        gamma,
        cost_perturbation_pct: plan.relative_cost_perturbation_pct,
        mean_l1_error: errs.iter().map(|e| e.l1_error).sum::<f64>() / n,
        mean_tv_error: errs.iter().map(|e| e.tv_error).sum::<f64>() / n,
        mean_unvisited_rows: errs.iter().map(|e| e.unvisited_rows as f64).sum::<f64>() / n,
    };
    let summary = Comparison {
        n_steps,
        runs,
        seed,
        matched_within: MATCH_TOLERANCE,
        fisher: summarise(
            MaskingMethod::Total,
            base.gamma,
            &fisher_plan,
            &fisher_errors,
        ),
        entropy: summarise(
            MaskingMethod::Entropy,
            entropy_gamma,
            &entropy_plan,
            &entropy_errors,
        ),
        mean_difference,
        standard_error,
        z_score: (standard_error > 0.0).then(|| mean_difference / standard_error),
    };
    Ok(ComparisonOutput {
        summary,
        fisher_plan,
        entropy_plan,
        fisher_errors,
        entropy_errors,
    })
}
