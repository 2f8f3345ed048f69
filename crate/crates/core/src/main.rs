use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use covertplan::experiment::{
    adversary_errors, adversary_line, adversary_report, matched_comparison, svg_chart, sweep_point,
    ExperimentConfig, PlanFile, ScenarioSource, ADVERSARY_HEADER, COMPARE_HEADER, SWEEP_HEADER,
};
use covertplan::masking::MaskingMethod;
use covertplan::mdp::{extract_policy, solve_average_cost_lp, MdpModel};

#[derive(Parser)]
#[command(
    name = "covertplan",
    version,
    about = "Masked MDP sensing plans and adversary simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `masking.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Unmasked average-cost plan.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Masker sweep over the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "total")]
        which: Which,
    },
    /// Adversary estimation errors and CRB check for a plan file.
    Adversary {
        #[command(flatten)]
        common: Common,
        /// Plan JSON written by `solve` or `compare`
        #[arg(long)]
        plan: PathBuf,
    },
    /// Fisher masking against max-entropy masking at matched cost perturbation.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Total,
    Cost,
    Transition,
    Entropy,
}

impl From<Which> for MaskingMethod {
    fn from(w: Which) -> Self {
        match w {
            Which::Total => MaskingMethod::Total,
            Which::Cost => MaskingMethod::Cost,
            Which::Transition => MaskingMethod::Transition,
            Which::Entropy => MaskingMethod::Entropy,
        }
    }
}

/// Config-phase failures exit with 2, everything later with 3.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Stage<T> {
    fn config(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn config(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Config)
    }
    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

struct Setup {
    cfg: ExperimentConfig,
    model: MdpModel,
    out: PathBuf,
}

fn load(common: &Common) -> Result<Setup> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.masking.master_seed = seed;
    }
    cfg.validate().context("invalid config")?;
    let model = match &cfg.scenario {
        ScenarioSource::Params(_) => cfg
            .scenario_model()
            .expect("parameter scenario")
            .context("invalid scenario")?,
        ScenarioSource::File { model_path } => {
            let path = resolve(&common.config, model_path);
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading model {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("invalid model {}", path.display()))?
        }
    };
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating output dir {}", out.display()))?;
    Ok(Setup { cfg, model, out })
}

/// Relative paths in the config are taken relative to the config file.
fn resolve(config: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    config
        .parent()
        .map_or_else(|| path.to_path_buf(), |dir| dir.join(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_solve(s: &Setup) -> Result<()> {
    let pi = solve_average_cost_lp(&s.model)?;
    let policy = extract_policy(&pi)?;
    let plan = PlanFile::unmasked(&pi, policy, &s.model, s.cfg.masking.master_seed)?;
    write_json(&s.out.join("plan.json"), &plan)?;
    write_json(&s.out.join("model.json"), &s.model)?;
    eprintln!(
        "average cost {:.6}, plan written to {}",
        plan.average_cost,
        s.out.display()
    );
    Ok(())
}

fn cmd_sweep(s: &Setup, method: MaskingMethod) -> Result<()> {
    let pi0 = solve_average_cost_lp(&s.model)?;
    let spec = &s.cfg.sweep;
    let path = s.out.join("sweep.csv");
    let mut csv =
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(csv, "{SWEEP_HEADER}")?;
    let mut rows = Vec::new();
    for value in spec.grid() {
        let (row, _) = sweep_point(
            method,
            &s.model,
            &pi0,
            &s.cfg.masking,
            spec.parameter,
            value,
        )
        .with_context(|| format!("{} = {value:e}", spec.parameter.name()))?;
        writeln!(csv, "{}", row.csv_line())?;
        csv.flush()?;
        eprintln!(
            "{} = {value:.3e}: logdet {:.4}, perturbation {:.3}%",
            spec.parameter.name(),
            row.mean_logdet_paper,
            row.mean_cost_perturbation_pct
        );
        rows.push((value, row));
    }
    let name = spec.parameter.name();
    let log_x = spec.is_log_spaced();
    let logdet: Vec<(f64, f64)> = rows
        .iter()
        .map(|(v, r)| (*v, r.mean_logdet_paper))
        .collect();
    let cost: Vec<(f64, f64)> = rows
        .iter()
        .map(|(v, r)| (*v, r.mean_cost_perturbation_pct))
        .collect();
    let param: Vec<(f64, f64)> = rows
        .iter()
        .map(|(v, r)| (*v, r.mean_param_perturbation))
        .collect();
    let title = format!("{} masking", method.name());
    fs::write(
        s.out.join("sweep_logdet.svg"),
        svg_chart(&title, name, "mean log det F", &logdet, log_x),
    )?;
    fs::write(
        s.out.join("sweep_cost.svg"),
        svg_chart(&title, name, "mean cost perturbation (%)", &cost, log_x),
    )?;
    if matches!(method, MaskingMethod::Cost | MaskingMethod::Transition) {
        fs::write(
            s.out.join("sweep_param.svg"),
            svg_chart(&title, name, "mean parameter perturbation", &param, log_x),
        )?;
    }
    Ok(())
}

fn load_plan(path: &Path, model: &MdpModel) -> Result<PlanFile> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    let plan: PlanFile =
        serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))?;
    plan.check_against(model)?;
    Ok(plan)
}

fn cmd_adversary(s: &Setup, plan: &PlanFile) -> Result<()> {
    let seed = s.cfg.masking.master_seed;
    let spec = &s.cfg.adversary;
    let samples = adversary_errors(&s.model, &plan.policy, spec, seed)?;
    let mut csv = String::from(ADVERSARY_HEADER);
    csv.push('\n');
    for sample in &samples {
        csv.push_str(&adversary_line(sample, seed));
        csv.push('\n');
    }
    fs::write(s.out.join("adversary.csv"), csv)?;
    let report = adversary_report(&s.model, &plan.policy, spec, &samples, seed)?;
    write_json(&s.out.join("crb_report.json"), &report)?;
    for row in &report.by_sample_size {
        eprintln!(
            "N = {}: mean TV {:.4}, mean unvisited rows {:.1}",
            row.n_steps, row.mean_tv_error, row.mean_unvisited_rows
        );
    }
    if let Some(reason) = &report.crb_skipped {
        eprintln!("CRB check skipped: {reason}");
    }
    Ok(())
}

fn cmd_compare(s: &Setup) -> Result<()> {
    let pi0 = solve_average_cost_lp(&s.model)?;
    let spec = &s.cfg.adversary;
    let n_steps = *spec.sample_sizes.first().expect("validated non-empty");
    let out = matched_comparison(&s.model, &pi0, &s.cfg.masking, n_steps, spec.runs)?;
    let seed = s.cfg.masking.master_seed;
    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    for line in out.csv_lines() {
        csv.push_str(&line);
        csv.push('\n');
    }
    fs::write(s.out.join("compare.csv"), csv)?;
    write_json(&s.out.join("compare.json"), &out.summary)?;
    write_json(
        &s.out.join("fisher_plan.json"),
        &PlanFile::masked(&out.fisher_plan, out.summary.fisher.gamma, &s.model, seed)?,
    )?;
    write_json(
        &s.out.join("entropy_plan.json"),
        &PlanFile::masked(&out.entropy_plan, out.summary.entropy.gamma, &s.model, seed)?,
    )?;
    let sm = &out.summary;
    let bars = [
        (1.0, sm.fisher.mean_l1_error),
        (2.0, sm.entropy.mean_l1_error),
    ];
    fs::write(
        s.out.join("compare.svg"),
        svg_chart(
            "mean l1 error: 1 = Fisher, 2 = max entropy",
            "method",
            "mean l1 error",
            &bars,
            false,
        ),
    )?;
    eprintln!(
        "Fisher l1 {:.4} vs entropy l1 {:.4} at {:.2}% / {:.2}% perturbation (z = {})",
        sm.fisher.mean_l1_error,
        sm.entropy.mean_l1_error,
        sm.fisher.cost_perturbation_pct,
        sm.entropy.cost_perturbation_pct,
        sm.z_score
            .map_or_else(|| "undefined".to_string(), |z| format!("{z:.2}"))
    );
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Solve { common } => {
            let s = load(&common).config()?;
            cmd_solve(&s).runtime()
        }
        Command::Sweep { common, which } => {
            let s = load(&common).config()?;
            cmd_sweep(&s, which.into()).runtime()
        }
        Command::Adversary { common, plan } => {
            let s = load(&common).config()?;
            let plan = load_plan(&plan, &s.model).config()?;
            cmd_adversary(&s, &plan).runtime()
        }
        Command::Compare { common } => {
            let s = load(&common).config()?;
            cmd_compare(&s).runtime()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
