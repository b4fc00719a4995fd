//! `apcval`: plan, classify, sample, evaluate, cost and simulate partitioned
//! APC validation campaigns.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use apcval_core::classify::{classify, sample_campaign, Classification, ClassifierKind};
use apcval_core::cost::{costs_combined, costs_no_first_count, costs_with_first_count, CostBreakdown, CostScheme};
use apcval_core::estimator::{evaluate_classic, evaluate_partitioned, worksheet};
use apcval_core::io::{
    emit_report, load_campaign, save_campaign, success_curves_csv, worksheet_csv, write_campaign, Config,
    Envelope, Format, LoadedCampaign,
};
use apcval_core::planner::{optimal_quota, plan, OptimalQuota, QuotaChoice};
use apcval_core::simulate::{empirical_pools, run_simulation, user_risk_audit, ErrorModel, GridVar, SimConfig};
use apcval_core::{CostParams, DopRecord, EvaluationReport, Label, PartitionParams, Plan, TestKind, Violation};

#[derive(Parser)]
#[command(name = "apcval", version, about = "Partitioned equivalence testing for APC validation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Campaign CSV file.
    #[arg(long, global = true)]
    campaign: Option<PathBuf>,
    /// Output path; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Treat campaign validation violations as errors.
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    /// Override a config key, e.g. `--set nu=0.15`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample sizes, recorded size and cost comparison.
    Plan {
        /// Solve for the quota of this fixed recorded size.
        #[arg(long)]
        n_rec: Option<u64>,
    },
    /// Cost-optimal quota and the resulting plan.
    Optimize,
    /// Label a campaign safe/unsafe with the configured classifier.
    Classify {
        /// Also write a summary report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw the counting quota among safe records.
    Sample {
        /// Also write a summary report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the equivalence test on a counted campaign.
    Evaluate {
        /// Classic test on all records instead of the partitioned test.
        #[arg(long)]
        classic: bool,
        /// Write the per-record worksheet (dop_id, d, stratum, weight) here.
        #[arg(long)]
        worksheet: Option<PathBuf>,
    },
    /// Cost parameters from campaign durations.
    Cost,
    /// Monte Carlo pass rates or a user-risk audit.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Normal)]
    model: ModelArg,
    /// Safe-stratum mean (normal model).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu_s: f64,
    /// Safe-stratum standard deviation (normal model); defaults to `nu_s_ratio·nu`.
    #[arg(long)]
    nu_s: Option<f64>,
    /// Unsafe-stratum mean (normal model).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu_u: f64,
    /// Unsafe-stratum standard deviation (normal model); defaults to the value
    /// that makes the overall standard deviation equal `nu`.
    #[arg(long)]
    nu_u: Option<f64>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    n_values: Vec<usize>,
    /// Target mean relative differences, comma separated.
    #[arg(long = "bias", value_delimiter = ',', required = true, allow_hyphen_values = true)]
    bias: Vec<f64>,
    #[arg(long, default_value_t = SimConfig::DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = TestArg::Classic)]
    test: TestArg,
    #[arg(long, value_enum, default_value_t = GridArg::Mu)]
    grid: GridArg,
    /// Report the worst-case pass rate per n instead of full curves.
    #[arg(long)]
    audit: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Normal,
    Empirical,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Classic,
    Partitioned,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Mu,
    N,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => Config::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => Config::default(),
    };
    let pairs = common
        .overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .with_context(|| format!("override `{o}` is not of the form key=value"))
        })
        .collect::<Result<Vec<_>>>()?;
    config.set_all(&pairs).context("applying --set overrides")?;
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    Ok(config)
}

fn campaign(common: &Common) -> Result<LoadedCampaign> {
    let path = common.campaign.as_ref().context("this subcommand needs --campaign")?;
    let loaded = load_campaign(path).with_context(|| format!("reading campaign {}", path.display()))?;
    for v in &loaded.violations {
        eprintln!("warning: {v}");
    }
    Ok(if common.strict { loaded.strict()? } else { loaded })
}

fn inputs(config: &Config, common: &Common, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut map = config.entries().clone();
    if let Some(p) = &common.campaign {
        map.insert("campaign".into(), p.display().to_string());
    }
    for (k, v) in extra {
        map.insert((*k).to_string(), v.clone());
    }
    map
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_records(path: Option<&Path>, records: &[DopRecord]) -> Result<()> {
    match path {
        Some(p) => save_campaign(p, records).with_context(|| format!("writing {}", p.display())),
        None => Ok(write_campaign(std::io::stdout(), records)?),
    }
}

fn cost_breakdown(config: &Config, records: &[DopRecord]) -> Result<CostBreakdown> {
    let rates = config.cost_rates()?;
    Ok(match config.cost_scheme()?.unwrap_or(CostScheme::NoFirstCount) {
        CostScheme::NoFirstCount => costs_no_first_count(records, &rates)?,
        CostScheme::WithFirstCount => costs_with_first_count(records, &rates)?,
        CostScheme::Combined => {
            // reclassification flags come from re-running the combined classifier
            let spec = config
                .classifier_spec()?
                .filter(|s| s.kind == ClassifierKind::Combined)
                .context("costs.scheme = combined needs classifier.kind = combined")?;
            let c = classify(records, &spec)?;
            let flags = c.reclassified.unwrap_or_default();
            costs_combined(&c.records, &flags, &rates)?
        }
    })
}

/// Cost parameters from the config, or derived from the campaign.
fn cost_params(config: &Config, common: &Common) -> Result<Option<CostParams>> {
    if let Some(c) = config.cost_params()? {
        return Ok(Some(c));
    }
    if common.campaign.is_some() {
        let loaded = campaign(common)?;
        return Ok(Some(cost_breakdown(config, &loaded.records)?.params));
    }
    Ok(None)
}

#[derive(Serialize)]
struct OptimizeReport {
    optimum: OptimalQuota,
    plan: Plan,
}

#[derive(Serialize)]
struct ClassifySummary {
    n: usize,
    n_safe: usize,
    p_s_hat: f64,
    reclassified: Option<BTreeMap<String, bool>>,
}

#[derive(Serialize)]
struct SampleSummary {
    n_safe: usize,
    n_sampled: usize,
    q: f64,
    q_effective: f64,
}

#[derive(Serialize)]
struct EvaluateOutput {
    evaluation: EvaluationReport,
    violations: Vec<Violation>,
}

fn emit<T: Serialize>(
    common: &Common,
    kind: &str,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    report: T,
) -> Result<()> {
    let text = emit_report(&Envelope::new(kind, seed, inputs, report), common.format.into())?;
    write_output(common.out.as_deref(), &text)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let config = load_config(common)?;
    let seed = config.seed()?;
    match cli.command {
        Command::Plan { n_rec } => {
            let params = config.test_params()?;
            let partition = config.partition_params()?;
            let choice = match n_rec {
                Some(n) => QuotaChoice::FixedRecord(n),
                None => QuotaChoice::Given,
            };
            if n_rec.is_some() && partition.is_none() {
                bail!("--n-rec needs partition parameters (p_s, nu_s_ratio)");
            }
            let costs = cost_params(&config, common)?;
            let p = plan(&params, partition.as_ref(), choice, costs.as_ref())?;
            let extra: Vec<(&str, String)> = n_rec.map(|n| ("n_rec", n.to_string())).into_iter().collect();
            emit(common, "plan", seed, inputs(&config, common, &extra), p)
        }
        Command::Optimize => {
            let params = config.test_params()?;
            let partition = config
                .partition_params()?
                .context("optimize needs partition parameters (p_s, nu_s_ratio)")?;
            let costs = cost_params(&config, common)?
                .context("optimize needs costs.c_u/c_s0/c_sz or a --campaign to derive them")?;
            let nu = params.nu.max(params.nu_min);
            let optimum = optimal_quota(&partition, nu, &costs)?;
            let p = plan(&params, Some(&partition), QuotaChoice::Optimize(costs), Some(&costs))?;
            emit(common, "optimize", seed, inputs(&config, common, &[]), OptimizeReport { optimum, plan: p })
        }
        Command::Classify { report } => {
            let spec = config
                .classifier_spec()?
                .context("classify needs classifier.kind in the config")?;
            let loaded = campaign(common)?;
            let Classification {
                records,
                p_s_hat,
                reclassified,
            } = classify(&loaded.records, &spec)?;
            write_records(common.out.as_deref(), &records)?;
            if let Some(path) = report {
                let summary = ClassifySummary {
                    n: records.len(),
                    n_safe: records.iter().filter(|r| r.label == Label::Safe).count(),
                    p_s_hat,
                    reclassified,
                };
                let text = emit_report(
                    &Envelope::new("classify", seed, inputs(&config, common, &[]), summary),
                    common.format.into(),
                )?;
                write_output(Some(&path), &text)?;
            }
            Ok(())
        }
        Command::Sample { report } => {
            let q = config.quota()?.context("sample needs q in the config")?;
            let seed = seed.context("sample needs a seed (config `seed` or --seed)")?;
            let loaded = campaign(common)?;
            let records = sample_campaign(&loaded.records, q, seed)?;
            write_records(common.out.as_deref(), &records)?;
            if let Some(path) = report {
                let n_safe = records.iter().filter(|r| r.label == Label::Safe).count();
                let n_sampled = records.iter().filter(|r| r.sampled == Some(true)).count();
                let summary = SampleSummary {
                    n_safe,
                    n_sampled,
                    q,
                    q_effective: n_sampled as f64 / n_safe as f64,
                };
                let text = emit_report(
                    &Envelope::new("sample", Some(seed), inputs(&config, common, &[]), summary),
                    common.format.into(),
                )?;
                write_output(Some(&path), &text)?;
            }
            Ok(())
        }
        Command::Evaluate { classic, worksheet: sheet } => {
            let params = config.test_params()?;
            let loaded = campaign(common)?;
            let evaluation = if classic {
                evaluate_classic(&loaded.records, &params)?
            } else {
                evaluate_partitioned(&loaded.records, &params)?
            };
            if let Some(path) = sheet {
                let text = worksheet_csv(&worksheet(&loaded.records)?)?;
                write_output(Some(&path), &text)?;
            }
            let extra = [("test", evaluation.test.to_string())];
            emit(
                common,
                "evaluate",
                seed,
                inputs(&config, common, &extra),
                EvaluateOutput {
                    evaluation,
                    violations: loaded.violations,
                },
            )
        }
        Command::Cost => {
            let loaded = campaign(common)?;
            let breakdown = cost_breakdown(&config, &loaded.records)?;
            emit(common, "cost", seed, inputs(&config, common, &[]), breakdown)
        }
        Command::Simulate(args) => simulate(common, &config, seed, args),
    }
}

/// Unsafe-stratum SD for which `p_s·ν_s² + p_u·ν_u² = ν²`.
fn default_nu_u(nu: f64, p_s: f64, nu_s: f64) -> Result<f64> {
    let p_u = 1.0 - p_s;
    if p_u <= 0.0 {
        return Ok(nu);
    }
    let rest = nu * nu - p_s * nu_s * nu_s;
    if rest < 0.0 {
        bail!("p_s·nu_s² exceeds nu²; pass --nu-u explicitly");
    }
    Ok((rest / p_u).sqrt())
}

fn simulate(common: &Common, config: &Config, seed: Option<u64>, args: SimulateArgs) -> Result<()> {
    let params = config.test_params()?;
    // without partition keys every record is unsafe, i.e. the classic setting
    let partition = config.partition_params()?.unwrap_or(PartitionParams {
        p_s: 0.0,
        nu_s_ratio: 0.0,
        q: 1.0,
    });
    let error_model = match args.model {
        ModelArg::Normal => {
            let nu_s = args.nu_s.unwrap_or(partition.nu_s_ratio * params.nu);
            let nu_u = match args.nu_u {
                Some(v) => v,
                None => default_nu_u(params.nu, partition.p_s, nu_s)?,
            };
            ErrorModel::Normal { mu_s: args.mu_s, nu_s, mu_u: args.mu_u, nu_u }
        }
        ModelArg::Empirical => empirical_pools(&campaign(common)?.records)?,
    };
    let seed = seed.unwrap_or(0);
    let sim = SimConfig {
        error_model,
        bias_sweep: args.bias.clone(),
        n_values: args.n_values.clone(),
        trials: args.trials,
        test: match args.test {
            TestArg::Classic => TestKind::Classic,
            TestArg::Partitioned => TestKind::Partitioned,
        },
        params,
        partition,
        seed,
        grid: match args.grid {
            GridArg::Mu => GridVar::Mu,
            GridArg::N => GridVar::N,
        },
    };
    let join = |v: &[String]| v.join(",");
    let mut extra = vec![
        ("sim.n_values", join(&args.n_values.iter().map(|n| n.to_string()).collect::<Vec<_>>())),
        ("sim.bias", join(&args.bias.iter().map(|b| b.to_string()).collect::<Vec<_>>())),
        ("sim.trials", args.trials.to_string()),
        ("sim.test", sim.test.to_string()),
        ("sim.grid", sim.grid.to_string()),
        ("sim.bias_mechanism", apcval_core::simulate::BIAS_MECHANISM.to_string()),
    ];
    if let ErrorModel::Normal { mu_s, nu_s, mu_u, nu_u } = sim.error_model {
        extra.extend([
            ("sim.model", "normal".to_string()),
            ("sim.mu_s", mu_s.to_string()),
            ("sim.nu_s", nu_s.to_string()),
            ("sim.mu_u", mu_u.to_string()),
            ("sim.nu_u", nu_u.to_string()),
        ]);
    } else {
        extra.push(("sim.model", "empirical".to_string()));
    }
    let inputs = inputs(config, common, &extra);
    if args.audit {
        let audit = user_risk_audit(&sim)?;
        return emit(common, "user_risk_audit", Some(seed), inputs, audit);
    }
    let curves = run_simulation(&sim)?;
    match common.format {
        FormatArg::Csv => write_output(common.out.as_deref(), &success_curves_csv(&curves)?),
        FormatArg::Json => emit(common, "simulate", Some(seed), inputs, curves),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
