//! Monte Carlo and analytic studies of test success probability.
//!
//! Simulated campaigns are generated directly at the level of relative
//! differences `D`: each DOP is labeled safe with probability `p_s`, gets a
//! difference drawn from its stratum's error model, and the configured test is
//! then run on the result. A bias sweep shifts every drawn value by the same
//! amount so that the population mean equals the requested `D̄`.
//!
//! Every trial owns its own random stream, derived from `(seed, grid point,
//! trial)`, so results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::classify::draw_sample_with;
use crate::domain::{DopRecord, Label, PartitionParams, TestParams};
use crate::error::{Error, Result};
use crate::estimator::{
    dhat_q, evaluate_differences, evaluate_strata, mean, mhat_q, realized_quota,
    relative_differences, stratum_stats, TestKind,
};
use crate::normal;

/// How the bias sweep moves the error distribution.
pub const BIAS_MECHANISM: &str = "additive shift of every drawn D value";

/// Distribution of relative differences per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModel {
    Normal {
        mu_s: f64,
        nu_s: f64,
        mu_u: f64,
        nu_u: f64,
    },
    /// With-replacement resampling from observed differences.
    Empirical { safe: Vec<f64>, unsafe_pool: Vec<f64> },
}

impl ErrorModel {
    /// One normal distribution for both strata.
    pub fn normal(mu: f64, nu: f64) -> Self {
        ErrorModel::Normal {
            mu_s: mu,
            nu_s: nu,
            mu_u: mu,
            nu_u: nu,
        }
    }

    /// One resample pool for both strata.
    pub fn pooled(pool: Vec<f64>) -> Self {
        ErrorModel::Empirical {
            safe: pool.clone(),
            unsafe_pool: pool,
        }
    }

    pub fn validate(&self, p_s: f64) -> Result<()> {
        match self {
            ErrorModel::Normal { mu_s, nu_s, mu_u, nu_u } => {
                if !(mu_s.is_finite() && mu_u.is_finite()) {
                    return Err(Error::param("error_model", "means must be finite"));
                }
                if !(nu_s.is_finite() && *nu_s >= 0.0 && nu_u.is_finite() && *nu_u >= 0.0) {
                    return Err(Error::param("error_model", "standard deviations must be finite and >= 0"));
                }
            }
            ErrorModel::Empirical { safe, unsafe_pool } => {
                if p_s > 0.0 && safe.is_empty() {
                    return Err(Error::param("error_model", "empty safe resample pool"));
                }
                if p_s < 1.0 && unsafe_pool.is_empty() {
                    return Err(Error::param("error_model", "empty unsafe resample pool"));
                }
                if safe.iter().chain(unsafe_pool).any(|v| !v.is_finite()) {
                    return Err(Error::param("error_model", "pool values must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Per-stratum means `(μ_s, μ_u)`.
    pub fn stratum_means(&self) -> (f64, f64) {
        match self {
            ErrorModel::Normal { mu_s, mu_u, .. } => (*mu_s, *mu_u),
            ErrorModel::Empirical { safe, unsafe_pool } => (mean(safe), mean(unsafe_pool)),
        }
    }

    /// Population standard deviations `(ν_s, ν_u)`.
    pub fn stratum_sds(&self) -> (f64, f64) {
        let pop_sd = |v: &[f64]| {
            let m = mean(v);
            if v.is_empty() {
                0.0
            } else {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
            }
        };
        match self {
            ErrorModel::Normal { nu_s, nu_u, .. } => (*nu_s, *nu_u),
            ErrorModel::Empirical { safe, unsafe_pool } => (pop_sd(safe), pop_sd(unsafe_pool)),
        }
    }

    /// Population mean `p_s·μ_s + p_u·μ_u`.
    pub fn mean(&self, p_s: f64) -> f64 {
        let (mu_s, mu_u) = self.stratum_means();
        p_s * mu_s + (1.0 - p_s) * mu_u
    }

    /// Population standard deviation including the between-strata term.
    pub fn nu(&self, p_s: f64) -> f64 {
        let (mu_s, mu_u) = self.stratum_means();
        let (nu_s, nu_u) = self.stratum_sds();
        crate::classify::composite_nu(p_s, nu_s, nu_u, mu_s, mu_u)
    }

    fn sampler(&self) -> Result<Sampler<'_>> {
        Ok(match self {
            ErrorModel::Normal { mu_s, nu_s, mu_u, nu_u } => Sampler::Normal(
                Normal::new(*mu_s, *nu_s).map_err(|e| Error::param("error_model", e.to_string()))?,
                Normal::new(*mu_u, *nu_u).map_err(|e| Error::param("error_model", e.to_string()))?,
            ),
            ErrorModel::Empirical { safe, unsafe_pool } => Sampler::Empirical(safe, unsafe_pool),
        })
    }
}

enum Sampler<'a> {
    Normal(Normal<f64>, Normal<f64>),
    Empirical(&'a [f64], &'a [f64]),
}

impl Sampler<'_> {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, safe: bool) -> f64 {
        match (self, safe) {
            (Sampler::Normal(s, _), true) => s.sample(rng),
            (Sampler::Normal(_, u), false) => u.sample(rng),
            (Sampler::Empirical(s, _), true) => s[rng.random_range(0..s.len())],
            (Sampler::Empirical(_, u), false) => u[rng.random_range(0..u.len())],
        }
    }
}

/// Resample pools from the evaluable records of a labeled, counted campaign.
pub fn empirical_pools(records: &[DopRecord]) -> Result<ErrorModel> {
    let q = realized_quota(records)?;
    let m_hat = mhat_q(records, q)?;
    let rows = relative_differences(records, m_hat)?;
    let pick = |label: Label| -> Vec<f64> {
        rows.iter().filter(|r| r.stratum == label).map(|r| r.d).collect()
    };
    Ok(ErrorModel::Empirical {
        safe: pick(Label::Safe),
        unsafe_pool: pick(Label::Unsafe),
    })
}

/// Which variable runs along a success curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridVar {
    /// One curve per sample size, bias on the x axis.
    #[default]
    Mu,
    /// One curve per bias, sample size on the x axis.
    N,
}

impl fmt::Display for GridVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridVar::Mu => "mu",
            GridVar::N => "n",
        })
    }
}

impl FromStr for GridVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(GridVar::Mu),
            "n" => Ok(GridVar::N),
            other => Err(Error::param("grid", format!("expected mu|n, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub error_model: ErrorModel,
    /// Target population means `D̄`.
    pub bias_sweep: Vec<f64>,
    pub n_values: Vec<usize>,
    pub trials: usize,
    pub test: TestKind,
    pub params: TestParams,
    pub partition: PartitionParams,
    pub seed: u64,
    #[serde(default)]
    pub grid: GridVar,
}

impl SimConfig {
    pub const DEFAULT_TRIALS: usize = 10_000;

    pub fn new(error_model: ErrorModel, bias_sweep: Vec<f64>, n_values: Vec<usize>) -> Self {
        SimConfig {
            error_model,
            bias_sweep,
            n_values,
            trials: Self::DEFAULT_TRIALS,
            test: TestKind::Classic,
            params: TestParams::default(),
            partition: PartitionParams::SUGGESTED_ALGORITHMIC,
            seed: 0,
            grid: GridVar::Mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.partition.validate()?;
        self.error_model.validate(self.partition.p_s)?;
        if self.trials == 0 {
            return Err(Error::param("trials", "must be >= 1"));
        }
        if self.n_values.is_empty() || self.bias_sweep.is_empty() {
            return Err(Error::param("grid", "n_values and bias_sweep must be non-empty"));
        }
        if self.n_values.iter().any(|&n| n < 2) {
            return Err(Error::param("n_values", "every n must be >= 2"));
        }
        if self.bias_sweep.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("bias_sweep", "values must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessPoint {
    pub grid_value: f64,
    pub n: usize,
    pub mu: f64,
    pub passes: u64,
    pub trials: u64,
    pub pass_rate: f64,
    /// `√(p(1−p)/trials)`.
    pub mc_se: f64,
    /// Pass probability with `ν̂` fixed at the true `ν`; normal model only.
    pub analytic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub grid_var: GridVar,
    /// Name and value of the variable held fixed along the curve.
    pub fixed_var: GridVar,
    pub fixed_value: f64,
    pub test: TestKind,
    pub bias_mechanism: String,
    pub points: Vec<SuccessPoint>,
}

/// Monte Carlo standard error of a proportion.
pub fn mc_se(pass_rate: f64, trials: u64) -> f64 {
    (pass_rate * (1.0 - pass_rate) / trials as f64).sqrt()
}

/// Pass probability of the classic test when `D̄ ~ N(μ, ν²/n)` and `ν̂ = ν`.
///
/// For `ν = 0` the limit is returned: 1 inside `(−Δ, Δ)`, 0 outside.
pub fn analytic_success(mu: f64, nu: f64, n: usize, alpha: f64, delta: f64) -> f64 {
    if nu <= 0.0 {
        return if mu.abs() < delta { 1.0 } else { 0.0 };
    }
    let z = normal::z_two_sided(alpha);
    let s = (n as f64).sqrt() / nu;
    let p = normal::cdf((delta - mu) * s - z) + normal::cdf((delta + mu) * s - z) - 1.0;
    p.max(0.0)
}

/// `ν` governing `D̂_q` for the partitioned test: `√(n·Var(D̂_q))`.
pub fn effective_nu(model: &ErrorModel, partition: &PartitionParams) -> f64 {
    let (mu_s, mu_u) = model.stratum_means();
    let (nu_s, nu_u) = model.stratum_sds();
    let p_s = partition.p_s;
    let p_u = 1.0 - p_s;
    (p_s * nu_s * nu_s / partition.q + p_u * nu_u * nu_u + p_s * p_u * (mu_s - mu_u).powi(2)).sqrt()
}

/// `Var(D̂_q)` under Bernoulli labels and quota sampling.
pub fn dhat_variance(model: &ErrorModel, partition: &PartitionParams, n: usize) -> f64 {
    effective_nu(model, partition).powi(2) / n as f64
}

/// Child generator for one trial.
pub fn trial_rng(seed: u64, point: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((point as u64) << 32) | trial as u64);
    rng
}

/// One simulated campaign: `(safe differences, unsafe differences)`.
fn draw_campaign<R: Rng + ?Sized>(
    rng: &mut R,
    sampler: &Sampler<'_>,
    n: usize,
    p_s: f64,
    shift: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut safe = Vec::with_capacity((n as f64 * p_s) as usize + 8);
    let mut unsafe_ = Vec::with_capacity(n - safe.capacity().min(n));
    for _ in 0..n {
        let is_safe = rng.random_bool(p_s);
        let d = sampler.draw(rng, is_safe) + shift;
        if is_safe {
            safe.push(d);
        } else {
            unsafe_.push(d);
        }
    }
    (safe, unsafe_)
}

fn subsample<R: Rng + ?Sized>(rng: &mut R, safe: &[f64], q: f64) -> Result<Vec<f64>> {
    if safe.is_empty() {
        return Ok(Vec::new());
    }
    Ok(draw_sample_with(rng, safe.len(), q)?
        .into_iter()
        .map(|i| safe[i])
        .collect())
}

fn run_trial(
    config: &SimConfig,
    sampler: &Sampler<'_>,
    n: usize,
    shift: f64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let (safe, unsafe_) = draw_campaign(rng, sampler, n, config.partition.p_s, shift);
    let report = match config.test {
        TestKind::Classic => {
            let all: Vec<f64> = safe.iter().chain(&unsafe_).copied().collect();
            evaluate_differences(&all, &config.params)?
        }
        TestKind::Partitioned => {
            let sampled = subsample(rng, &safe, config.partition.q)?;
            evaluate_strata(&sampled, safe.len(), &unsafe_, &config.params)?
        }
    };
    Ok(report.verdict.passed())
}

fn run_point(config: &SimConfig, sampler: &Sampler<'_>, point: usize, n: usize, mu: f64) -> Result<SuccessPoint> {
    let shift = mu - config.error_model.mean(config.partition.p_s);
    let passes = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(config.seed, point, t);
            run_trial(config, sampler, n, shift, &mut rng).map(u64::from)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let trials = config.trials as u64;
    let pass_rate = passes as f64 / trials as f64;
    let analytic = match config.error_model {
        ErrorModel::Normal { .. } => {
            let nu = match config.test {
                TestKind::Classic => config.error_model.nu(config.partition.p_s),
                TestKind::Partitioned => effective_nu(&config.error_model, &config.partition),
            };
            Some(analytic_success(mu, nu, n, config.params.alpha, config.params.delta))
        }
        ErrorModel::Empirical { .. } => None,
    };
    Ok(SuccessPoint {
        grid_value: 0.0,
        n,
        mu,
        passes,
        trials,
        pass_rate,
        mc_se: mc_se(pass_rate, trials),
        analytic,
    })
}

/// Pass rates over the grid `n_values × bias_sweep`, grouped into curves.
pub fn run_simulation(config: &SimConfig) -> Result<Vec<SuccessCurve>> {
    config.validate()?;
    let sampler = config.error_model.sampler()?;
    let mut curves = Vec::new();
    let mut point = 0usize;
    let (outer, inner) = match config.grid {
        GridVar::Mu => (config.n_values.len(), config.bias_sweep.len()),
        GridVar::N => (config.bias_sweep.len(), config.n_values.len()),
    };
    for i in 0..outer {
        let mut points = Vec::with_capacity(inner);
        let mut fixed_value = 0.0;
        for j in 0..inner {
            let (n, mu) = match config.grid {
                GridVar::Mu => (config.n_values[i], config.bias_sweep[j]),
                GridVar::N => (config.n_values[j], config.bias_sweep[i]),
            };
            let mut p = run_point(config, &sampler, point, n, mu)?;
            point += 1;
            (p.grid_value, fixed_value) = match config.grid {
                GridVar::Mu => (mu, n as f64),
                GridVar::N => (n as f64, mu),
            };
            points.push(p);
        }
        curves.push(SuccessCurve {
            grid_var: config.grid,
            fixed_var: match config.grid {
                GridVar::Mu => GridVar::N,
                GridVar::N => GridVar::Mu,
            },
            fixed_value,
            test: config.test,
            bias_mechanism: BIAS_MECHANISM.into(),
            points,
        });
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditPoint {
    pub n: usize,
    /// Bias at which the pass rate was largest.
    pub worst_mu: f64,
    pub worst_pass_rate: f64,
    pub mc_se: f64,
    /// `α/2 + 4·mc_se`.
    pub limit: f64,
    pub exceeds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRiskAudit {
    pub nominal: f64,
    pub points: Vec<AuditPoint>,
    /// Largest pass rate over the whole grid.
    pub worst_pass_rate: f64,
    pub any_exceeds: bool,
}

/// Worst-case pass rate per `n` over a bias sweep restricted to `|μ| ≥ Δ`.
pub fn user_risk_audit(config: &SimConfig) -> Result<UserRiskAudit> {
    let delta = config.params.delta;
    if config.bias_sweep.iter().any(|m| m.abs() < delta) {
        return Err(Error::param("bias_sweep", "an audit needs |mu| >= delta everywhere"));
    }
    let config = SimConfig {
        grid: GridVar::Mu,
        ..config.clone()
    };
    let nominal = config.params.alpha / 2.0;
    let points: Vec<AuditPoint> = run_simulation(&config)?
        .into_iter()
        .map(|curve| {
            let worst = curve
                .points
                .iter()
                .max_by(|a, b| a.pass_rate.total_cmp(&b.pass_rate))
                .copied()
                .expect("validated grid is non-empty");
            let limit = nominal + 4.0 * worst.mc_se;
            AuditPoint {
                n: worst.n,
                worst_mu: worst.mu,
                worst_pass_rate: worst.pass_rate,
                mc_se: worst.mc_se,
                limit,
                exceeds: worst.pass_rate > limit,
            }
        })
        .collect();
    Ok(UserRiskAudit {
        nominal,
        worst_pass_rate: points.iter().map(|p| p.worst_pass_rate).fold(0.0, f64::max),
        any_exceeds: points.iter().any(|p| p.exceeds),
        points,
    })
}

/// Replications of the point estimate `D̂_q` on simulated campaigns of size `n`.
pub fn replicate_dhat(
    model: &ErrorModel,
    partition: &PartitionParams,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    partition.validate()?;
    model.validate(partition.p_s)?;
    if n < 2 {
        return Err(Error::param("n", "must be >= 2"));
    }
    let sampler = model.sampler()?;
    (0..replications)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 0, t);
            let (safe, unsafe_) = draw_campaign(&mut rng, &sampler, n, partition.p_s, 0.0);
            let sampled = subsample(&mut rng, &safe, partition.q)?;
            dhat_q(&stratum_stats(&sampled, safe.len(), &unsafe_)?)
        })
        .collect()
}
