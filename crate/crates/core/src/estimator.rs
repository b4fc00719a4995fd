//! Leave-q-out estimation and the equivalence decision.
//!
//! Two entry levels exist. The record level ([`evaluate_classic`],
//! [`evaluate_partitioned`]) works on campaign records and first normalizes
//! counting errors by the estimated mean manual count. The difference level
//! ([`evaluate_differences`], [`evaluate_strata`]) takes relative differences
//! directly and is what the simulation harness drives.
//!
//! In the partitioned test every unsafe DOP is counted and only a random quota
//! `q` of the safe DOP. The bias estimate reweights counted safe DOP by `1/q`:
//!
//! ```text
//! D̂_q = (N_s/n)·D̄_sq + (N_u/n)·D̄_u
//! ν̂²  = (N_s/n)·max(ν̂_sq, ν_min)²/q + (N_u/n)·max(ν̂_u, ν_min)² + (N_s·N_u/n²)·(D̄_sq − D̄_u)²
//! ```
//!
//! and the test passes when `D̂_q ± z_{1-α/2}·ν̂/√n` lies within `[-Δ, Δ]`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::domain::{DopRecord, Label, PartitionStats, TestParams};
use crate::error::{Error, Result};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Classic,
    Partitioned,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::Classic => "classic",
            TestKind::Partitioned => "partitioned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledVariance {
    pub variance: f64,
    pub clamped_s: bool,
    pub clamped_u: bool,
}

/// Outcome of one equivalence test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub test: TestKind,
    pub d_hat: f64,
    pub nu_hat: f64,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    /// Critical value `z_{1-alpha/2}`; alpha is the total user risk.
    pub z: f64,
    pub delta: f64,
    pub nu_min: f64,
    pub verdict: Verdict,
    pub stats: PartitionStats,
    pub clamped_s: bool,
    pub clamped_u: bool,
    /// Stratified ν̂ when the reported ν̂ came from the whole-sample route
    /// (fully counted safe stratum).
    pub nu_hat_stratified: Option<f64>,
    pub warnings: Vec<String>,
}

/// Relative difference of one evaluable record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRow {
    pub dop_id: String,
    pub d: f64,
    pub stratum: Label,
}

/// Spreadsheet row: `d_hat = Σ weight·d / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorksheetRow {
    pub dop_id: String,
    pub d: f64,
    pub stratum: Label,
    pub weight: f64,
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Empirical standard deviation with the `n - 1` denominator; 0 below two values.
pub(crate) fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Per-stratum statistics from already normalized relative differences.
///
/// `n_s` is the size of the safe stratum; `safe_sampled` holds the values of
/// its counted members.
pub fn stratum_stats(safe_sampled: &[f64], n_s: usize, unsafe_values: &[f64]) -> Result<PartitionStats> {
    let counted = safe_sampled.len();
    if counted > n_s {
        return Err(Error::param("n_s", "fewer safe records than counted safe records"));
    }
    if n_s > 0 && counted == 0 {
        return Err(Error::Degenerate(
            "safe partition is non-empty but no safe record was counted".into(),
        ));
    }
    let n_u = unsafe_values.len();
    if n_s + n_u == 0 {
        return Err(Error::Degenerate("no records to evaluate".into()));
    }
    Ok(PartitionStats {
        n: n_s + n_u,
        n_s,
        n_u,
        n_s_counted: counted,
        q_effective: if n_s == 0 { 1.0 } else { counted as f64 / n_s as f64 },
        d_bar_s: mean(safe_sampled),
        d_bar_u: mean(unsafe_values),
        nu_hat_s: sample_sd(safe_sampled),
        nu_hat_u: sample_sd(unsafe_values),
        m_hat_q: None,
    })
}

/// Composite point estimate `(N_s/n)·D̄_sq + (N_u/n)·D̄_u`.
pub fn dhat_q(stats: &PartitionStats) -> Result<f64> {
    if stats.n == 0 {
        return Err(Error::Degenerate("no records to evaluate".into()));
    }
    let n = stats.n as f64;
    Ok(stats.n_s as f64 / n * stats.d_bar_s + stats.n_u as f64 / n * stats.d_bar_u)
}

/// Pooled squared relative standard deviation ν̂_q² with the ν_min floor.
pub fn pooled_variance(stats: &PartitionStats, nu_min: f64) -> PooledVariance {
    let n = stats.n as f64;
    let ps = stats.n_s as f64 / n;
    let pu = stats.n_u as f64 / n;
    let clamped_s = stats.n_s > 0 && stats.nu_hat_s < nu_min;
    let clamped_u = stats.n_u > 0 && stats.nu_hat_u < nu_min;
    let sd_s = stats.nu_hat_s.max(nu_min);
    let sd_u = stats.nu_hat_u.max(nu_min);
    let gap = stats.d_bar_s - stats.d_bar_u;
    let variance = ps * sd_s * sd_s / stats.q_effective + pu * sd_u * sd_u + ps * pu * gap * gap;
    PooledVariance {
        variance,
        clamped_s,
        clamped_u,
    }
}

/// `[d_hat ± z_{1-alpha/2}·nu_hat/√n]`.
pub fn confidence_interval(d_hat: f64, nu_hat: f64, n: usize, alpha: f64) -> ConfidenceInterval {
    let half = normal::z_two_sided(alpha) * nu_hat / (n as f64).sqrt();
    ConfidenceInterval {
        low: d_hat - half,
        high: d_hat + half,
    }
}

/// Pass iff the interval lies in the closed band `[-delta, delta]`.
pub fn equivalence_verdict(ci: &ConfidenceInterval, delta: f64) -> Verdict {
    if -delta <= ci.low && ci.high <= delta {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    test: TestKind,
    d_hat: f64,
    nu_hat: f64,
    stats: PartitionStats,
    params: &TestParams,
    clamped: (bool, bool),
    nu_hat_stratified: Option<f64>,
    warnings: Vec<String>,
) -> EvaluationReport {
    let ci = confidence_interval(d_hat, nu_hat, stats.n, params.alpha);
    EvaluationReport {
        test,
        d_hat,
        nu_hat,
        n: stats.n,
        ci_low: ci.low,
        ci_high: ci.high,
        alpha: params.alpha,
        z: params.z_alpha(),
        delta: params.delta,
        nu_min: params.nu_min,
        verdict: equivalence_verdict(&ci, params.delta),
        stats,
        clamped_s: clamped.0,
        clamped_u: clamped.1,
        nu_hat_stratified,
        warnings,
    }
}

/// Classic equivalence test on relative differences.
pub fn evaluate_differences(values: &[f64], params: &TestParams) -> Result<EvaluationReport> {
    params.validate()?;
    let stats = stratum_stats(&[], 0, values)?;
    let mut warnings = Vec::new();
    if values.len() < 2 {
        warnings.push(format!(
            "degenerate sample: {} record(s), standard deviation set to nu_min",
            values.len()
        ));
    }
    let clamped = stats.nu_hat_u < params.nu_min;
    let nu_hat = stats.nu_hat_u.max(params.nu_min);
    Ok(finish(
        TestKind::Classic,
        stats.d_bar_u,
        nu_hat,
        stats,
        params,
        (false, clamped),
        None,
        warnings,
    ))
}

fn degenerate_stratum_warnings(stats: &PartitionStats) -> Vec<String> {
    let mut warnings = Vec::new();
    if stats.n_s > 0 && stats.n_s_counted < 2 {
        warnings.push("degenerate safe stratum: fewer than 2 counted records, standard deviation set to nu_min".into());
    }
    if stats.n_u == 1 {
        warnings.push("degenerate unsafe stratum: 1 record, standard deviation set to nu_min".into());
    }
    warnings
}

/// Partitioned equivalence test on relative differences.
///
/// When every safe record was counted (or the safe stratum is empty) the test
/// is evaluated exactly like the classic test on `safe_sampled ++ unsafe_values`;
/// the stratified ν̂ is then kept in `nu_hat_stratified` for audit.
pub fn evaluate_strata(
    safe_sampled: &[f64],
    n_s: usize,
    unsafe_values: &[f64],
    params: &TestParams,
) -> Result<EvaluationReport> {
    params.validate()?;
    let stats = stratum_stats(safe_sampled, n_s, unsafe_values)?;
    let pooled = pooled_variance(&stats, params.nu_min);
    if stats.n_s_counted == stats.n_s {
        let all: Vec<f64> = safe_sampled.iter().chain(unsafe_values).copied().collect();
        let classic = evaluate_differences(&all, params)?;
        return Ok(fully_counted(classic, stats, pooled.variance.sqrt()));
    }
    let d_hat = dhat_q(&stats)?;
    let warnings = degenerate_stratum_warnings(&stats);
    Ok(finish(
        TestKind::Partitioned,
        d_hat,
        pooled.variance.sqrt(),
        stats,
        params,
        (pooled.clamped_s, pooled.clamped_u),
        None,
        warnings,
    ))
}

fn fully_counted(mut classic: EvaluationReport, stats: PartitionStats, stratified: f64) -> EvaluationReport {
    classic.test = TestKind::Partitioned;
    classic.stats = PartitionStats {
        m_hat_q: classic.stats.m_hat_q,
        ..stats
    };
    classic.nu_hat_stratified = Some(stratified);
    classic
        .warnings
        .push("safe partition fully counted: evaluated as the classic test".into());
    classic
}

fn unlabeled_ids(records: &[DopRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.label == Label::Unlabeled)
        .map(|r| r.dop_id.clone())
        .collect()
}

/// Records that block a partitioned evaluation.
pub fn partitioned_precondition_failures(records: &[DopRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| match r.label {
            Label::Unlabeled => true,
            Label::Unsafe => r.m_final.is_none(),
            Label::Safe => match r.sampled {
                None => true,
                Some(true) => r.m_final.is_none(),
                Some(false) => false,
            },
        })
        .map(|r| r.dop_id.clone())
        .collect()
}

/// Share of safe records that were sampled; 1 for an empty safe partition.
pub fn realized_quota(records: &[DopRecord]) -> Result<f64> {
    let n_s = records.iter().filter(|r| r.label == Label::Safe).count();
    if n_s == 0 {
        return Ok(1.0);
    }
    let counted = records
        .iter()
        .filter(|r| r.label == Label::Safe && r.sampled == Some(true))
        .count();
    if counted == 0 {
        return Err(Error::Degenerate(
            "safe partition is non-empty but no safe record was sampled".into(),
        ));
    }
    Ok(counted as f64 / n_s as f64)
}

/// Leave-q-out estimate of the mean manual count,
/// `(Σ_unsafe M + Σ_sampled safe M / q) / n`.
pub fn mhat_q(records: &[DopRecord], q_effective: f64) -> Result<f64> {
    if !(q_effective > 0.0) {
        return Err(Error::param("q_effective", "must be > 0"));
    }
    if records.is_empty() {
        return Err(Error::Degenerate("no records to evaluate".into()));
    }
    let unlabeled = unlabeled_ids(records);
    if !unlabeled.is_empty() {
        return Err(Error::Preconditions {
            count: unlabeled.len(),
            ids: unlabeled,
        });
    }
    // integer sums keep the q = 1 case bit-identical to the plain mean
    let mut unsafe_sum: u64 = 0;
    let mut safe_sum: u64 = 0;
    for r in records.iter().filter(|r| r.is_evaluable()) {
        let m = r
            .m_final
            .ok_or_else(|| Error::record(&r.dop_id, "missing ground truth"))?;
        match r.label {
            Label::Unsafe => unsafe_sum += u64::from(m),
            _ => safe_sum += u64::from(m),
        }
    }
    Ok((unsafe_sum as f64 + safe_sum as f64 / q_effective) / records.len() as f64)
}

/// `D_i = (K_i − M_i) / m_hat` for every unsafe and every sampled safe record.
pub fn relative_differences(records: &[DopRecord], m_hat: f64) -> Result<Vec<DifferenceRow>> {
    if !(m_hat > 0.0) {
        return Err(Error::Degenerate(format!(
            "mean manual count is {m_hat}; no boarding passengers"
        )));
    }
    records
        .iter()
        .filter(|r| r.is_evaluable())
        .map(|r| {
            let x = r
                .error()
                .ok_or_else(|| Error::record(&r.dop_id, "missing ground truth"))?;
            Ok(DifferenceRow {
                dop_id: r.dop_id.clone(),
                d: x as f64 / m_hat,
                stratum: r.label,
            })
        })
        .collect()
}

/// Classic equivalence test: every record must carry ground truth.
pub fn evaluate_classic(records: &[DopRecord], params: &TestParams) -> Result<EvaluationReport> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.m_final.is_none())
        .map(|r| r.dop_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Preconditions {
            count: missing.len(),
            ids: missing,
        });
    }
    if records.is_empty() {
        return Err(Error::Degenerate("no records to evaluate".into()));
    }
    let total: u64 = records.iter().filter_map(|r| r.m_final).map(u64::from).sum();
    let m_bar = total as f64 / records.len() as f64;
    if !(m_bar > 0.0) {
        return Err(Error::Degenerate(
            "mean manual count is 0; no boarding passengers".into(),
        ));
    }
    let values: Vec<f64> = records
        .iter()
        .map(|r| r.error().unwrap_or_default() as f64 / m_bar)
        .collect();
    let mut report = evaluate_differences(&values, params)?;
    report.stats.m_hat_q = Some(m_bar);
    Ok(report)
}

/// Partitioned equivalence test on labeled, sampled and counted records.
pub fn evaluate_partitioned(records: &[DopRecord], params: &TestParams) -> Result<EvaluationReport> {
    params.validate()?;
    let blocked = partitioned_precondition_failures(records);
    if !blocked.is_empty() {
        return Err(Error::Preconditions {
            count: blocked.len(),
            ids: blocked,
        });
    }
    if records.is_empty() {
        return Err(Error::Degenerate("no records to evaluate".into()));
    }
    let q_eff = realized_quota(records)?;
    let m_hat = mhat_q(records, q_eff)?;
    let n_s = records.iter().filter(|r| r.label == Label::Safe).count();

    if q_eff == 1.0 {
        let classic = evaluate_classic(records, params)?;
        let rows = relative_differences(records, m_hat)?;
        let (safe, unsafe_): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.stratum == Label::Safe);
        let safe: Vec<f64> = safe.iter().map(|r| r.d).collect();
        let unsafe_: Vec<f64> = unsafe_.iter().map(|r| r.d).collect();
        let mut stats = stratum_stats(&safe, n_s, &unsafe_)?;
        stats.m_hat_q = Some(m_hat);
        let stratified = pooled_variance(&stats, params.nu_min).variance.sqrt();
        return Ok(fully_counted(classic, stats, stratified));
    }

    let rows = relative_differences(records, m_hat)?;
    let safe: Vec<f64> = rows.iter().filter(|r| r.stratum == Label::Safe).map(|r| r.d).collect();
    let unsafe_: Vec<f64> = rows.iter().filter(|r| r.stratum == Label::Unsafe).map(|r| r.d).collect();
    let mut report = evaluate_strata(&safe, n_s, &unsafe_, params)?;
    report.stats.m_hat_q = Some(m_hat);
    Ok(report)
}

/// Intermediate table from which the partitioned result can be recomputed by
/// hand: `d_hat = Σ weight·d / n` with `n` the number of labeled records.
pub fn worksheet(records: &[DopRecord]) -> Result<Vec<WorksheetRow>> {
    let blocked = partitioned_precondition_failures(records);
    if !blocked.is_empty() {
        return Err(Error::Preconditions {
            count: blocked.len(),
            ids: blocked,
        });
    }
    let q_eff = realized_quota(records)?;
    let m_hat = mhat_q(records, q_eff)?;
    Ok(relative_differences(records, m_hat)?
        .into_iter()
        .map(|row| WorksheetRow {
            weight: if row.stratum == Label::Safe { 1.0 / q_eff } else { 1.0 },
            dop_id: row.dop_id,
            d: row.d,
            stratum: row.stratum,
        })
        .collect())
}
