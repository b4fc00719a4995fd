//! Cost parameters derived from video durations and labor rates.
//!
//! The counting cost of one DOP is its video time in hours times the labor
//! factor `r_av` times the hourly rate. Unsafe DOP always incur the full
//! `(1 + r_S)` counting effort; the split of safe-DOP cost into a basic part
//! `c_s0` and a quota-dependent part `c_sZ` depends on the workflow.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::domain::{CostParams, CostRates, DopRecord, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostScheme {
    /// Classification without a first manual count.
    NoFirstCount,
    /// The first manual count is part of the classification.
    WithFirstCount,
    /// Two-stage classification with reclassified DOP.
    Combined,
}

impl fmt::Display for CostScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostScheme::NoFirstCount => "no_first_count",
            CostScheme::WithFirstCount => "with_first_count",
            CostScheme::Combined => "combined",
        })
    }
}

impl FromStr for CostScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_first_count" => Ok(CostScheme::NoFirstCount),
            "with_first_count" => Ok(CostScheme::WithFirstCount),
            "combined" => Ok(CostScheme::Combined),
            other => Err(Error::param("costs.scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordCost {
    pub dop_id: String,
    pub counting_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub scheme: CostScheme,
    pub rates: CostRates,
    pub per_record: Vec<RecordCost>,
    pub n_s: usize,
    pub n_u: usize,
    pub mean_counting_cost: f64,
    pub params: CostParams,
    pub warnings: Vec<String>,
}

/// `duration_s / 3600 · r_av · c_labor`.
pub fn counting_cost(duration_s: f64, rates: &CostRates) -> f64 {
    duration_s / 3600.0 * rates.r_av * rates.c_labor
}

struct Strata<'a> {
    safe: Vec<(&'a DopRecord, f64)>,
    unsafe_mean: f64,
    per_record: Vec<RecordCost>,
    n_u: usize,
    mean_all: f64,
    warnings: Vec<String>,
}

fn split<'a>(records: &'a [DopRecord], rates: &CostRates) -> Result<Strata<'a>> {
    rates.validate()?;
    let unlabeled: Vec<String> = records
        .iter()
        .filter(|r| r.label == Label::Unlabeled)
        .map(|r| r.dop_id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(Error::Preconditions {
            count: unlabeled.len(),
            ids: unlabeled,
        });
    }
    let mut safe = Vec::new();
    let mut unsafe_costs = Vec::new();
    let mut per_record = Vec::with_capacity(records.len());
    for r in records {
        if !(r.duration_s >= 0.0) {
            return Err(Error::record(&r.dop_id, "duration must be >= 0"));
        }
        let c = counting_cost(r.duration_s, rates);
        per_record.push(RecordCost {
            dop_id: r.dop_id.clone(),
            counting_cost: c,
        });
        match r.label {
            Label::Safe => safe.push((r, c)),
            _ => unsafe_costs.push(c),
        }
    }
    let mut warnings = Vec::new();
    if safe.is_empty() {
        warnings.push("no safe records: safe cost components set to 0".into());
    }
    if unsafe_costs.is_empty() {
        warnings.push("no unsafe records: c_u set to 0".into());
    }
    let mean_all = if per_record.is_empty() {
        0.0
    } else {
        per_record.iter().map(|c| c.counting_cost).sum::<f64>() / per_record.len() as f64
    };
    Ok(Strata {
        n_u: unsafe_costs.len(),
        unsafe_mean: crate::estimator::mean(&unsafe_costs),
        safe,
        per_record,
        mean_all,
        warnings,
    })
}

fn breakdown(scheme: CostScheme, rates: &CostRates, strata: Strata<'_>, c_s0: f64, c_sz: f64) -> CostBreakdown {
    let has_safe = !strata.safe.is_empty();
    let has_unsafe = strata.n_u > 0;
    CostBreakdown {
        scheme,
        rates: *rates,
        n_s: strata.safe.len(),
        n_u: strata.n_u,
        mean_counting_cost: strata.mean_all,
        params: CostParams {
            c_u: if has_unsafe {
                (1.0 + rates.r_s) * strata.unsafe_mean + rates.recording
            } else {
                0.0
            },
            c_s0: if has_safe { c_s0 + rates.recording } else { 0.0 },
            c_sz: if has_safe { c_sz } else { 0.0 },
        },
        per_record: strata.per_record,
        warnings: strata.warnings,
    }
}

fn safe_mean(strata: &Strata<'_>, f: impl Fn(&DopRecord, f64) -> f64) -> f64 {
    if strata.safe.is_empty() {
        return 0.0;
    }
    strata.safe.iter().map(|&(r, c)| f(r, c)).sum::<f64>() / strata.safe.len() as f64
}

/// Safe DOP are classified without any manual count:
/// `c_s0 = 0`, `c_sZ = (1 + r_S)·mean safe counting cost`.
pub fn costs_no_first_count(records: &[DopRecord], rates: &CostRates) -> Result<CostBreakdown> {
    let strata = split(records, rates)?;
    let c_sz = (1.0 + rates.r_s) * safe_mean(&strata, |_, c| c);
    Ok(breakdown(CostScheme::NoFirstCount, rates, strata, 0.0, c_sz))
}

/// The first manual count is spent on every DOP during classification:
/// `c_s0 = mean safe counting cost`, `c_sZ = r_S·mean safe counting cost`.
pub fn costs_with_first_count(records: &[DopRecord], rates: &CostRates) -> Result<CostBreakdown> {
    let strata = split(records, rates)?;
    let mean = safe_mean(&strata, |_, c| c);
    Ok(breakdown(CostScheme::WithFirstCount, rates, strata, mean, rates.r_s * mean))
}

/// Two-stage classification. `reclassified[dop_id]` is true for safe DOP that
/// were first classified unsafe and reclassified after their first manual
/// count; their first count moves into the basic cost.
pub fn costs_combined(
    records: &[DopRecord],
    reclassified: &BTreeMap<String, bool>,
    rates: &CostRates,
) -> Result<CostBreakdown> {
    let strata = split(records, rates)?;
    let mut flags = Vec::with_capacity(strata.safe.len());
    for (r, _) in &strata.safe {
        let w = reclassified
            .get(&r.dop_id)
            .ok_or_else(|| Error::record(&r.dop_id, "missing reclassification flag"))?;
        flags.push(if *w { 1.0 } else { 0.0 });
    }
    let n = flags.len().max(1) as f64;
    let c_s0 = strata.safe.iter().zip(&flags).map(|(&(_, c), w)| w * c).sum::<f64>() / n;
    let c_sz = strata
        .safe
        .iter()
        .zip(&flags)
        .map(|(&(_, c), w)| (1.0 - w + rates.r_s) * c)
        .sum::<f64>()
        / n;
    Ok(breakdown(CostScheme::Combined, rates, strata, c_s0, c_sz))
}
