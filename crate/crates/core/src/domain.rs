//! Records and parameter containers shared by every other module.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Partition label of a door opening phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "s")]
    Safe,
    #[serde(rename = "u")]
    Unsafe,
    #[default]
    #[serde(rename = "")]
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Safe => "s",
            Label::Unsafe => "u",
            Label::Unlabeled => "",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Safe => "safe",
            Label::Unsafe => "unsafe",
            Label::Unlabeled => "unlabeled",
        })
    }
}

/// One door opening phase (DOP).
///
/// `m_final` is the ground-truth manual count `M_i`, `k_auto` the count of the
/// APC system under test `K_i`. `sampled` is the quota indicator `Z`; `None`
/// means the sampler has not run yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DopRecord {
    pub dop_id: String,
    pub duration_s: f64,
    pub m1: Option<u32>,
    pub m2: Option<u32>,
    pub m_sup: Option<u32>,
    pub m_final: Option<u32>,
    pub k_auto: u32,
    pub alg_count: Option<u32>,
    pub alg_confidence: Option<f64>,
    pub label: Label,
    pub sampled: Option<bool>,
}

impl DopRecord {
    /// A bare record carrying only the automatic count.
    pub fn new(dop_id: impl Into<String>, k_auto: u32) -> Self {
        DopRecord {
            dop_id: dop_id.into(),
            duration_s: 0.0,
            m1: None,
            m2: None,
            m_sup: None,
            m_final: None,
            k_auto,
            alg_count: None,
            alg_confidence: None,
            label: Label::Unlabeled,
            sampled: None,
        }
    }

    /// A record whose ground truth was established by two agreeing counters.
    pub fn counted(dop_id: impl Into<String>, m_final: u32, k_auto: u32) -> Self {
        DopRecord {
            m1: Some(m_final),
            m2: Some(m_final),
            m_final: Some(m_final),
            ..DopRecord::new(dop_id, k_auto)
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn with_sampled(mut self, sampled: Option<bool>) -> Self {
        self.sampled = sampled;
        self
    }

    pub fn with_duration(mut self, duration_s: f64) -> Self {
        self.duration_s = duration_s;
        self
    }

    /// Counting error `X_i = K_i - M_i`, when the ground truth is known.
    pub fn error(&self) -> Option<i64> {
        self.m_final.map(|m| i64::from(self.k_auto) - i64::from(m))
    }

    /// Whether this record enters the partitioned evaluation.
    pub fn is_evaluable(&self) -> bool {
        match self.label {
            Label::Unsafe => true,
            Label::Safe => self.sampled == Some(true),
            Label::Unlabeled => false,
        }
    }
}

/// A broken record invariant. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub dop_id: String,
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.dop_id, self.field, self.rule)
    }
}

/// Checks every record invariant and returns the violations found.
pub fn validate_record(record: &DopRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &'static str, rule: &str| {
        out.push(Violation {
            dop_id: record.dop_id.clone(),
            field,
            rule: rule.to_string(),
        })
    };
    if record.dop_id.trim().is_empty() {
        push("dop_id", "dop_id is empty");
    }
    if !(record.duration_s >= 0.0) || !record.duration_s.is_finite() {
        push("duration_s", "duration must be a finite number >= 0");
    }
    if record.m_final.is_some() && record.m1.is_none() {
        push("m1", "ground truth present without a first manual count");
    }
    if let Some(c) = record.alg_confidence {
        if !(0.0..=1.0).contains(&c) {
            push("alg_confidence", "confidence must lie in [0, 1]");
        }
    }
    match record.label {
        Label::Unsafe if record.m_final.is_none() => {
            push("m_final", "unsafe record lacks ground truth");
        }
        Label::Safe if record.sampled == Some(true) && record.m_final.is_none() => {
            push("m_final", "sampled safe record lacks ground truth");
        }
        _ => {}
    }
    out
}

/// Ground truth from two manual counts with a supervisor tie-break.
///
/// `None` signals an incomplete count: the counters disagree (or one is
/// missing) and no supervisor count is available.
pub fn ground_truth(m1: Option<u32>, m2: Option<u32>, m_sup: Option<u32>) -> Option<u32> {
    match (m1, m2) {
        (Some(a), Some(b)) if a == b => Some(a),
        _ => m_sup,
    }
}

/// Test parameters: risks, margin and the variance assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestParams {
    /// Total user risk; the two-sided critical value is `z_{1-alpha/2}`.
    pub alpha: f64,
    /// Manufacturer risk.
    pub beta: f64,
    /// Equivalence margin Δ.
    pub delta: f64,
    /// Planning relative standard deviation ν.
    pub nu: f64,
    /// Floor applied to every empirical standard deviation.
    pub nu_min: f64,
    /// Sample-size buffer factor.
    pub buffer: f64,
}

impl Default for TestParams {
    fn default() -> Self {
        TestParams {
            alpha: 0.05,
            beta: 0.05,
            delta: 0.01,
            nu: 0.20,
            nu_min: 0.03,
            buffer: 1.15,
        }
    }
}

impl TestParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha", "must lie in (0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::param("beta", "must lie in (0, 1)"));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::param("delta", "must be > 0"));
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::param("nu", "must be >= 0"));
        }
        if !(self.nu_min >= 0.0) || !self.nu_min.is_finite() {
            return Err(Error::param("nu_min", "must be >= 0"));
        }
        if !(self.buffer >= 1.0) || !self.buffer.is_finite() {
            return Err(Error::param("buffer", "must be >= 1"));
        }
        Ok(())
    }

    /// Two-sided critical value for the user risk.
    pub fn z_alpha(&self) -> f64 {
        crate::normal::z_two_sided(self.alpha)
    }

    /// Two-sided critical value for the manufacturer risk.
    pub fn z_beta(&self) -> f64 {
        crate::normal::z_two_sided(self.beta)
    }
}

/// Partition planning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    /// Expected safe share p_s.
    pub p_s: f64,
    /// ν_s / ν.
    pub nu_s_ratio: f64,
    /// Counted quota of the safe partition.
    pub q: f64,
}

impl PartitionParams {
    /// Values that work well for algorithm-assisted classification.
    pub const SUGGESTED_ALGORITHMIC: PartitionParams = PartitionParams {
        p_s: 0.9,
        nu_s_ratio: 0.35,
        q: 0.175,
    };

    /// Values that work well for purely manual classification.
    pub const SUGGESTED_MANUAL: PartitionParams = PartitionParams {
        p_s: 0.9,
        nu_s_ratio: 0.35,
        q: 0.35,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_s) {
            return Err(Error::param("p_s", "must lie in [0, 1]"));
        }
        if !(self.nu_s_ratio >= 0.0) || !self.nu_s_ratio.is_finite() {
            return Err(Error::param("nu_s_ratio", "must be >= 0"));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::param("q", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn p_u(&self) -> f64 {
        1.0 - self.p_s
    }
}

/// Per-DOP cost components used by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostParams {
    /// Mean combined (basic + counting) cost of an unsafe DOP.
    pub c_u: f64,
    /// Basic cost of a safe DOP.
    pub c_s0: f64,
    /// Manual counting cost of a safe DOP.
    pub c_sz: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_u", self.c_u), ("c_s0", self.c_s0), ("c_sz", self.c_sz)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be a finite number >= 0"));
            }
        }
        Ok(())
    }

    /// Stricter check used before quota optimization.
    pub fn validate_for_optimization(&self) -> Result<()> {
        self.validate()?;
        if self.c_u <= 0.0 {
            return Err(Error::param("c_u", "must be > 0 for quota optimization"));
        }
        Ok(())
    }
}

/// Rates from which per-DOP costs are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRates {
    /// Labor time per video time.
    pub r_av: f64,
    /// Hourly labor cost.
    pub c_labor: f64,
    /// Surcharge for the second count and the supervisor.
    pub r_s: f64,
    /// Flat recording cost added to every DOP.
    #[serde(default)]
    pub recording: f64,
}

impl Default for CostRates {
    fn default() -> Self {
        CostRates {
            r_av: 0.7,
            c_labor: 20.0,
            r_s: 1.2,
            recording: 0.0,
        }
    }
}

impl CostRates {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_av > 0.0) || !self.r_av.is_finite() {
            return Err(Error::param("costs.r_av", "must be > 0"));
        }
        if !(self.c_labor >= 0.0) || !self.c_labor.is_finite() {
            return Err(Error::param("costs.c_labor", "must be >= 0"));
        }
        if !(self.r_s >= 0.0) || !self.r_s.is_finite() {
            return Err(Error::param("costs.r_s", "must be >= 0"));
        }
        if !(self.recording >= 0.0) || !self.recording.is_finite() {
            return Err(Error::param("costs.recording", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-stratum summary of an evaluated campaign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub n: usize,
    pub n_s: usize,
    pub n_u: usize,
    /// Number of safe records that were counted.
    pub n_s_counted: usize,
    /// Realized quota `n_s_counted / n_s`; 1 when the safe stratum is empty.
    pub q_effective: f64,
    pub d_bar_s: f64,
    pub d_bar_u: f64,
    pub nu_hat_s: f64,
    pub nu_hat_u: f64,
    /// Leave-q-out mean manual count, when evaluated from records.
    pub m_hat_q: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unsafe_without_ground_truth() {
        let r = DopRecord::new("a", 3).with_label(Label::Unsafe);
        let v = validate_record(&r);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "unsafe record lacks ground truth");
        assert_eq!(v[0].field, "m_final");
    }

    #[test]
    fn fully_valid_record() {
        let mut r = DopRecord::new("a", 3);
        r.m1 = Some(3);
        r.m_final = Some(3);
        assert!(validate_record(&r).is_empty());
    }

    #[test]
    fn sampled_safe_without_ground_truth() {
        let r = DopRecord::new("a", 3)
            .with_label(Label::Safe)
            .with_sampled(Some(true));
        let v = validate_record(&r);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "sampled safe record lacks ground truth");
    }

    #[test]
    fn unsampled_safe_needs_no_ground_truth() {
        let r = DopRecord::new("a", 3)
            .with_label(Label::Safe)
            .with_sampled(Some(false));
        assert!(validate_record(&r).is_empty());
    }

    #[test]
    fn ground_truth_without_first_count() {
        let mut r = DopRecord::new("a", 3);
        r.m_final = Some(3);
        let v = validate_record(&r);
        assert_eq!(v[0].field, "m1");
    }

    #[test]
    fn ground_truth_cases() {
        assert_eq!(ground_truth(Some(4), Some(4), None), Some(4));
        assert_eq!(ground_truth(Some(4), Some(5), Some(5)), Some(5));
        assert_eq!(ground_truth(Some(4), Some(5), None), None);
    }

    #[test]
    fn parameter_validation() {
        assert!(TestParams::default().validate().is_ok());
        let bad = TestParams {
            buffer: 0.9,
            ..TestParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = PartitionParams {
            p_s: 0.9,
            nu_s_ratio: 0.35,
            q: 0.0,
        };
        assert!(bad.validate().is_err());
        assert!(PartitionParams::SUGGESTED_ALGORITHMIC.validate().is_ok());
        let costs = CostParams {
            c_u: 0.0,
            c_s0: 0.0,
            c_sz: 1.0,
        };
        assert!(costs.validate().is_ok());
        assert!(costs.validate_for_optimization().is_err());
    }

    fn any_record() -> impl Strategy<Value = DopRecord> {
        (
            (
                prop::option::of(0u32..10),
                prop::option::of(0u32..10),
                prop::option::of(0u32..10),
                prop::option::of(0u32..10),
            ),
            0u32..10,
            prop::option::of(-1.0f64..2.0),
            prop_oneof![Just(Label::Safe), Just(Label::Unsafe), Just(Label::Unlabeled)],
            prop::option::of(any::<bool>()),
            prop_oneof![Just(-1.0), Just(f64::NAN), 0.0f64..100.0],
        )
            .prop_map(|((m1, m2, m_sup, m_final), k, conf, label, sampled, dur)| DopRecord {
                dop_id: "x".into(),
                duration_s: dur,
                m1,
                m2,
                m_sup,
                m_final,
                k_auto: k,
                alg_count: None,
                alg_confidence: conf,
                label,
                sampled,
            })
    }

    proptest! {
        #[test]
        fn validation_is_total(r in any_record()) {
            let v = validate_record(&r);
            let ok = r.duration_s >= 0.0
                && (r.m_final.is_none() || r.m1.is_some())
                && r.alg_confidence.is_none_or(|c| (0.0..=1.0).contains(&c))
                && !(r.label == Label::Unsafe && r.m_final.is_none())
                && !(r.label == Label::Safe && r.sampled == Some(true) && r.m_final.is_none());
            prop_assert_eq!(v.is_empty(), ok);
        }

        #[test]
        fn agreeing_counters_win(a in 0u32..1000, sup in prop::option::of(0u32..1000)) {
            prop_assert_eq!(ground_truth(Some(a), Some(a), sup), Some(a));
        }
    }
}
