//! Partitioning rules and the quota sampler.
//!
//! Every rule maps a record to an unsafety score (higher = less safe). A record
//! is safe when its score is at or below the threshold, or, in target-share
//! mode, when it ranks among the lowest `target_share·n` scores. Ties are
//! broken by ascending `dop_id`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::domain::{DopRecord, Label};
use crate::error::{Error, Result};
use crate::estimator::{mean, sample_sd};
use crate::planner::quota_count;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    AllSafe,
    AllUnsafe,
    /// Passengers per minute.
    RuleOfThumb,
    /// `|k_auto − m1|`.
    FirstCount,
    /// `1 − alg_confidence`.
    ConfidenceOnly,
    /// `(|k_auto − alg_count|, 1 − alg_confidence)`, compared lexicographically.
    ConfidenceWithCount,
    /// Rule of thumb, then a first manual count reclassifies exact matches.
    Combined,
}

impl ClassifierKind {
    pub fn needs_cutoff(self) -> bool {
        !matches!(self, ClassifierKind::AllSafe | ClassifierKind::AllUnsafe)
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::AllSafe => "all_safe",
            ClassifierKind::AllUnsafe => "all_unsafe",
            ClassifierKind::RuleOfThumb => "rule_of_thumb",
            ClassifierKind::FirstCount => "first_count",
            ClassifierKind::ConfidenceOnly => "confidence_only",
            ClassifierKind::ConfidenceWithCount => "confidence_with_count",
            ClassifierKind::Combined => "combined",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all_safe" => ClassifierKind::AllSafe,
            "all_unsafe" => ClassifierKind::AllUnsafe,
            "rule_of_thumb" => ClassifierKind::RuleOfThumb,
            "first_count" => ClassifierKind::FirstCount,
            "confidence_only" => ClassifierKind::ConfidenceOnly,
            "confidence_with_count" => ClassifierKind::ConfidenceWithCount,
            "combined" => ClassifierKind::Combined,
            other => {
                return Err(Error::param(
                    "classifier.kind",
                    format!("unknown classifier `{other}`"),
                ))
            }
        })
    }
}

/// Which count feeds the rule-of-thumb passenger rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    /// `m1`, falling back to `k_auto` when no first count exists.
    #[default]
    Manual,
    Automatic,
}

impl FromStr for RateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(RateSource::Manual),
            "automatic" => Ok(RateSource::Automatic),
            other => Err(Error::param(
                "classifier.rate_source",
                format!("expected manual|automatic, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub threshold: Option<f64>,
    pub target_share: Option<f64>,
    #[serde(default)]
    pub rate_source: RateSource,
}

impl ClassifierSpec {
    pub fn new(kind: ClassifierKind) -> Self {
        ClassifierSpec {
            kind,
            threshold: None,
            target_share: None,
            rate_source: RateSource::default(),
        }
    }

    pub fn with_threshold(kind: ClassifierKind, threshold: f64) -> Self {
        ClassifierSpec {
            threshold: Some(threshold),
            ..ClassifierSpec::new(kind)
        }
    }

    pub fn with_target_share(kind: ClassifierKind, share: f64) -> Self {
        ClassifierSpec {
            target_share: Some(share),
            ..ClassifierSpec::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.target_share {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::param("classifier.target_share", "must lie in [0, 1]"));
            }
        }
        if let Some(t) = self.threshold {
            if t.is_nan() {
                return Err(Error::param("classifier.threshold", "must be a number"));
            }
        }
        if self.kind.needs_cutoff() && self.threshold.is_some() == self.target_share.is_some() {
            return Err(Error::param(
                "classifier",
                format!("`{}` needs exactly one of threshold and target_share", self.kind),
            ));
        }
        Ok(())
    }
}

/// Labeled records with the realized safe share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub records: Vec<DopRecord>,
    pub p_s_hat: f64,
    /// Reclassification flags of safe records (combined classification only).
    pub reclassified: Option<BTreeMap<String, bool>>,
}

type Score = (f64, f64);

fn lex(a: &Score, b: &Score) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

fn unsafety(r: &DopRecord, spec: &ClassifierSpec) -> Result<Score> {
    let need = |field: &str| Error::record(&r.dop_id, format!("classifier `{}` needs {field}", spec.kind));
    Ok(match spec.kind {
        ClassifierKind::AllSafe | ClassifierKind::AllUnsafe => (0.0, 0.0),
        ClassifierKind::RuleOfThumb | ClassifierKind::Combined => {
            let count = match spec.rate_source {
                RateSource::Manual => r.m1.unwrap_or(r.k_auto),
                RateSource::Automatic => r.k_auto,
            };
            let rate = if r.duration_s > 0.0 {
                f64::from(count) / (r.duration_s / 60.0)
            } else {
                f64::INFINITY
            };
            (rate, 0.0)
        }
        ClassifierKind::FirstCount => {
            let m1 = r.m1.ok_or_else(|| need("m1"))?;
            ((f64::from(r.k_auto) - f64::from(m1)).abs(), 0.0)
        }
        ClassifierKind::ConfidenceOnly => {
            let c = r.alg_confidence.ok_or_else(|| need("alg_confidence"))?;
            (1.0 - c, 0.0)
        }
        ClassifierKind::ConfidenceWithCount => {
            let c = r.alg_confidence.ok_or_else(|| need("alg_confidence"))?;
            let a = r.alg_count.ok_or_else(|| need("alg_count"))?;
            ((f64::from(r.k_auto) - f64::from(a)).abs(), 1.0 - c)
        }
    })
}

fn single_stage(records: &[DopRecord], spec: &ClassifierSpec) -> Result<Vec<Label>> {
    spec.validate()?;
    match spec.kind {
        ClassifierKind::AllSafe => return Ok(vec![Label::Safe; records.len()]),
        ClassifierKind::AllUnsafe => return Ok(vec![Label::Unsafe; records.len()]),
        _ => {}
    }
    let scores = records
        .iter()
        .map(|r| unsafety(r, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut labels = vec![Label::Unsafe; records.len()];
    if let Some(t) = spec.threshold {
        // a lexicographic key is safe iff it does not exceed (0, t); for
        // single scores the secondary component is always 0
        let bound = if spec.kind == ClassifierKind::ConfidenceWithCount {
            (0.0, t)
        } else {
            (t, 0.0)
        };
        for (label, s) in labels.iter_mut().zip(&scores) {
            if lex(s, &bound) != Ordering::Greater {
                *label = Label::Safe;
            }
        }
    } else if let Some(share) = spec.target_share {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            lex(&scores[a], &scores[b]).then_with(|| records[a].dop_id.cmp(&records[b].dop_id))
        });
        let k = (share * records.len() as f64).round() as usize;
        for &i in order.iter().take(k) {
            labels[i] = Label::Safe;
        }
    }
    Ok(labels)
}

fn safe_share(records: &[DopRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.label == Label::Safe).count() as f64 / records.len() as f64
}

/// Assigns safe/unsafe labels. Sampling indicators are reset.
pub fn classify(records: &[DopRecord], spec: &ClassifierSpec) -> Result<Classification> {
    if spec.kind == ClassifierKind::Combined {
        let first = ClassifierSpec {
            kind: ClassifierKind::RuleOfThumb,
            ..*spec
        };
        return combined_classify(records, &first, &ReclassRule::default());
    }
    let labels = single_stage(records, spec)?;
    let records: Vec<DopRecord> = records
        .iter()
        .zip(labels)
        .map(|(r, label)| DopRecord {
            label,
            sampled: None,
            ..r.clone()
        })
        .collect();
    Ok(Classification {
        p_s_hat: safe_share(&records),
        records,
        reclassified: None,
    })
}

/// When a provisionally unsafe record is promoted to safe after its first count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReclassRule {
    /// Largest `|m1 − k_auto|` that still counts as agreement.
    pub max_abs_diff: u32,
}

/// Two-stage classification: records the first rule marks unsafe get a first
/// manual count, and those whose count agrees with `k_auto` become safe.
pub fn combined_classify(
    records: &[DopRecord],
    first: &ClassifierSpec,
    rule: &ReclassRule,
) -> Result<Classification> {
    if first.kind == ClassifierKind::Combined {
        return Err(Error::param("classifier.kind", "the first stage cannot itself be combined"));
    }
    let provisional = single_stage(records, first)?;
    let mut reclassified = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for (r, label) in records.iter().zip(provisional) {
        let label = match label {
            Label::Safe => {
                reclassified.insert(r.dop_id.clone(), false);
                Label::Safe
            }
            _ => {
                let m1 = r.m1.ok_or_else(|| {
                    Error::record(&r.dop_id, "provisionally unsafe record needs a first manual count")
                })?;
                if m1.abs_diff(r.k_auto) <= rule.max_abs_diff {
                    reclassified.insert(r.dop_id.clone(), true);
                    Label::Safe
                } else {
                    Label::Unsafe
                }
            }
        };
        out.push(DopRecord {
            label,
            sampled: None,
            ..r.clone()
        });
    }
    Ok(Classification {
        p_s_hat: safe_share(&out),
        records: out,
        reclassified: Some(reclassified),
    })
}

/// Seeded generator used by the sampler.
pub fn sampler_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `⌈q0·n⌉` of `n` positions uniformly without replacement; sorted.
pub fn draw_sample_with<R: Rng + ?Sized>(rng: &mut R, n: usize, q0: f64) -> Result<Vec<usize>> {
    if !(q0 > 0.0 && q0 <= 1.0) {
        return Err(Error::param("q", "must lie in (0, 1]"));
    }
    if n == 0 {
        return Err(Error::Degenerate("no safe records to sample from".into()));
    }
    let k = quota_count(q0, n);
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Sampled positions for a given seed.
pub fn draw_sample_indices(n: usize, q0: f64, seed: u64) -> Result<Vec<usize>> {
    draw_sample_with(&mut sampler_rng(seed), n, q0)
}

/// Sampling indicators `Z` aligned with `safe_ids`.
pub fn draw_sample(safe_ids: &[String], q0: f64, seed: u64) -> Result<Vec<bool>> {
    let picked = draw_sample_indices(safe_ids.len(), q0, seed)?;
    let mut z = vec![false; safe_ids.len()];
    for i in picked {
        z[i] = true;
    }
    Ok(z)
}

/// Sets `sampled` on every safe record; other records are left untouched.
pub fn sample_campaign(records: &[DopRecord], q0: f64, seed: u64) -> Result<Vec<DopRecord>> {
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
    let safe_ids: Vec<String> = records
        .iter()
        .filter(|r| r.label == Label::Safe)
        .map(|r| r.dop_id.clone())
        .collect();
    let z = draw_sample(&safe_ids, q0, seed)?;
    let mut z = z.into_iter();
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.label == Label::Safe {
                r.sampled = z.next();
            }
            r
        })
        .collect())
}

/// Plug-in partition parameters from a counted campaign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimate {
    pub n: usize,
    pub n_s: usize,
    pub n_u: usize,
    pub p_s: f64,
    pub mu_s: f64,
    pub mu_u: f64,
    pub nu_s: f64,
    pub nu_u: f64,
    /// Composite `ν² = p_s·ν_s² + p_u·ν_u² + p_s·p_u·(μ_s − μ_u)²`.
    pub nu: f64,
    pub nu_s_ratio: f64,
}

/// `ν` from per-stratum moments.
pub fn composite_nu(p_s: f64, nu_s: f64, nu_u: f64, mu_s: f64, mu_u: f64) -> f64 {
    let p_u = 1.0 - p_s;
    (p_s * nu_s * nu_s + p_u * nu_u * nu_u + p_s * p_u * (mu_s - mu_u).powi(2)).sqrt()
}

/// Estimates stratum moments from labeled records. A safe record counts when
/// it has ground truth and was not explicitly left out of the sample.
pub fn partition_stats_estimate(records: &[DopRecord]) -> Result<PartitionEstimate> {
    let mut safe_counted = Vec::new();
    let mut unsafe_counted = Vec::new();
    let mut n_s = 0usize;
    let mut n_u = 0usize;
    for r in records {
        match r.label {
            Label::Unlabeled => return Err(Error::record(&r.dop_id, "record is unlabeled")),
            Label::Safe => {
                n_s += 1;
                if let (Some(m), true) = (r.m_final, r.sampled != Some(false)) {
                    safe_counted.push((m, r.k_auto));
                }
            }
            Label::Unsafe => {
                n_u += 1;
                let m = r
                    .m_final
                    .ok_or_else(|| Error::record(&r.dop_id, "unsafe record lacks ground truth"))?;
                unsafe_counted.push((m, r.k_auto));
            }
        }
    }
    if n_s + n_u == 0 {
        return Err(Error::Degenerate("no records".into()));
    }
    if n_s > 0 && safe_counted.is_empty() {
        return Err(Error::Degenerate("safe stratum has no counted record".into()));
    }
    let q = if n_s == 0 { 1.0 } else { safe_counted.len() as f64 / n_s as f64 };
    let m_sum_s: u64 = safe_counted.iter().map(|&(m, _)| u64::from(m)).sum();
    let m_sum_u: u64 = unsafe_counted.iter().map(|&(m, _)| u64::from(m)).sum();
    let m_hat = (m_sum_u as f64 + m_sum_s as f64 / q) / (n_s + n_u) as f64;
    if !(m_hat > 0.0) {
        return Err(Error::Degenerate("mean manual count is 0".into()));
    }
    let d = |v: &[(u32, u32)]| -> Vec<f64> {
        v.iter()
            .map(|&(m, k)| (f64::from(k) - f64::from(m)) / m_hat)
            .collect()
    };
    let ds = d(&safe_counted);
    let du = d(&unsafe_counted);
    let p_s = n_s as f64 / (n_s + n_u) as f64;
    let (mu_s, mu_u) = (mean(&ds), mean(&du));
    let (nu_s, nu_u) = (sample_sd(&ds), sample_sd(&du));
    let nu = composite_nu(p_s, nu_s, nu_u, mu_s, mu_u);
    Ok(PartitionEstimate {
        n: n_s + n_u,
        n_s,
        n_u,
        p_s,
        mu_s,
        mu_u,
        nu_s,
        nu_u,
        nu,
        nu_s_ratio: if nu > 0.0 { nu_s / nu } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_first(id: &str, k: u32, m1: u32) -> DopRecord {
        let mut r = DopRecord::new(id, k);
        r.m1 = Some(m1);
        r
    }

    fn labels(c: &Classification) -> Vec<Label> {
        c.records.iter().map(|r| r.label).collect()
    }

    #[test]
    fn all_safe() {
        let records = vec![DopRecord::new("a", 1), DopRecord::new("b", 2)];
        let c = classify(&records, &ClassifierSpec::new(ClassifierKind::AllSafe)).unwrap();
        assert_eq!(c.p_s_hat, 1.0);
        assert!(c.records.iter().all(|r| r.label == Label::Safe));
        let c = classify(&records, &ClassifierSpec::new(ClassifierKind::AllUnsafe)).unwrap();
        assert_eq!(c.p_s_hat, 0.0);
    }

    #[test]
    fn first_count_threshold() {
        let records = vec![with_first("a", 3, 3), with_first("b", 2, 2), with_first("c", 5, 3)];
        let c = classify(&records, &ClassifierSpec::with_threshold(ClassifierKind::FirstCount, 0.0)).unwrap();
        assert_eq!(labels(&c), [Label::Safe, Label::Safe, Label::Unsafe]);
        assert!((c.p_s_hat - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confidence_with_count_tie_break() {
        let conf = [0.9, 0.2, 0.99];
        let alg = [3, 2, 6];
        let records: Vec<_> = ["a", "b", "c"]
            .iter()
            .zip(conf.iter().zip(alg))
            .map(|(id, (&c, a))| {
                let mut r = DopRecord::new(*id, if *id == "c" { 5 } else { a });
                r.alg_confidence = Some(c);
                r.alg_count = Some(a);
                r
            })
            .collect();
        let spec = ClassifierSpec::with_target_share(ClassifierKind::ConfidenceWithCount, 2.0 / 3.0);
        let c = classify(&records, &spec).unwrap();
        assert_eq!(labels(&c), [Label::Safe, Label::Safe, Label::Unsafe]);
        // only one slot: the higher confidence wins among zero deltas
        let spec = ClassifierSpec::with_target_share(ClassifierKind::ConfidenceWithCount, 1.0 / 3.0);
        let c = classify(&records, &spec).unwrap();
        assert_eq!(labels(&c), [Label::Safe, Label::Unsafe, Label::Unsafe]);
        // threshold mode: zero delta and 1 - confidence <= 0.5
        let spec = ClassifierSpec::with_threshold(ClassifierKind::ConfidenceWithCount, 0.5);
        let c = classify(&records, &spec).unwrap();
        assert_eq!(labels(&c), [Label::Safe, Label::Unsafe, Label::Unsafe]);
    }

    #[test]
    fn rule_of_thumb_rates() {
        let mut a = with_first("a", 9, 2).with_duration(60.0); // 2/min from m1
        let b = DopRecord::new("b", 3).with_duration(60.0); // 3/min from k_auto
        let c = DopRecord::new("c", 0); // zero duration is maximally unsafe
        a.alg_confidence = None;
        let records = vec![a, b, c];
        let spec = ClassifierSpec::with_threshold(ClassifierKind::RuleOfThumb, 2.5);
        assert_eq!(labels(&classify(&records, &spec).unwrap()), [Label::Safe, Label::Unsafe, Label::Unsafe]);
        let spec = ClassifierSpec {
            rate_source: RateSource::Automatic,
            ..ClassifierSpec::with_threshold(ClassifierKind::RuleOfThumb, 5.0)
        };
        assert_eq!(labels(&classify(&records, &spec).unwrap()), [Label::Unsafe, Label::Safe, Label::Unsafe]);
    }

    #[test]
    fn missing_fields_and_bad_specs() {
        let records = vec![DopRecord::new("a", 1)];
        let spec = ClassifierSpec::with_threshold(ClassifierKind::ConfidenceOnly, 0.1);
        assert!(matches!(classify(&records, &spec), Err(Error::Record { .. })));
        let spec = ClassifierSpec::with_threshold(ClassifierKind::FirstCount, 0.0);
        assert!(classify(&records, &spec).is_err());
        let spec = ClassifierSpec::with_target_share(ClassifierKind::FirstCount, 1.5);
        assert!(spec.validate().is_err());
        let mut spec = ClassifierSpec::with_target_share(ClassifierKind::FirstCount, 0.5);
        spec.threshold = Some(1.0);
        assert!(spec.validate().is_err());
        assert!(ClassifierSpec::new(ClassifierKind::RuleOfThumb).validate().is_err());
    }

    #[test]
    fn combined_reclassifies_exact_matches() {
        // rates 1, 10, 10, 10 passengers/min; threshold 5 marks b, c, d provisionally unsafe
        let records = vec![
            with_first("a", 1, 1).with_duration(60.0),
            with_first("b", 10, 10).with_duration(60.0),
            with_first("c", 12, 10).with_duration(60.0),
            with_first("d", 9, 10).with_duration(60.0),
        ];
        let spec = ClassifierSpec::with_threshold(ClassifierKind::Combined, 5.0);
        let c = classify(&records, &spec).unwrap();
        assert_eq!(labels(&c), [Label::Safe, Label::Safe, Label::Unsafe, Label::Unsafe]);
        let flags = c.reclassified.unwrap();
        assert_eq!(flags.get("a"), Some(&false));
        assert_eq!(flags.get("b"), Some(&true));
        assert_eq!(flags.get("c"), None);
        assert_eq!(c.p_s_hat, 0.5);

        let loose = combined_classify(
            &records,
            &ClassifierSpec::with_threshold(ClassifierKind::RuleOfThumb, 5.0),
            &ReclassRule { max_abs_diff: 1 },
        )
        .unwrap();
        assert_eq!(loose.records[3].label, Label::Safe);
    }

    #[test]
    fn combined_all_safe_first_stage() {
        let records = vec![DopRecord::new("a", 1), DopRecord::new("b", 2)];
        let c = combined_classify(&records, &ClassifierSpec::new(ClassifierKind::AllSafe), &ReclassRule::default())
            .unwrap();
        assert!(c.reclassified.unwrap().values().all(|w| !w));
    }

    #[test]
    fn combined_needs_first_count() {
        let records = vec![DopRecord::new("a", 1).with_duration(1.0)];
        let spec = ClassifierSpec::with_threshold(ClassifierKind::Combined, 0.0);
        assert!(matches!(classify(&records, &spec), Err(Error::Record { .. })));
    }

    #[test]
    fn sampler_counts() {
        let ids: Vec<String> = (0..7).map(|i| i.to_string()).collect();
        assert!(draw_sample(&ids, 1.0, 1).unwrap().iter().all(|&z| z));
        assert_eq!(draw_sample(&ids, 0.5, 1).unwrap().iter().filter(|&&z| z).count(), 4);
        assert!(draw_sample(&[], 0.5, 1).is_err());
        assert!(draw_sample(&ids, 0.0, 1).is_err());
        assert_eq!(draw_sample(&ids, 0.5, 99).unwrap(), draw_sample(&ids, 0.5, 99).unwrap());
    }

    #[test]
    fn sampler_is_uniform() {
        // 10^5 seeds, N_s = 10, q = 0.5: each id is picked with probability 1/2
        let trials = 100_000u64;
        let mut hits = [0u64; 10];
        for seed in 0..trials {
            for i in draw_sample_indices(10, 0.5, seed).unwrap() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn sample_campaign_touches_safe_only() {
        let records = vec![
            DopRecord::new("a", 1).with_label(Label::Safe),
            DopRecord::new("b", 1).with_label(Label::Unsafe),
            DopRecord::new("c", 1).with_label(Label::Safe),
        ];
        let out = sample_campaign(&records, 0.5, 7).unwrap();
        assert_eq!(out[1].sampled, None);
        assert_eq!(out.iter().filter(|r| r.sampled == Some(true)).count(), 1);
        assert!(sample_campaign(&records[1..2], 0.5, 7).is_err());
    }

    #[test]
    fn composite_nu_reference() {
        let nu = composite_nu(0.9, 0.05, 0.3, 0.02, 0.0);
        assert!((nu * nu - 0.011_286).abs() < 1e-15);
        assert!((composite_nu(1.0, 0.07, 0.3, 0.01, 0.01) - 0.07).abs() < 1e-15);
    }

    #[test]
    fn composite_matches_total_variance() {
        // deterministic campaign with different stratum means
        let mut records = Vec::new();
        for i in 0..4000u32 {
            let safe = i % 10 != 0;
            let m = 3 + i % 5;
            let k = if safe { m + u32::from(i % 37 == 0) } else { m + i % 3 };
            records.push(
                DopRecord::counted(i.to_string(), m, k).with_label(if safe { Label::Safe } else { Label::Unsafe }),
            );
        }
        let est = partition_stats_estimate(&records).unwrap();
        let m_bar = records.iter().map(|r| f64::from(r.m_final.unwrap())).sum::<f64>() / records.len() as f64;
        let all: Vec<f64> = records.iter().map(|r| r.error().unwrap() as f64 / m_bar).collect();
        let plain = sample_sd(&all).powi(2);
        assert!((est.nu * est.nu / plain - 1.0).abs() < 0.01);
        assert!((est.p_s - 0.9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sampler_count_is_exact(n in 1usize..2000, q in 1e-4f64..=1.0, seed in any::<u64>()) {
            let picked = draw_sample_indices(n, q, seed).unwrap();
            prop_assert_eq!(picked.len(), quota_count(q, n));
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn target_share_is_close(scores in prop::collection::vec(0u32..5, 1..100), share in 0.0f64..=1.0) {
            let records: Vec<_> = scores.iter().enumerate()
                .map(|(i, &d)| with_first(&format!("{i:03}"), 5 + d, 5)).collect();
            let c = classify(&records, &ClassifierSpec::with_target_share(ClassifierKind::FirstCount, share)).unwrap();
            prop_assert!((c.p_s_hat - share).abs() <= 1.0 / records.len() as f64);
        }

        #[test]
        fn classification_is_permutation_invariant(
            scores in prop::collection::vec(0u32..4, 1..40),
            share in 0.0f64..=1.0,
            rot in 0usize..40,
        ) {
            let records: Vec<_> = scores.iter().enumerate()
                .map(|(i, &d)| with_first(&format!("{i:03}"), 5 + d, 5)).collect();
            let mut rotated = records.clone();
            rotated.rotate_left(rot % records.len());
            let spec = ClassifierSpec::with_target_share(ClassifierKind::FirstCount, share);
            let a = classify(&records, &spec).unwrap();
            let b = classify(&rotated, &spec).unwrap();
            let key = |c: &Classification| {
                let mut v: Vec<_> = c.records.iter().map(|r| (r.dop_id.clone(), r.label)).collect();
                v.sort_by(|x, y| x.0.cmp(&y.0));
                v
            };
            prop_assert_eq!(key(&a), key(&b));
        }
    }
}
