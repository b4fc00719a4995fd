//! Campaign files, configuration files and report emission.
//!
//! Campaign files are comma-separated with a mandatory header naming exactly
//! [`CAMPAIGN_COLUMNS`] in that order. Empty cells mean "absent", labels are
//! `s`/`u`, and the sampling indicator is `true`/`false`.
//!
//! Configuration files hold one `key = value` pair per line; `#` starts a
//! comment. Unknown keys are rejected.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::classify::{ClassifierKind, ClassifierSpec, RateSource};
use crate::cost::CostScheme;
use crate::domain::{validate_record, CostParams, CostRates, DopRecord, Label, PartitionParams, TestParams, Violation};
use crate::error::{Error, Result};
use crate::estimator::WorksheetRow;
use crate::simulate::SuccessCurve;

pub const TOOL_NAME: &str = "apcval";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CAMPAIGN_COLUMNS: [&str; 11] = [
    "dop_id",
    "duration_s",
    "m1",
    "m2",
    "m_sup",
    "m_final",
    "k_auto",
    "alg_count",
    "alg_confidence",
    "label",
    "sampled",
];

/// Records of a campaign file plus every per-row validation violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadedCampaign {
    pub records: Vec<DopRecord>,
    pub violations: Vec<Violation>,
}

impl LoadedCampaign {
    /// Fails when any violation was found.
    pub fn strict(self) -> Result<Self> {
        if self.violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::Strict(self.violations.len()))
        }
    }
}

fn cell<T: FromStr>(id: &str, column: &str, raw: &str) -> Result<Option<T>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::record(id, format!("cannot parse {column} = `{raw}`")))
}

fn required<T: FromStr>(id: &str, column: &str, raw: &str) -> Result<T> {
    cell(id, column, raw)?.ok_or_else(|| Error::record(id, format!("{column} is required")))
}

fn parse_row(row: &csv::StringRecord) -> Result<DopRecord> {
    let get = |i: usize| row.get(i).unwrap_or("");
    let id = get(0).trim().to_string();
    let label = match get(9).trim() {
        "s" => Label::Safe,
        "u" => Label::Unsafe,
        "" => Label::Unlabeled,
        other => return Err(Error::record(&id, format!("label must be s, u or empty, got `{other}`"))),
    };
    let sampled = match get(10).trim() {
        "true" => Some(true),
        "false" => Some(false),
        "" => None,
        other => return Err(Error::record(&id, format!("sampled must be true, false or empty, got `{other}`"))),
    };
    Ok(DopRecord {
        duration_s: required(&id, "duration_s", get(1))?,
        m1: cell(&id, "m1", get(2))?,
        m2: cell(&id, "m2", get(3))?,
        m_sup: cell(&id, "m_sup", get(4))?,
        m_final: cell(&id, "m_final", get(5))?,
        k_auto: required(&id, "k_auto", get(6))?,
        alg_count: cell(&id, "alg_count", get(7))?,
        alg_confidence: cell(&id, "alg_confidence", get(8))?,
        label,
        sampled,
        dop_id: id,
    })
}

/// Parses a campaign from any reader.
pub fn read_campaign<R: Read>(reader: R) -> Result<LoadedCampaign> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CAMPAIGN_COLUMNS {
        return Err(Error::Header(format!(
            "expected `{}`, got `{}`",
            CAMPAIGN_COLUMNS.join(","),
            names.join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut violations = Vec::new();
    for row in rdr.records() {
        let record = parse_row(&row?)?;
        if !seen.insert(record.dop_id.clone()) {
            return Err(Error::DuplicateId(record.dop_id));
        }
        violations.extend(validate_record(&record));
        records.push(record);
    }
    Ok(LoadedCampaign { records, violations })
}

pub fn load_campaign(path: impl AsRef<Path>) -> Result<LoadedCampaign> {
    read_campaign(fs::File::open(path)?)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records in the campaign format; floats keep full precision.
pub fn write_campaign<W: Write>(writer: W, records: &[DopRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CAMPAIGN_COLUMNS)?;
    for r in records {
        w.write_record([
            r.dop_id.clone(),
            r.duration_s.to_string(),
            opt(r.m1),
            opt(r.m2),
            opt(r.m_sup),
            opt(r.m_final),
            r.k_auto.to_string(),
            opt(r.alg_count),
            opt(r.alg_confidence),
            r.label.as_str().to_string(),
            opt(r.sampled),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_campaign(path: impl AsRef<Path>, records: &[DopRecord]) -> Result<()> {
    write_campaign(fs::File::create(path)?, records)
}

/// Recognized configuration keys.
pub const CONFIG_KEYS: [&str; 22] = [
    "alpha",
    "beta",
    "delta",
    "nu",
    "nu_min",
    "buffer",
    "p_s",
    "nu_s_ratio",
    "q",
    "seed",
    "classifier.kind",
    "classifier.threshold",
    "classifier.target_share",
    "classifier.rate_source",
    "costs.r_av",
    "costs.c_labor",
    "costs.r_s",
    "costs.scheme",
    "costs.recording",
    "costs.c_u",
    "costs.c_s0",
    "costs.c_sz",
];

fn known_key(key: &str) -> Option<&'static str> {
    CONFIG_KEYS.iter().copied().find(|k| *k == key)
}

/// Flat key-value configuration, validated on every change.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let key = known_key(key).ok_or_else(|| Error::Config {
                line: line_no,
                reason: format!("unknown key `{key}`"),
            })?;
            if config.values.contains_key(key) {
                return Err(Error::Config {
                    line: line_no,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            config.values.insert(key.to_string(), value.trim().to_string());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Overrides one key; the result is validated as a whole.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_all(&[(key, value)])
    }

    /// Overrides several keys at once and validates only the final state, so
    /// keys that depend on each other can be supplied together. On error the
    /// configuration is left unchanged.
    pub fn set_all(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        let mut next = self.values.clone();
        for (key, value) in pairs {
            let key = known_key(key.trim()).ok_or_else(|| Error::Config {
                line: 0,
                reason: format!("unknown key `{key}`"),
            })?;
            next.insert(key.to_string(), value.trim().to_string());
        }
        let candidate = Config { values: next };
        candidate.validate()?;
        *self = candidate;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every explicitly set key.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Serializes back to the file format.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parsed<T: FromStr>(&self, key: &'static str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::param(key, format!("cannot parse `{v}`"))),
        }
    }

    fn validate(&self) -> Result<()> {
        self.test_params()?;
        self.partition_params()?;
        self.seed()?;
        self.classifier_spec()?;
        self.cost_rates()?;
        self.cost_scheme()?;
        self.cost_params()?;
        Ok(())
    }

    /// Test parameters; unset keys take their defaults.
    pub fn test_params(&self) -> Result<TestParams> {
        let d = TestParams::default();
        let p = TestParams {
            alpha: self.parsed("alpha")?.unwrap_or(d.alpha),
            beta: self.parsed("beta")?.unwrap_or(d.beta),
            delta: self.parsed("delta")?.unwrap_or(d.delta),
            nu: self.parsed("nu")?.unwrap_or(d.nu),
            nu_min: self.parsed("nu_min")?.unwrap_or(d.nu_min),
            buffer: self.parsed("buffer")?.unwrap_or(d.buffer),
        };
        p.validate()?;
        Ok(p)
    }

    /// Partition parameters when `p_s` is set. `nu_s_ratio` is then required;
    /// `q` defaults to 1.
    pub fn partition_params(&self) -> Result<Option<PartitionParams>> {
        let Some(p_s) = self.parsed("p_s")? else {
            if self.get("nu_s_ratio").is_some() {
                return Err(Error::param("p_s", "required when nu_s_ratio is set"));
            }
            if let Some(q) = self.parsed::<f64>("q")? {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::param("q", "must lie in (0, 1]"));
                }
            }
            return Ok(None);
        };
        let nu_s_ratio = self
            .parsed("nu_s_ratio")?
            .ok_or_else(|| Error::param("nu_s_ratio", "required when p_s is set"))?;
        let p = PartitionParams {
            p_s,
            nu_s_ratio,
            q: self.parsed("q")?.unwrap_or(1.0),
        };
        p.validate()?;
        Ok(Some(p))
    }

    /// The explicitly configured quota.
    pub fn quota(&self) -> Result<Option<f64>> {
        self.parsed("q")
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.parsed("seed")
    }

    pub fn classifier_spec(&self) -> Result<Option<ClassifierSpec>> {
        let Some(kind) = self.parsed::<ClassifierKind>("classifier.kind")? else {
            return Ok(None);
        };
        let spec = ClassifierSpec {
            kind,
            threshold: self.parsed("classifier.threshold")?,
            target_share: self.parsed("classifier.target_share")?,
            rate_source: self.parsed::<RateSource>("classifier.rate_source")?.unwrap_or_default(),
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn cost_rates(&self) -> Result<CostRates> {
        let d = CostRates::default();
        let r = CostRates {
            r_av: self.parsed("costs.r_av")?.unwrap_or(d.r_av),
            c_labor: self.parsed("costs.c_labor")?.unwrap_or(d.c_labor),
            r_s: self.parsed("costs.r_s")?.unwrap_or(d.r_s),
            recording: self.parsed("costs.recording")?.unwrap_or(d.recording),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn cost_scheme(&self) -> Result<Option<CostScheme>> {
        self.parsed("costs.scheme")
    }

    /// Direct cost parameters; all three keys must be set together.
    pub fn cost_params(&self) -> Result<Option<CostParams>> {
        let c_u = self.parsed("costs.c_u")?;
        let c_s0 = self.parsed("costs.c_s0")?;
        let c_sz = self.parsed("costs.c_sz")?;
        match (c_u, c_s0, c_sz) {
            (None, None, None) => Ok(None),
            (Some(c_u), Some(c_s0), Some(c_sz)) => {
                let c = CostParams { c_u, c_s0, c_sz };
                c.validate()?;
                Ok(Some(c))
            }
            _ => Err(Error::param("costs", "c_u, c_s0 and c_sz must be set together")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::param("format", format!("expected json|csv, got `{other}`"))),
        }
    }
}

/// Self-describing wrapper around every emitted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub seed: Option<u64>,
    /// Every input that shaped the report.
    pub inputs: BTreeMap<String, String>,
    pub report: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: impl Into<String>, seed: Option<u64>, inputs: BTreeMap<String, String>, report: T) -> Self {
        Envelope {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            kind: kind.into(),
            seed,
            inputs,
            report,
        }
    }
}

/// Rounds to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        other => out.push((prefix.to_string(), scalar(other))),
    }
}

/// Serializes a report. JSON keeps the nesting; CSV is a two-column
/// `field,value` table with dotted field paths.
pub fn emit_report<T: Serialize>(envelope: &Envelope<T>, format: Format) -> Result<String> {
    let mut value = serde_json::to_value(envelope)?;
    round_value(&mut value);
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(&value)? + "\n"),
        Format::Csv => {
            let mut rows = Vec::new();
            flatten("", &value, &mut rows);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["field", "value"])?;
            for (k, v) in rows {
                w.write_record([k, v])?;
            }
            csv_string(w)
        }
    }
}

/// Parses a JSON report emitted by [`emit_report`].
pub fn parse_report<T: DeserializeOwned>(text: &str) -> Result<Envelope<T>> {
    Ok(serde_json::from_str(text)?)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn num(x: f64) -> String {
    round_sig(x).to_string()
}

/// Leading columns of the success-curve table, in this order.
pub const SUCCESS_COLUMNS: [&str; 5] = ["grid_var", "grid_value", "pass_rate", "mc_se", "analytic"];

/// One row per grid point; `analytic` is empty where undefined.
pub fn success_curves_csv(curves: &[SuccessCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = SUCCESS_COLUMNS.to_vec();
    header.extend(["fixed_var", "fixed_value", "n", "mu", "passes", "trials", "test"]);
    w.write_record(&header)?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.grid_var.to_string(),
                num(p.grid_value),
                num(p.pass_rate),
                num(p.mc_se),
                p.analytic.map(num).unwrap_or_default(),
                c.fixed_var.to_string(),
                num(c.fixed_value),
                p.n.to_string(),
                num(p.mu),
                p.passes.to_string(),
                p.trials.to_string(),
                c.test.to_string(),
            ])?;
        }
    }
    csv_string(w)
}

/// Spreadsheet worksheet: `dop_id,d,stratum,weight`.
pub fn worksheet_csv(rows: &[WorksheetRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dop_id", "d", "stratum", "weight"])?;
    for r in rows {
        w.write_record([r.dop_id.clone(), num(r.d), r.stratum.as_str().to_string(), num(r.weight)])?;
    }
    csv_string(w)
}
