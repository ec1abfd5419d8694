//! Pipeline run configuration, read from a sectioned TOML file.
//!
//! Relative paths resolve against the directory holding the config file. The only
//! environment override is `MMEQUITY_OUT_DIR`, which replaces `[output] dir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{BIKE_RADIUS_M, DEFAULT_CELL_SIZE_M, SCOOTER_RADIUS_M};
use crate::metrics::{EndpointWeighting, OutlierPolicy, ReferenceWindow};
use crate::model::{IncomeThresholds, StudyTimezone};
use crate::stats::Tail;
use crate::tripinfer::TripFilterRules;

pub const OUT_DIR_ENV: &str = "MMEQUITY_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config: {what} not found at {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Linked,
    Unlinked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub zones: PathBuf,
    pub demographics: PathBuf,
    pub jobs: PathBuf,
    pub eea: PathBuf,
    /// Root of `<operator>/<timestamp>.json` vehicle snapshots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<PathBuf>,
    /// Operator name to linkage; operators found on disk but not listed default to linked.
    #[serde(default)]
    pub operators: BTreeMap<String, Linkage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stations: Option<PathBuf>,
    /// Directory of `<timestamp>.json` station-status captures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station_status: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bike_trips: Option<PathBuf>,
    #[serde(default = "default_bike_operator")]
    pub bike_operator: String,
}

fn default_bike_operator() -> String {
    "bikeshare".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Study {
    pub timezone: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_date: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_date: Option<NaiveDate>,
    pub reference_time: String,
    pub reference_tolerance_min: i64,
}

impl Default for Study {
    fn default() -> Self {
        Study {
            timezone: "UTC".into(),
            start_date: None,
            end_date: None,
            reference_time: "06:00".into(),
            reference_tolerance_min: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Classification {
    pub income_low_max: f64,
    pub income_high_min: f64,
    pub zone_id_property: String,
    pub block_prefix_len: usize,
    pub race_prefix: String,
}

impl Default for Classification {
    fn default() -> Self {
        let t = IncomeThresholds::default();
        Classification {
            income_low_max: t.low_max,
            income_high_min: t.high_min,
            zone_id_property: "GEOID".into(),
            block_prefix_len: 12,
            race_prefix: "race_".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Kde {
    pub scooter_radius_m: f64,
    pub bike_radius_m: f64,
    pub cell_size_m: f64,
}

impl Default for Kde {
    fn default() -> Self {
        Kde { scooter_radius_m: SCOOTER_RADIUS_M, bike_radius_m: BIKE_RADIUS_M, cell_size_m: DEFAULT_CELL_SIZE_M }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Filters {
    pub min_duration_min: f64,
    pub max_duration_min: f64,
    pub jitter_m: f64,
    pub max_speed_kmh: f64,
    /// Bikeshare CSV rows that may be skipped before ingest fails.
    pub max_skip_fraction: f64,
    /// Snapshot pairs further apart are not diffed for unlinked operators.
    pub max_snapshot_gap_min: f64,
}

impl Default for Filters {
    fn default() -> Self {
        let r = TripFilterRules::default();
        Filters {
            min_duration_min: r.min_duration_min,
            max_duration_min: r.max_duration_min,
            jitter_m: r.jitter_m.unwrap_or(100.0),
            max_speed_kmh: r.max_speed_kmh.unwrap_or(25.0),
            max_skip_fraction: 0.05,
            max_snapshot_gap_min: 90.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outliers {
    pub excluded: Vec<String>,
    pub min_population: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Usage {
    pub weighting: EndpointWeighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stats {
    pub alpha: f64,
    pub tail: Tail,
    pub bonferroni: bool,
}

impl Default for Stats {
    fn default() -> Self {
        Stats { alpha: 0.05, tail: Tail::TwoSided, bonferroni: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Output { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub study: Study,
    #[serde(default)]
    pub classification: Classification,
    #[serde(default)]
    pub kde: Kde,
    #[serde(default)]
    pub filters: Filters,
    #[serde(default)]
    pub outliers: Outliers,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub stats: Stats,
    #[serde(default)]
    pub output: Output,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads the file, resolves relative paths against its directory and applies the
    /// output-dir environment override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), source: e })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let i = &mut self.inputs;
        for p in [&mut i.zones, &mut i.demographics, &mut i.jobs, &mut i.eea] {
            resolve(base, p);
        }
        for p in [&mut i.snapshots, &mut i.stations, &mut i.station_status, &mut i.bike_trips].into_iter().flatten() {
            resolve(base, p);
        }
        resolve(base, &mut self.output.dir);
    }

    /// Checks values and that every referenced input exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let i = &self.inputs;
        let required = [("zones file", &i.zones), ("demographics file", &i.demographics), ("jobs file", &i.jobs), ("EEA list", &i.eea)];
        for (what, p) in required {
            if !p.exists() {
                return Err(ConfigError::MissingPath { what, path: p.clone() });
            }
        }
        let optional = [
            ("snapshot root", &i.snapshots),
            ("station information", &i.stations),
            ("station status directory", &i.station_status),
            ("bikeshare trips", &i.bike_trips),
        ];
        for (what, p) in optional {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { what, path: p.clone() });
                }
            }
        }
        if i.snapshots.is_none() && i.stations.is_none() {
            return Err(ConfigError::Invalid("no mobility inputs: set inputs.snapshots and/or inputs.stations".into()));
        }
        if i.stations.is_some() != i.station_status.is_some() {
            return Err(ConfigError::Invalid("inputs.stations and inputs.station_status must be given together".into()));
        }
        if i.bike_trips.is_some() && i.stations.is_none() {
            return Err(ConfigError::Invalid("inputs.bike_trips needs inputs.stations".into()));
        }
        self.timezone()?;
        self.reference_time()?;
        if let (Some(a), Some(b)) = (self.study.start_date, self.study.end_date) {
            if a > b {
                return Err(ConfigError::Invalid(format!("study date range is empty: {a} after {b}")));
            }
        }
        if self.study.reference_tolerance_min < 0 {
            return Err(ConfigError::Invalid("study.reference_tolerance_min must be >= 0".into()));
        }
        self.thresholds()?;
        let k = &self.kde;
        for (name, v) in [("kde.scooter_radius_m", k.scooter_radius_m), ("kde.bike_radius_m", k.bike_radius_m), ("kde.cell_size_m", k.cell_size_m)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if k.cell_size_m > k.scooter_radius_m.min(k.bike_radius_m) / 2.0 {
            return Err(ConfigError::Invalid(format!("kde.cell_size_m {} exceeds half the smaller radius", k.cell_size_m)));
        }
        let f = &self.filters;
        if !(f.min_duration_min >= 0.0 && f.min_duration_min <= f.max_duration_min) {
            return Err(ConfigError::Invalid("filters: need 0 <= min_duration_min <= max_duration_min".into()));
        }
        if !(f.jitter_m >= 0.0 && f.max_speed_kmh > 0.0 && f.max_snapshot_gap_min > 0.0) {
            return Err(ConfigError::Invalid("filters: jitter_m >= 0, max_speed_kmh > 0, max_snapshot_gap_min > 0".into()));
        }
        if !(0.0..=1.0).contains(&f.max_skip_fraction) {
            return Err(ConfigError::Invalid("filters.max_skip_fraction must be in [0, 1]".into()));
        }
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return Err(ConfigError::Invalid("stats.alpha must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn timezone(&self) -> Result<StudyTimezone, ConfigError> {
        StudyTimezone::parse(&self.study.timezone).map_err(|e| ConfigError::Invalid(format!("study.timezone: {e}")))
    }

    pub fn reference_time(&self) -> Result<NaiveTime, ConfigError> {
        NaiveTime::parse_from_str(&self.study.reference_time, "%H:%M")
            .or_else(|_| NaiveTime::parse_from_str(&self.study.reference_time, "%H:%M:%S"))
            .map_err(|_| ConfigError::Invalid(format!("study.reference_time {:?} is not HH:MM", self.study.reference_time)))
    }

    pub fn thresholds(&self) -> Result<IncomeThresholds, ConfigError> {
        IncomeThresholds::new(self.classification.income_low_max, self.classification.income_high_min)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn reference_window(&self) -> Result<ReferenceWindow, ConfigError> {
        let dates = match (self.study.start_date, self.study.end_date) {
            (None, None) => None,
            (a, b) => Some((a.unwrap_or(NaiveDate::MIN), b.unwrap_or(NaiveDate::MAX))),
        };
        Ok(ReferenceWindow {
            timezone: self.timezone()?,
            reference: self.reference_time()?,
            tolerance_min: self.study.reference_tolerance_min,
            dates,
        })
    }

    pub fn trip_rules(&self) -> TripFilterRules {
        let f = &self.filters;
        TripFilterRules {
            min_duration_min: f.min_duration_min,
            max_duration_min: f.max_duration_min,
            jitter_m: Some(f.jitter_m),
            max_speed_kmh: Some(f.max_speed_kmh),
        }
    }

    pub fn outlier_policy(&self) -> OutlierPolicy {
        OutlierPolicy {
            excluded: self.outliers.excluded.iter().cloned().collect(),
            min_population: self.outliers.min_population,
        }
    }

    pub fn linkage(&self, operator: &str) -> Linkage {
        self.inputs.operators.get(operator).copied().unwrap_or(Linkage::Linked)
    }
}
