//! Domain types shared across the pipeline and the zone classification rules.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, FixedOffset, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("coordinate out of range: lon={lon}, lat={lat}")]
    CoordinateOutOfRange { lon: f64, lat: f64 },
    #[error("invalid zone {id}: {reason}")]
    InvalidZone { id: String, reason: String },
    #[error("income thresholds must satisfy low_max < high_min (got {low_max} / {high_min})")]
    InvalidThresholds { low_max: f64, high_min: f64 },
    #[error("invalid UTC offset {0:?}")]
    InvalidOffset(String),
}

/// WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, ModelError> {
        if !(lon.is_finite() && lat.is_finite())
            || !(-180.0..=180.0).contains(&lon)
            || !(-90.0..=90.0).contains(&lat)
        {
            return Err(ModelError::CoordinateOutOfRange { lon, lat });
        }
        Ok(GeoPoint { lon, lat })
    }
}

/// Seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Instant(pub i64);

impl Instant {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn minutes_until(self, later: Instant) -> f64 {
        (later.0 - self.0) as f64 / 60.0
    }

    pub fn hours_until(self, later: Instant) -> f64 {
        (later.0 - self.0) as f64 / 3600.0
    }

    pub fn to_utc(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0, 0).unwrap_or_default()
    }

    pub fn to_local(self, tz: StudyTimezone) -> DateTime<FixedOffset> {
        self.to_utc().with_timezone(&tz.offset())
    }

    pub fn from_local(naive: NaiveDateTime, tz: StudyTimezone) -> Instant {
        // Fixed offsets are never ambiguous.
        let local = tz.offset().from_local_datetime(&naive).unwrap();
        Instant(local.timestamp())
    }

    /// ISO 8601 UTC, e.g. `2019-06-01T06:00:00Z`.
    pub fn to_iso(self) -> String {
        self.to_utc().format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }
}

impl fmt::Display for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

/// Study-area wall-clock offset from UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyTimezone {
    pub offset_seconds: i32,
}

impl StudyTimezone {
    pub const UTC: StudyTimezone = StudyTimezone { offset_seconds: 0 };

    pub fn offset(self) -> FixedOffset {
        FixedOffset::east_opt(self.offset_seconds).expect("offset validated at construction")
    }

    /// Parses `+HH:MM`, `-HH:MM`, `Z` or `UTC`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("z") || t.eq_ignore_ascii_case("utc") {
            return Ok(Self::UTC);
        }
        let bad = || ModelError::InvalidOffset(text.to_string());
        let (sign, rest) = match t.as_bytes().first() {
            Some(b'+') => (1, &t[1..]),
            Some(b'-') => (-1, &t[1..]),
            _ => return Err(bad()),
        };
        let (h, m) = rest.split_once(':').ok_or_else(bad)?;
        let h: i32 = h.parse().map_err(|_| bad())?;
        let m: i32 = m.parse().map_err(|_| bad())?;
        if h > 14 || m >= 60 {
            return Err(bad());
        }
        Ok(StudyTimezone { offset_seconds: sign * (h * 3600 + m * 60) })
    }
}

impl fmt::Display for StudyTimezone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.offset_seconds;
        let sign = if s < 0 { '-' } else { '+' };
        let a = s.abs();
        write!(f, "{}{:02}:{:02}", sign, a / 3600, (a % 3600) / 60)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Scooter,
    Bike,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Scooter, Mode::Bike];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scooter => "scooter",
            Mode::Bike => "bike",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A ring is a closed sequence of vertices (first == last).
pub type Ring = Vec<GeoPoint>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

/// Census zone (block group) with its demographic attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub geometry: Vec<Polygon>,
    pub population: u64,
    pub jobs: u64,
    pub median_income: Option<f64>,
    /// `None` when no demographic record was available for the zone.
    pub race_shares: Option<BTreeMap<String, f64>>,
    pub eea: bool,
}

impl Zone {
    pub fn new(id: impl Into<String>, geometry: Vec<Polygon>) -> Self {
        Zone {
            id: id.into(),
            geometry,
            population: 0,
            jobs: 0,
            median_income: None,
            race_shares: None,
            eea: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidZone { id: self.id.clone(), reason };
        if self.geometry.is_empty() {
            return Err(fail("no polygons".into()));
        }
        for poly in &self.geometry {
            for ring in std::iter::once(&poly.exterior).chain(poly.holes.iter()) {
                if ring.len() < 4 {
                    return Err(fail(format!("ring has {} vertices, need at least 4", ring.len())));
                }
                if ring.first() != ring.last() {
                    return Err(fail("ring not closed".into()));
                }
            }
        }
        if let Some(shares) = &self.race_shares {
            let mut total = 0.0;
            for (label, s) in shares {
                if !(0.0..=1.0).contains(s) {
                    return Err(fail(format!("race share {label}={s} outside [0,1]")));
                }
                total += s;
            }
            if total > 1.0 + 1e-6 {
                return Err(fail(format!("race shares sum to {total}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IncomeClass {
    Low,
    Middle,
    High,
    Unknown,
}

impl IncomeClass {
    pub fn label(self) -> &'static str {
        match self {
            IncomeClass::Low => "Low",
            IncomeClass::Middle => "Middle",
            IncomeClass::High => "High",
            IncomeClass::Unknown => UNKNOWN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncomeThresholds {
    pub low_max: f64,
    pub high_min: f64,
}

impl IncomeThresholds {
    pub fn new(low_max: f64, high_min: f64) -> Result<Self, ModelError> {
        if !(low_max < high_min) {
            return Err(ModelError::InvalidThresholds { low_max, high_min });
        }
        Ok(IncomeThresholds { low_max, high_min })
    }
}

impl Default for IncomeThresholds {
    /// Washington DC block-group quartile bounds.
    fn default() -> Self {
        IncomeThresholds { low_max: 49_222.0, high_min: 130_615.0 }
    }
}

pub fn classify_income(median_income: Option<f64>, thresholds: &IncomeThresholds) -> IncomeClass {
    match median_income {
        None => IncomeClass::Unknown,
        Some(v) if v.is_nan() => IncomeClass::Unknown,
        Some(v) if v <= thresholds.low_max => IncomeClass::Low,
        Some(v) if v >= thresholds.high_min => IncomeClass::High,
        Some(_) => IncomeClass::Middle,
    }
}

/// Racial composition outcome. Labels are open strings so any group can hold a majority.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RaceMajority {
    Majority(String),
    NoMajority,
    Unknown,
}

impl RaceMajority {
    pub fn label(&self) -> String {
        match self {
            RaceMajority::Majority(race) => format!("{race}-Majority"),
            RaceMajority::NoMajority => NO_MAJORITY.to_string(),
            RaceMajority::Unknown => UNKNOWN.to_string(),
        }
    }
}

/// Strictly more than half of residents must share one label.
pub fn classify_race(race_shares: Option<&BTreeMap<String, f64>>) -> RaceMajority {
    let Some(shares) = race_shares else {
        return RaceMajority::Unknown;
    };
    // At most one label can exceed 0.5 when shares sum to <= 1.
    let mut winners = shares.iter().filter(|(_, s)| **s > 0.5);
    match (winners.next(), winners.next()) {
        (Some((label, _)), None) => RaceMajority::Majority(label.clone()),
        _ => RaceMajority::NoMajority,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CategoryScheme {
    EeaStatus,
    IncomeBand,
    RacialComposition,
}

impl CategoryScheme {
    pub const ALL: [CategoryScheme; 3] =
        [CategoryScheme::EeaStatus, CategoryScheme::IncomeBand, CategoryScheme::RacialComposition];

    pub fn title(self) -> &'static str {
        match self {
            CategoryScheme::EeaStatus => "EEA status",
            CategoryScheme::IncomeBand => "Median household income",
            CategoryScheme::RacialComposition => "Racial composition",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            CategoryScheme::EeaStatus => "eea",
            CategoryScheme::IncomeBand => "income",
            CategoryScheme::RacialComposition => "race",
        }
    }
}

pub const EEA: &str = "EEA";
pub const NON_EEA: &str = "Non-EEA";
pub const NO_MAJORITY: &str = "No-Majority";
pub const UNKNOWN: &str = "Unknown";

pub fn zone_category(zone: &Zone, scheme: CategoryScheme, thresholds: &IncomeThresholds) -> String {
    match scheme {
        CategoryScheme::EeaStatus => if zone.eea { EEA } else { NON_EEA }.to_string(),
        CategoryScheme::IncomeBand => classify_income(zone.median_income, thresholds).label().to_string(),
        CategoryScheme::RacialComposition => classify_race(zone.race_shares.as_ref()).label(),
    }
}

/// Display order of categories within a scheme. Labels not listed here
/// (minor racial majorities) follow in lexicographic order.
pub fn canonical_categories(scheme: CategoryScheme) -> &'static [&'static str] {
    match scheme {
        CategoryScheme::EeaStatus => &[EEA, NON_EEA],
        CategoryScheme::IncomeBand => &["Low", "Middle", "High"],
        CategoryScheme::RacialComposition => &["White-Majority", "Black-Majority", NO_MAJORITY],
    }
}

/// Orders category labels for display; `Unknown` is dropped.
pub fn order_categories<I: IntoIterator<Item = String>>(scheme: CategoryScheme, labels: I) -> Vec<String> {
    let canon = canonical_categories(scheme);
    let mut labels: Vec<String> = labels.into_iter().filter(|l| l != UNKNOWN).collect();
    labels.sort();
    labels.dedup();
    labels.sort_by_key(|l| {
        let pos = canon.iter().position(|c| c == l);
        // Minor majorities sit between the named majorities and No-Majority.
        match pos {
            Some(p) if canon[p] == NO_MAJORITY => (2usize, 0usize),
            Some(p) => (0, p),
            None => (1, 0),
        }
    });
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shares(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn income_boundaries() {
        let t = IncomeThresholds::default();
        assert_eq!(classify_income(Some(49_222.0), &t), IncomeClass::Low);
        assert_eq!(classify_income(Some(49_223.0), &t), IncomeClass::Middle);
        assert_eq!(classify_income(Some(130_614.0), &t), IncomeClass::Middle);
        assert_eq!(classify_income(Some(130_615.0), &t), IncomeClass::High);
        assert_eq!(classify_income(Some(90_000.0), &t), IncomeClass::Middle);
        assert_eq!(classify_income(None, &t), IncomeClass::Unknown);
    }

    #[test]
    fn thresholds_must_be_ordered() {
        assert!(IncomeThresholds::new(10.0, 10.0).is_err());
        assert!(IncomeThresholds::new(10.0, 11.0).is_ok());
    }

    #[test]
    fn race_majority_rules() {
        let s = shares(&[("White", 0.6), ("Black", 0.3)]);
        assert_eq!(classify_race(Some(&s)), RaceMajority::Majority("White".into()));
        let s = shares(&[("White", 0.5), ("Black", 0.5)]);
        assert_eq!(classify_race(Some(&s)), RaceMajority::NoMajority);
        let s = shares(&[("White", 0.4), ("Black", 0.4), ("Hispanic", 0.2)]);
        assert_eq!(classify_race(Some(&s)), RaceMajority::NoMajority);
        assert_eq!(classify_race(None), RaceMajority::Unknown);
    }

    #[test]
    fn zone_category_dispatch() {
        let t = IncomeThresholds::default();
        let mut z = Zone::new("A", vec![]);
        z.eea = true;
        assert_eq!(zone_category(&z, CategoryScheme::EeaStatus, &t), "EEA");
        z.median_income = Some(40_000.0);
        assert_eq!(zone_category(&z, CategoryScheme::IncomeBand, &t), "Low");
        z.race_shares = Some(shares(&[("Black", 0.7)]));
        assert_eq!(zone_category(&z, CategoryScheme::RacialComposition, &t), "Black-Majority");
    }

    #[test]
    fn category_order() {
        let got = order_categories(
            CategoryScheme::RacialComposition,
            ["No-Majority", "Unknown", "Hispanic-Majority", "Black-Majority", "White-Majority"]
                .map(String::from),
        );
        assert_eq!(got, ["White-Majority", "Black-Majority", "Hispanic-Majority", "No-Majority"]);
    }

    #[test]
    fn timezone_parse_roundtrip() {
        let tz = StudyTimezone::parse("-04:00").unwrap();
        assert_eq!(tz.offset_seconds, -4 * 3600);
        assert_eq!(tz.to_string(), "-04:00");
        assert!(StudyTimezone::parse("04:00").is_err());
        assert_eq!(StudyTimezone::parse("Z").unwrap(), StudyTimezone::UTC);
    }

    #[test]
    fn geopoint_range() {
        assert!(GeoPoint::new(-77.0, 38.9).is_ok());
        assert!(GeoPoint::new(181.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn zone_share_sum_invariant() {
        let ring = vec![
            GeoPoint { lon: 0.0, lat: 0.0 },
            GeoPoint { lon: 1.0, lat: 0.0 },
            GeoPoint { lon: 1.0, lat: 1.0 },
            GeoPoint { lon: 0.0, lat: 0.0 },
        ];
        let mut z = Zone::new("Z", vec![Polygon { exterior: ring, holes: vec![] }]);
        z.race_shares = Some(shares(&[("A", 0.7), ("B", 0.4)]));
        assert!(z.validate().is_err());
        z.race_shares = Some(shares(&[("A", 0.6), ("B", 0.4)]));
        assert!(z.validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn income_monotone(a in 0.0f64..300_000.0, b in 0.0f64..300_000.0) {
                let t = IncomeThresholds::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(classify_income(Some(lo), &t) <= classify_income(Some(hi), &t));
            }

            #[test]
            fn race_relabel_equivariant(raw in proptest::collection::vec(0.0f64..1.0, 1..5)) {
                let total: f64 = raw.iter().sum::<f64>().max(1.0);
                let labels = ["a", "b", "c", "d", "e"];
                let renamed = ["q", "r", "s", "t", "u"];
                let s1: BTreeMap<String, f64> =
                    raw.iter().enumerate().map(|(i, v)| (labels[i].to_string(), v / total)).collect();
                let s2: BTreeMap<String, f64> =
                    raw.iter().enumerate().map(|(i, v)| (renamed[i].to_string(), v / total)).collect();
                let map = |m: RaceMajority| match m {
                    RaceMajority::Majority(l) => {
                        let i = labels.iter().position(|x| *x == l).unwrap();
                        RaceMajority::Majority(renamed[i].to_string())
                    }
                    other => other,
                };
                prop_assert_eq!(map(classify_race(Some(&s1))), classify_race(Some(&s2)));
            }
        }
    }
}
