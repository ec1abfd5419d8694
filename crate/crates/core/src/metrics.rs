//! Per-zone equity indicators and their rollups by zone category and by population group.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diag::Diagnostics;
use crate::geo::{kde_raster_weighted, zonal_mean, Extent, GeoError, KdeRaster, SearchRadius, ZoneIndex};
use crate::ingest::{Snapshot, StationRegistry, StationStatus};
use crate::model::{
    classify_income, order_categories, zone_category, CategoryScheme, GeoPoint, IncomeClass, IncomeThresholds, Instant,
    Mode, StudyTimezone, Zone, UNKNOWN,
};
use crate::tripinfer::{EventKind, IdleInterval, Trip, TripEndEvent};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no usable reference-hour observations for {0}")]
    NoUsableDays(Mode),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Which observation counts as "the" daily observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceWindow {
    pub timezone: StudyTimezone,
    pub reference: NaiveTime,
    pub tolerance_min: i64,
    /// Inclusive local-date range; `None` accepts every day.
    pub dates: Option<(NaiveDate, NaiveDate)>,
}

impl Default for ReferenceWindow {
    fn default() -> Self {
        ReferenceWindow {
            timezone: StudyTimezone::UTC,
            reference: NaiveTime::from_hms_opt(6, 0, 0).unwrap(),
            tolerance_min: 30,
            dates: None,
        }
    }
}

impl ReferenceWindow {
    /// Local date whose reference moment lies within tolerance of `t`, with the offset in seconds.
    fn match_day(&self, t: Instant) -> Option<(NaiveDate, i64)> {
        let local = t.to_local(self.timezone).naive_local();
        let tol = self.tolerance_min * 60;
        // The window can straddle midnight when the reference hour is near it.
        for shift in [0i64, 1, -1] {
            let date = local.date() + chrono::Duration::days(shift);
            let target = date.and_time(self.reference);
            let off = (local - target).num_seconds();
            if off.abs() <= tol {
                if let Some((lo, hi)) = self.dates {
                    if date < lo || date > hi {
                        return None;
                    }
                }
                return Some((date, off));
            }
        }
        None
    }

    /// Index of the nearest time to the reference moment for each local date. Ties go to the earlier time.
    pub fn select(&self, times: &[Instant]) -> BTreeMap<NaiveDate, usize> {
        let mut best: BTreeMap<NaiveDate, (i64, Instant, usize)> = BTreeMap::new();
        for (i, t) in times.iter().enumerate() {
            let Some((date, off)) = self.match_day(*t) else { continue };
            let key = (off.abs(), *t, i);
            best.entry(date).and_modify(|b| if key < *b { *b = key }).or_insert(key);
        }
        best.into_iter().map(|(d, (_, _, i))| (d, i)).collect()
    }
}

/// Weighted supply locations observed at one day's reference moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDay {
    pub date: NaiveDate,
    /// Location and the number of vehicles there.
    pub points: Vec<(GeoPoint, f64)>,
}

/// Scooter reference days. A day counts only when every operator has a snapshot in the window.
pub fn scooter_reference_days(
    operators: &BTreeMap<String, Vec<Snapshot>>,
    window: &ReferenceWindow,
) -> (Vec<ReferenceDay>, Diagnostics) {
    let mut diag = Diagnostics::new();
    let picks: BTreeMap<&str, BTreeMap<NaiveDate, usize>> = operators
        .iter()
        .map(|(op, snaps)| {
            let times: Vec<Instant> = snaps.iter().map(|s| s.taken_at).collect();
            (op.as_str(), window.select(&times))
        })
        .collect();
    let all_dates: BTreeSet<NaiveDate> = picks.values().flat_map(|m| m.keys().copied()).collect();
    let mut days = Vec::new();
    for date in all_dates {
        let missing: Vec<&str> = picks.iter().filter(|(_, m)| !m.contains_key(&date)).map(|(op, _)| *op).collect();
        if !missing.is_empty() {
            diag.warn("reference_day_skipped", format!("{date}: no reference snapshot for {missing:?}"));
            continue;
        }
        let points = picks
            .iter()
            .flat_map(|(op, m)| operators[*op][m[&date]].observations.iter().map(|o| (o.point, 1.0)))
            .collect();
        days.push(ReferenceDay { date, points });
    }
    (days, diag)
}

/// Bike reference days from station-status captures; each station contributes its available bikes.
pub fn bike_reference_days(
    captures: &[Vec<StationStatus>],
    registry: &StationRegistry,
    window: &ReferenceWindow,
) -> (Vec<ReferenceDay>, Diagnostics) {
    let mut diag = Diagnostics::new();
    let times: Vec<Instant> =
        captures.iter().map(|c| c.first().map(|s| s.taken_at).unwrap_or(Instant(i64::MIN / 2))).collect();
    let mut days = Vec::new();
    for (date, i) in window.select(&times) {
        let mut points = Vec::new();
        for s in &captures[i] {
            match registry.get(&s.station_id) {
                Some(st) => points.push((st.point, s.bikes_available as f64)),
                None => diag.warn("station_status_unknown_station", format!("{date}: station {}", s.station_id)),
            }
        }
        days.push(ReferenceDay { date, points });
    }
    (days, diag)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub per_zone: BTreeMap<String, f64>,
    pub days: usize,
    /// Mean daily vehicles that fell outside every zone.
    pub dropped_per_day: f64,
}

/// Mean daily vehicle count per zone; every indexed zone gets an entry.
pub fn daily_availability(days: &[ReferenceDay], index: &ZoneIndex, mode: Mode) -> Result<Availability, MetricsError> {
    if days.is_empty() {
        return Err(MetricsError::NoUsableDays(mode));
    }
    let mut totals: BTreeMap<String, f64> = index.zones().iter().map(|z| (z.id.clone(), 0.0)).collect();
    let mut dropped = 0.0;
    for day in days {
        for (p, w) in &day.points {
            match index.assign(*p) {
                Some(id) => *totals.get_mut(id).unwrap() += w,
                None => dropped += w,
            }
        }
    }
    let n = days.len() as f64;
    Ok(Availability {
        per_zone: totals.into_iter().map(|(k, v)| (k, v / n)).collect(),
        days: days.len(),
        dropped_per_day: dropped / n,
    })
}

/// Per-resident and per-(resident + job) rates; absent when the denominator is zero
/// or the population is below `min_population`.
pub fn normalize(count: f64, population: u64, jobs: u64, min_population: u64) -> (Option<f64>, Option<f64>) {
    if population == 0 || population < min_population {
        return (None, None);
    }
    (Some(count / population as f64), Some(count / (population + jobs) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointWeighting {
    /// Each trip end counts one half.
    #[default]
    HalfEach,
    /// Each trip counts fully at its origin; destinations are ignored.
    OriginOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub per_zone: BTreeMap<String, f64>,
    pub dropped_endpoints: usize,
    /// Trip-equivalents lost to endpoints outside every zone.
    pub dropped_weight: f64,
    pub total_weight: f64,
}

pub fn usage_counts(trips: &[Trip], events: &[TripEndEvent], index: &ZoneIndex, weighting: EndpointWeighting) -> Usage {
    let mut u = Usage { per_zone: index.zones().iter().map(|z| (z.id.clone(), 0.0)).collect(), ..Usage::default() };
    let (w_origin, w_dest) = match weighting {
        EndpointWeighting::HalfEach => (0.5, 0.5),
        EndpointWeighting::OriginOnly => (1.0, 0.0),
    };
    let mut add = |p: GeoPoint, w: f64| {
        if w == 0.0 {
            return;
        }
        u.total_weight += w;
        match index.assign(p) {
            Some(id) => *u.per_zone.get_mut(id).unwrap() += w,
            None => {
                u.dropped_endpoints += 1;
                u.dropped_weight += w;
            }
        }
    };
    for t in trips {
        add(t.start_point, w_origin);
        add(t.end_point, w_dest);
    }
    for e in events {
        match e.kind {
            EventKind::Origin => add(e.point, w_origin),
            EventKind::Destination => add(e.point, w_dest),
        }
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleStats {
    pub mean_h: f64,
    pub median_h: f64,
    pub intervals: usize,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Interval-weighted mean and median idle hours per zone of the parked location.
/// Returns the per-zone stats and the number of intervals outside every zone.
pub fn idle_aggregate(intervals: &[IdleInterval], index: &ZoneIndex) -> (BTreeMap<String, IdleStats>, usize) {
    let mut by_zone: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut dropped = 0;
    for i in intervals {
        match index.assign(i.location) {
            Some(id) => by_zone.entry(id).or_default().push(i.duration_h),
            None => dropped += 1,
        }
    }
    let stats = by_zone
        .into_iter()
        .map(|(id, xs)| {
            (id.to_string(), IdleStats { mean_h: mean(&xs).unwrap(), median_h: median(&xs).unwrap(), intervals: xs.len() })
        })
        .collect();
    (stats, dropped)
}

/// Kernel density over the mean daily supply, and its zonal mean per zone.
pub fn kde_accessibility(
    days: &[ReferenceDay],
    index: &ZoneIndex,
    radius: SearchRadius,
    cell_size_m: f64,
) -> Result<(KdeRaster, BTreeMap<String, f64>), MetricsError> {
    let extent = Extent::covering(index.bounds(), radius.meters(), cell_size_m)?;
    let n = days.len().max(1) as f64;
    let proj = index.projection();
    let points: Vec<_> = days.iter().flat_map(|d| d.points.iter().map(|(p, w)| (proj.project(*p), w / n))).collect();
    let raster = kde_raster_weighted(&points, radius, extent)?;
    let per_zone = index.zones().iter().map(|z| (z.id.clone(), zonal_mean(&raster, z))).collect();
    Ok((raster, per_zone))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    AvailDaily,
    AvailPerResident,
    AvailPerResidentJob,
    Kde,
    Trips,
    TripsPerResident,
    TripsPerResidentJob,
    IdleMean,
    IdleMedian,
}

impl Indicator {
    pub const ALL: [Indicator; 9] = [
        Indicator::AvailDaily,
        Indicator::AvailPerResident,
        Indicator::AvailPerResidentJob,
        Indicator::Kde,
        Indicator::Trips,
        Indicator::TripsPerResident,
        Indicator::TripsPerResidentJob,
        Indicator::IdleMean,
        Indicator::IdleMedian,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Indicator::AvailDaily => "avail",
            Indicator::AvailPerResident => "avail_per_res",
            Indicator::AvailPerResidentJob => "avail_per_res_job",
            Indicator::Kde => "kde",
            Indicator::Trips => "trips",
            Indicator::TripsPerResident => "trips_per_res",
            Indicator::TripsPerResidentJob => "trips_per_res_job",
            Indicator::IdleMean => "idle_mean_h",
            Indicator::IdleMedian => "idle_median_h",
        }
    }

    pub fn per_capita(self) -> bool {
        matches!(
            self,
            Indicator::AvailPerResident
                | Indicator::AvailPerResidentJob
                | Indicator::TripsPerResident
                | Indicator::TripsPerResidentJob
        )
    }

    pub fn parse(key: &str) -> Option<Indicator> {
        Indicator::ALL.into_iter().find(|i| i.key() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub zone_id: String,
    pub mode: Mode,
    pub avail_daily_mean: f64,
    pub avail_per_resident: Option<f64>,
    pub avail_per_resident_job: Option<f64>,
    pub kde_accessibility: f64,
    pub trips: f64,
    pub trips_per_resident: Option<f64>,
    pub trips_per_resident_job: Option<f64>,
    pub idle_mean_h: Option<f64>,
    pub idle_median_h: Option<f64>,
}

impl ZoneMetrics {
    pub fn value(&self, indicator: Indicator) -> Option<f64> {
        match indicator {
            Indicator::AvailDaily => Some(self.avail_daily_mean),
            Indicator::AvailPerResident => self.avail_per_resident,
            Indicator::AvailPerResidentJob => self.avail_per_resident_job,
            Indicator::Kde => Some(self.kde_accessibility),
            Indicator::Trips => Some(self.trips),
            Indicator::TripsPerResident => self.trips_per_resident,
            Indicator::TripsPerResidentJob => self.trips_per_resident_job,
            Indicator::IdleMean => self.idle_mean_h,
            Indicator::IdleMedian => self.idle_median_h,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierPolicy {
    pub excluded: BTreeSet<String>,
    pub min_population: u64,
}

impl OutlierPolicy {
    pub fn includes(&self, zone_id: &str) -> bool {
        !self.excluded.contains(zone_id)
    }
}

/// Per-zone inputs for one mode, each keyed by zone id.
#[derive(Debug, Clone, Default)]
pub struct ModeInputs {
    pub availability: BTreeMap<String, f64>,
    pub kde: BTreeMap<String, f64>,
    pub usage: BTreeMap<String, f64>,
    pub idle: BTreeMap<String, IdleStats>,
}

/// One row per zone, in zone-id order.
pub fn assemble_zone_metrics(zones: &[Zone], mode: Mode, inputs: &ModeInputs, policy: &OutlierPolicy) -> Vec<ZoneMetrics> {
    let mut sorted: Vec<&Zone> = zones.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted
        .into_iter()
        .map(|z| {
            let get = |m: &BTreeMap<String, f64>| m.get(&z.id).copied().unwrap_or(0.0);
            let avail = get(&inputs.availability);
            let trips = get(&inputs.usage);
            let (apr, aprj) = normalize(avail, z.population, z.jobs, policy.min_population);
            let (tpr, tprj) = normalize(trips, z.population, z.jobs, policy.min_population);
            let idle = inputs.idle.get(&z.id);
            ZoneMetrics {
                zone_id: z.id.clone(),
                mode,
                avail_daily_mean: avail,
                avail_per_resident: apr,
                avail_per_resident_job: aprj,
                kde_accessibility: get(&inputs.kde),
                trips,
                trips_per_resident: tpr,
                trips_per_resident_job: tprj,
                idle_mean_h: idle.map(|s| s.mean_h),
                idle_median_h: idle.map(|s| s.median_h),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorStat {
    /// Member zones with the indicator defined.
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: String,
    pub count: usize,
    pub stats: BTreeMap<Indicator, IndicatorStat>,
}

impl CategorySummary {
    fn of(category: &str, members: &[&ZoneMetrics]) -> Self {
        let stats = Indicator::ALL
            .into_iter()
            .map(|ind| {
                let xs: Vec<f64> = members.iter().filter_map(|m| m.value(ind)).collect();
                (ind, IndicatorStat { n: xs.len(), mean: mean(&xs), median: median(&xs) })
            })
            .collect();
        CategorySummary { category: category.to_string(), count: members.len(), stats }
    }

    pub fn mean(&self, ind: Indicator) -> Option<f64> {
        self.stats.get(&ind).and_then(|s| s.mean)
    }

    pub fn median(&self, ind: Indicator) -> Option<f64> {
        self.stats.get(&ind).and_then(|s| s.median)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: CategoryScheme,
    pub rows: Vec<CategorySummary>,
    /// Zones whose class could not be determined; kept out of `rows`.
    pub unknown: Option<CategorySummary>,
}

pub const AVERAGE: &str = "Average";

fn zone_lookup(zones: &[Zone]) -> BTreeMap<&str, &Zone> {
    zones.iter().map(|z| (z.id.as_str(), z)).collect()
}

/// Zone metrics of included zones grouped by category label.
pub fn group_by_category<'a>(
    metrics: &'a [ZoneMetrics],
    zones: &[Zone],
    scheme: CategoryScheme,
    thresholds: &IncomeThresholds,
    policy: &OutlierPolicy,
) -> BTreeMap<String, Vec<&'a ZoneMetrics>> {
    let lookup = zone_lookup(zones);
    let mut groups: BTreeMap<String, Vec<&ZoneMetrics>> = BTreeMap::new();
    for m in metrics.iter().filter(|m| policy.includes(&m.zone_id)) {
        let label = lookup.get(m.zone_id.as_str()).map(|z| zone_category(z, scheme, thresholds)).unwrap_or_else(|| UNKNOWN.into());
        groups.entry(label).or_default().push(m);
    }
    groups
}

/// Unweighted across-zone mean and median per category.
pub fn summarize_by_category(
    metrics: &[ZoneMetrics],
    zones: &[Zone],
    scheme: CategoryScheme,
    thresholds: &IncomeThresholds,
    policy: &OutlierPolicy,
) -> (SchemeSummary, Diagnostics) {
    let mut diag = Diagnostics::new();
    let groups = group_by_category(metrics, zones, scheme, thresholds, policy);
    for canon in crate::model::canonical_categories(scheme) {
        if !groups.contains_key(*canon) {
            diag.warn("empty_category", format!("{}: no zones in {canon}", scheme.title()));
        }
    }
    let rows = order_categories(scheme, groups.keys().cloned())
        .into_iter()
        .map(|label| CategorySummary::of(&label, &groups[&label]))
        .collect();
    let unknown = groups.get(UNKNOWN).map(|g| CategorySummary::of(UNKNOWN, g));
    (SchemeSummary { scheme, rows, unknown }, diag)
}

/// The "Average" row over every included zone.
pub fn summarize_all(metrics: &[ZoneMetrics], policy: &OutlierPolicy) -> CategorySummary {
    let members: Vec<&ZoneMetrics> = metrics.iter().filter(|m| policy.includes(&m.zone_id)).collect();
    CategorySummary::of(AVERAGE, &members)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Race,
    Income,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedGroup {
    pub kind: GroupKind,
    pub group: String,
    pub population: f64,
    pub values: BTreeMap<Indicator, Option<f64>>,
}

/// Σ w·m / Σ w, computed as an offset from the first value so that a constant
/// metric comes back exactly.
pub fn weighted_mean(pairs: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = pairs.iter().map(|(w, _)| w).sum();
    if pairs.is_empty() || total <= 0.0 {
        return None;
    }
    let base = pairs[0].1;
    let dev: f64 = pairs.iter().map(|(w, m)| w * (m - base)).sum();
    Some(base + dev / total)
}

fn race_order(groups: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = groups.into_iter().collect();
    v.sort_by_key(|g| match g.as_str() {
        "White" => (0, String::new()),
        "Black" => (1, String::new()),
        _ => (2, g.clone()),
    });
    v
}

/// Population-weighted indicator means per race group and income band.
pub fn population_weighted(
    metrics: &[ZoneMetrics],
    zones: &[Zone],
    thresholds: &IncomeThresholds,
    policy: &OutlierPolicy,
    indicators: &[Indicator],
) -> (Vec<WeightedGroup>, Diagnostics) {
    let mut diag = Diagnostics::new();
    let lookup = zone_lookup(zones);
    let included: Vec<(&ZoneMetrics, &Zone)> = metrics
        .iter()
        .filter(|m| policy.includes(&m.zone_id))
        .filter_map(|m| lookup.get(m.zone_id.as_str()).map(|z| (m, *z)))
        .collect();

    let race_groups: BTreeSet<String> =
        included.iter().filter_map(|(_, z)| z.race_shares.as_ref()).flat_map(|s| s.keys().cloned()).collect();
    let mut specs: Vec<(GroupKind, String)> = race_order(race_groups).into_iter().map(|g| (GroupKind::Race, g)).collect();
    specs.extend(["Low", "Middle", "High"].map(|g| (GroupKind::Income, g.to_string())));

    let group_pop = |kind: GroupKind, group: &str, z: &Zone| -> f64 {
        match kind {
            GroupKind::Race => z.race_shares.as_ref().and_then(|s| s.get(group)).map_or(0.0, |s| s * z.population as f64),
            GroupKind::Income => {
                let band = classify_income(z.median_income, thresholds);
                let matches = matches!(
                    (band, group),
                    (IncomeClass::Low, "Low") | (IncomeClass::Middle, "Middle") | (IncomeClass::High, "High")
                );
                if matches { z.population as f64 } else { 0.0 }
            }
        }
    };

    let mut out = Vec::new();
    for (kind, group) in specs {
        let pops: Vec<f64> = included.iter().map(|(_, z)| group_pop(kind, &group, z)).collect();
        let population: f64 = pops.iter().sum();
        if population <= 0.0 {
            diag.warn("empty_group", format!("{group}: zero total population"));
            continue;
        }
        let values = indicators
            .iter()
            .map(|&ind| {
                let pairs: Vec<(f64, f64)> = included
                    .iter()
                    .zip(&pops)
                    .filter(|(_, p)| **p > 0.0)
                    .filter_map(|((m, _), p)| m.value(ind).map(|v| (*p, v)))
                    .collect();
                (ind, weighted_mean(&pairs))
            })
            .collect();
        out.push(WeightedGroup { kind, group, population, values });
    }
    (out, diag)
}

pub mod tables {
    //! Canonical zone-metrics table.

    use super::*;

    pub const HEADER: &str = "zone_id,mode,avail,avail_per_res,avail_per_res_job,kde,trips,trips_per_res,trips_per_res_job,idle_mean_h,idle_median_h";

    fn cell(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }

    pub fn write_zone_metrics(rows: &[ZoneMetrics]) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for m in rows {
            let cells: Vec<String> = Indicator::ALL.iter().map(|i| cell(m.value(*i))).collect();
            s.push_str(&format!("{},{},{}\n", m.zone_id, m.mode, cells.join(",")));
        }
        s
    }

    pub fn read_zone_metrics(text: &str) -> Result<Vec<ZoneMetrics>, String> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(format!("line {}: expected 11 fields, got {}", i + 1, f.len()));
            }
            let num = |s: &str| -> Result<Option<f64>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| format!("line {}: bad number {s:?}", i + 1))
                }
            };
            let req = |s: &str| num(s)?.ok_or_else(|| format!("line {}: missing value", i + 1));
            let mode = match f[1] {
                "scooter" => Mode::Scooter,
                "bike" => Mode::Bike,
                other => return Err(format!("line {}: bad mode {other:?}", i + 1)),
            };
            out.push(ZoneMetrics {
                zone_id: f[0].to_string(),
                mode,
                avail_daily_mean: req(f[2])?,
                avail_per_resident: num(f[3])?,
                avail_per_resident_job: num(f[4])?,
                kde_accessibility: req(f[5])?,
                trips: req(f[6])?,
                trips_per_resident: num(f[7])?,
                trips_per_resident_job: num(f[8])?,
                idle_mean_h: num(f[9])?,
                idle_median_h: num(f[10])?,
            });
        }
        Ok(out)
    }
}
