//! Trip inference from vehicle snapshots, trip filtering and idle intervals.
//!
//! Linked operators keep vehicle ids stable, so a vehicle that vanishes and later
//! reappears elsewhere is one trip. Unlinked operators rotate ids, so only bare
//! origin and destination events can be recovered.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::haversine;
use crate::ingest::{RecordedTrip, Snapshot, StationRegistry, VehicleObservation};
use crate::model::{GeoPoint, Instant, Mode};

#[derive(Debug, Error, PartialEq)]
pub enum TripInferError {
    #[error("snapshots out of order: {prev} is not before {next}")]
    OutOfOrder { prev: Instant, next: Instant },
    #[error("snapshots from different operators: {0} vs {1}")]
    OperatorMismatch(String, String),
    #[error("trip table line {line}: {message}")]
    Table { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub mode: Mode,
    pub operator: String,
    pub vehicle_id: Option<String>,
    pub start_time: Instant,
    pub end_time: Instant,
    pub start_point: GeoPoint,
    pub end_point: GeoPoint,
    pub start_station: Option<String>,
    pub end_station: Option<String>,
    pub duration_min: f64,
    pub distance_m: Option<f64>,
    pub linked: bool,
}

impl Trip {
    /// Trip between two observations of the same vehicle.
    pub fn between(mode: Mode, operator: &str, from: &VehicleObservation, to: &VehicleObservation) -> Trip {
        Trip {
            mode,
            operator: operator.to_string(),
            vehicle_id: Some(from.vehicle_id.clone()),
            start_time: from.observed_at,
            end_time: to.observed_at,
            start_point: from.point,
            end_point: to.point,
            start_station: None,
            end_station: None,
            duration_min: from.observed_at.minutes_until(to.observed_at),
            distance_m: Some(haversine(from.point, to.point)),
            linked: true,
        }
    }

    pub fn displacement_m(&self) -> f64 {
        haversine(self.start_point, self.end_point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Origin,
    Destination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripEndEvent {
    pub kind: EventKind,
    pub time: Instant,
    pub point: GeoPoint,
    pub operator: String,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleInterval {
    pub mode: Mode,
    pub operator: String,
    pub vehicle_id: String,
    pub start: Instant,
    pub end: Instant,
    /// End point of the trip that parked the vehicle.
    pub location: GeoPoint,
    pub station_id: Option<String>,
    pub duration_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripFilterRules {
    pub min_duration_min: f64,
    pub max_duration_min: f64,
    /// Minimum straight-line displacement; `None` disables the check.
    pub jitter_m: Option<f64>,
    /// Maximum straight-line speed; `None` disables the check.
    pub max_speed_kmh: Option<f64>,
}

impl Default for TripFilterRules {
    fn default() -> Self {
        TripFilterRules { min_duration_min: 3.0, max_duration_min: 90.0, jitter_m: Some(100.0), max_speed_kmh: Some(25.0) }
    }
}

impl TripFilterRules {
    /// Duration bounds only; docked trips are trusted for displacement and speed.
    pub fn docked(self) -> Self {
        TripFilterRules { jitter_m: None, max_speed_kmh: None, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    TooShort,
    TooLong,
    Jitter,
    Relocation,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooShort => "too_short",
            RejectReason::TooLong => "too_long",
            RejectReason::Jitter => "jitter",
            RejectReason::Relocation => "relocation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOutcome {
    Keep,
    Reject(RejectReason),
}

/// Duration bounds are inclusive at both ends.
pub fn filter_trip(candidate: &Trip, rules: &TripFilterRules) -> FilterOutcome {
    let d = candidate.duration_min;
    if d < rules.min_duration_min {
        return FilterOutcome::Reject(RejectReason::TooShort);
    }
    if d > rules.max_duration_min {
        return FilterOutcome::Reject(RejectReason::TooLong);
    }
    if rules.jitter_m.is_none() && rules.max_speed_kmh.is_none() {
        return FilterOutcome::Keep;
    }
    let disp = candidate.displacement_m();
    if let Some(jitter) = rules.jitter_m {
        if disp < jitter {
            return FilterOutcome::Reject(RejectReason::Jitter);
        }
    }
    if let Some(vmax) = rules.max_speed_kmh {
        let kmh = (disp / 1000.0) / (d / 60.0);
        if kmh > vmax {
            return FilterOutcome::Reject(RejectReason::Relocation);
        }
    }
    FilterOutcome::Keep
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDiff {
    pub disappeared: Vec<VehicleObservation>,
    pub appeared: Vec<VehicleObservation>,
    /// (previous, next) observations of vehicles displaced by at least the jitter threshold.
    pub moved: Vec<(VehicleObservation, VehicleObservation)>,
}

fn check_pair(prev: &Snapshot, next: &Snapshot) -> Result<(), TripInferError> {
    if prev.operator != next.operator {
        return Err(TripInferError::OperatorMismatch(prev.operator.clone(), next.operator.clone()));
    }
    if prev.taken_at >= next.taken_at {
        return Err(TripInferError::OutOfOrder { prev: prev.taken_at, next: next.taken_at });
    }
    Ok(())
}

/// Set differences by vehicle id, each list sorted by id.
pub fn diff_snapshots(prev: &Snapshot, next: &Snapshot, jitter_m: f64) -> Result<SnapshotDiff, TripInferError> {
    check_pair(prev, next)?;
    let before: BTreeMap<&str, &VehicleObservation> =
        prev.observations.iter().map(|o| (o.vehicle_id.as_str(), o)).collect();
    let after: BTreeMap<&str, &VehicleObservation> =
        next.observations.iter().map(|o| (o.vehicle_id.as_str(), o)).collect();
    let mut diff = SnapshotDiff::default();
    for (id, o) in &before {
        match after.get(id) {
            None => diff.disappeared.push((*o).clone()),
            Some(n) if haversine(o.point, n.point) >= jitter_m => diff.moved.push(((*o).clone(), (*n).clone())),
            Some(_) => {}
        }
    }
    for (id, o) in &after {
        if !before.contains_key(id) {
            diff.appeared.push((*o).clone());
        }
    }
    Ok(diff)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkedInference {
    pub kept: Vec<Trip>,
    pub rejected: Vec<(Trip, RejectReason)>,
    pub disappearances: usize,
    pub appearances: usize,
    /// Vehicles still absent when the stream ends.
    pub unmatched_disappearances: usize,
    /// Vehicles first seen after the first snapshot.
    pub unmatched_appearances: usize,
}

impl LinkedInference {
    pub fn candidates(&self) -> usize {
        self.kept.len() + self.rejected.len()
    }
}

fn trip_order(a: &Trip, b: &Trip) -> std::cmp::Ordering {
    a.start_time
        .cmp(&b.start_time)
        .then_with(|| a.vehicle_id.cmp(&b.vehicle_id))
        .then_with(|| a.end_time.cmp(&b.end_time))
}

/// Infers trips for one operator whose vehicle ids persist across snapshots.
pub fn infer_linked_trips(
    snapshots: &[Snapshot],
    mode: Mode,
    rules: &TripFilterRules,
) -> Result<LinkedInference, TripInferError> {
    let jitter = rules.jitter_m.unwrap_or(0.0);
    let mut out = LinkedInference::default();
    let mut absent: HashMap<String, VehicleObservation> = HashMap::new();
    let mut candidates = Vec::new();
    for pair in snapshots.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let diff = diff_snapshots(prev, next, jitter)?;
        let operator = prev.operator.as_str();
        out.disappearances += diff.disappeared.len();
        out.appearances += diff.appeared.len();
        for o in diff.disappeared {
            absent.insert(o.vehicle_id.clone(), o);
        }
        for o in diff.appeared {
            match absent.remove(&o.vehicle_id) {
                Some(last_seen) => candidates.push(Trip::between(mode, operator, &last_seen, &o)),
                None => out.unmatched_appearances += 1,
            }
        }
        for (a, b) in diff.moved {
            candidates.push(Trip::between(mode, operator, &a, &b));
        }
    }
    out.unmatched_disappearances = absent.len();
    for trip in candidates {
        match filter_trip(&trip, rules) {
            FilterOutcome::Keep => out.kept.push(trip),
            FilterOutcome::Reject(r) => out.rejected.push((trip, r)),
        }
    }
    out.kept.sort_by(trip_order);
    out.rejected.sort_by(|a, b| trip_order(&a.0, &b.0));
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlinkedInference {
    pub events: Vec<TripEndEvent>,
    /// Disappearance/appearance pairs within the jitter distance, treated as one parked vehicle.
    pub suppressed_pairs: usize,
    /// Consecutive snapshot pairs further apart than the allowed gap, not diffed.
    pub skipped_gaps: usize,
}

impl UnlinkedInference {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// Origin and destination events for an operator that rotates vehicle ids.
/// Snapshot pairs more than `max_gap_s` apart (feed outages, overnight breaks) are skipped.
pub fn infer_unlinked_events(
    snapshots: &[Snapshot],
    mode: Mode,
    jitter_m: f64,
    max_gap_s: Option<i64>,
) -> Result<UnlinkedInference, TripInferError> {
    let mut out = UnlinkedInference::default();
    // Degrees of latitude spanned by the jitter radius, with slack.
    let lat_window = jitter_m / 111_000.0 * 1.01;
    for pair in snapshots.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let diff = diff_snapshots(prev, next, jitter_m)?;
        if max_gap_s.is_some_and(|g| next.taken_at.0 - prev.taken_at.0 > g) {
            out.skipped_gaps += 1;
            continue;
        }
        let mut gone: Vec<VehicleObservation> = diff.disappeared;
        let mut came: Vec<VehicleObservation> = diff.appeared;
        for (a, b) in diff.moved {
            gone.push(a);
            came.push(b);
        }
        came.sort_by(|a, b| a.point.lat.total_cmp(&b.point.lat).then_with(|| a.vehicle_id.cmp(&b.vehicle_id)));
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, g) in gone.iter().enumerate() {
            let lo = came.partition_point(|c| c.point.lat < g.point.lat - lat_window);
            for (j, c) in came.iter().enumerate().skip(lo) {
                if c.point.lat > g.point.lat + lat_window {
                    break;
                }
                let d = haversine(g.point, c.point);
                if d < jitter_m {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| gone[a.1].vehicle_id.cmp(&gone[b.1].vehicle_id))
                .then_with(|| came[a.2].vehicle_id.cmp(&came[b.2].vehicle_id))
        });
        let mut gone_used = vec![false; gone.len()];
        let mut came_used = vec![false; came.len()];
        for (_, i, j) in pairs {
            if !gone_used[i] && !came_used[j] {
                gone_used[i] = true;
                came_used[j] = true;
                out.suppressed_pairs += 1;
            }
        }
        let operator = &prev.operator;
        for (g, used) in gone.iter().zip(&gone_used) {
            if !used {
                out.events.push(TripEndEvent {
                    kind: EventKind::Origin,
                    time: prev.taken_at,
                    point: g.point,
                    operator: operator.clone(),
                    mode,
                });
            }
        }
        for (c, used) in came.iter().zip(&came_used) {
            if !used {
                out.events.push(TripEndEvent {
                    kind: EventKind::Destination,
                    time: next.taken_at,
                    point: c.point,
                    operator: operator.clone(),
                    mode,
                });
            }
        }
    }
    out.events.sort_by(|a, b| {
        a.time
            .cmp(&b.time)
            .then(a.kind.cmp(&b.kind))
            .then(a.point.lat.total_cmp(&b.point.lat))
            .then(a.point.lon.total_cmp(&b.point.lon))
    });
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordedConversion {
    pub kept: Vec<Trip>,
    pub rejected: Vec<(Trip, RejectReason)>,
    pub unresolved_stations: usize,
}

/// Converts docked trips; only the duration rule applies.
pub fn recorded_to_trips(
    recorded: &[RecordedTrip],
    registry: &StationRegistry,
    operator: &str,
    rules: &TripFilterRules,
) -> RecordedConversion {
    let rules = rules.docked();
    let mut out = RecordedConversion::default();
    for r in recorded {
        let (Some(s), Some(e)) = (registry.get(&r.start_station), registry.get(&r.end_station)) else {
            out.unresolved_stations += 1;
            continue;
        };
        let trip = Trip {
            mode: Mode::Bike,
            operator: operator.to_string(),
            vehicle_id: Some(r.vehicle_id.clone()),
            start_time: r.start_time,
            end_time: r.end_time,
            start_point: s.point,
            end_point: e.point,
            start_station: Some(s.station_id.clone()),
            end_station: Some(e.station_id.clone()),
            duration_min: r.start_time.minutes_until(r.end_time),
            distance_m: Some(haversine(s.point, e.point)),
            linked: true,
        };
        match filter_trip(&trip, &rules) {
            FilterOutcome::Keep => out.kept.push(trip),
            FilterOutcome::Reject(reason) => out.rejected.push((trip, reason)),
        }
    }
    out.kept.sort_by(trip_order);
    out.rejected.sort_by(|a, b| trip_order(&a.0, &b.0));
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdleResult {
    pub intervals: Vec<IdleInterval>,
    /// Consecutive trip pairs that overlap or touch.
    pub anomalies: usize,
}

/// Gaps between consecutive trips of one vehicle. `trips` must be sorted by start time.
pub fn idle_intervals(trips: &[Trip]) -> IdleResult {
    let mut out = IdleResult::default();
    for w in trips.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.start_time <= a.end_time {
            out.anomalies += 1;
            continue;
        }
        out.intervals.push(IdleInterval {
            mode: a.mode,
            operator: a.operator.clone(),
            vehicle_id: a.vehicle_id.clone().unwrap_or_default(),
            start: a.end_time,
            end: b.start_time,
            location: a.end_point,
            station_id: a.end_station.clone(),
            duration_h: a.end_time.hours_until(b.start_time),
        });
    }
    out
}

/// Groups linked trips by (mode, operator, vehicle) and collects their idle intervals.
pub fn idle_intervals_by_vehicle(trips: &[Trip]) -> IdleResult {
    let mut groups: BTreeMap<(Mode, &str, &str), Vec<&Trip>> = BTreeMap::new();
    for t in trips.iter().filter(|t| t.linked) {
        if let Some(v) = &t.vehicle_id {
            groups.entry((t.mode, t.operator.as_str(), v.as_str())).or_default().push(t);
        }
    }
    let mut out = IdleResult::default();
    for (_, mut group) in groups {
        group.sort_by(|a, b| trip_order(a, b));
        let owned: Vec<Trip> = group.into_iter().cloned().collect();
        let r = idle_intervals(&owned);
        out.intervals.extend(r.intervals);
        out.anomalies += r.anomalies;
    }
    out
}

pub mod tables {
    //! Canonical delimited tables for trips, unlinked events and idle intervals.

    use super::*;
    use chrono::DateTime;

    fn time(text: &str, line: usize) -> Result<Instant, TripInferError> {
        DateTime::parse_from_rfc3339(text)
            .map(|d| Instant(d.timestamp()))
            .map_err(|e| TripInferError::Table { line, message: format!("bad time {text:?}: {e}") })
    }

    fn num(text: &str, line: usize) -> Result<f64, TripInferError> {
        text.parse().map_err(|_| TripInferError::Table { line, message: format!("bad number {text:?}") })
    }

    fn opt(text: &str) -> Option<String> {
        (!text.is_empty()).then(|| text.to_string())
    }

    fn mode(text: &str, line: usize) -> Result<Mode, TripInferError> {
        match text {
            "scooter" => Ok(Mode::Scooter),
            "bike" => Ok(Mode::Bike),
            _ => Err(TripInferError::Table { line, message: format!("bad mode {text:?}") }),
        }
    }

    fn point(lon: &str, lat: &str, line: usize) -> Result<GeoPoint, TripInferError> {
        GeoPoint::new(num(lon, line)?, num(lat, line)?)
            .map_err(|e| TripInferError::Table { line, message: e.to_string() })
    }

    fn records(text: &str, ncols: usize) -> impl Iterator<Item = (usize, Vec<&str>)> {
        text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()).map(move |(i, l)| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.resize(ncols, "");
            (i + 1, f)
        })
    }

    pub const TRIP_HEADER: &str = "mode,operator,vehicle_id,linked,start_time,end_time,start_lon,start_lat,end_lon,end_lat,start_station,end_station,duration_min,distance_m";

    pub fn write_trips(trips: &[Trip]) -> String {
        let mut s = String::from(TRIP_HEADER);
        s.push('\n');
        for t in trips {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                t.mode,
                t.operator,
                t.vehicle_id.as_deref().unwrap_or(""),
                t.linked,
                t.start_time,
                t.end_time,
                t.start_point.lon,
                t.start_point.lat,
                t.end_point.lon,
                t.end_point.lat,
                t.start_station.as_deref().unwrap_or(""),
                t.end_station.as_deref().unwrap_or(""),
                t.duration_min,
                t.distance_m.map(|d| d.to_string()).unwrap_or_default(),
            ));
        }
        s
    }

    pub fn read_trips(text: &str) -> Result<Vec<Trip>, TripInferError> {
        records(text, 14)
            .map(|(line, f)| {
                Ok(Trip {
                    mode: mode(f[0], line)?,
                    operator: f[1].to_string(),
                    vehicle_id: opt(f[2]),
                    linked: f[3] == "true",
                    start_time: time(f[4], line)?,
                    end_time: time(f[5], line)?,
                    start_point: point(f[6], f[7], line)?,
                    end_point: point(f[8], f[9], line)?,
                    start_station: opt(f[10]),
                    end_station: opt(f[11]),
                    duration_min: num(f[12], line)?,
                    distance_m: if f[13].is_empty() { None } else { Some(num(f[13], line)?) },
                })
            })
            .collect()
    }

    pub const EVENT_HEADER: &str = "kind,mode,operator,time,lon,lat";

    pub fn write_events(events: &[TripEndEvent]) -> String {
        let mut s = String::from(EVENT_HEADER);
        s.push('\n');
        for e in events {
            let kind = match e.kind {
                EventKind::Origin => "origin",
                EventKind::Destination => "destination",
            };
            s.push_str(&format!("{},{},{},{},{},{}\n", kind, e.mode, e.operator, e.time, e.point.lon, e.point.lat));
        }
        s
    }

    pub fn read_events(text: &str) -> Result<Vec<TripEndEvent>, TripInferError> {
        records(text, 6)
            .map(|(line, f)| {
                let kind = match f[0] {
                    "origin" => EventKind::Origin,
                    "destination" => EventKind::Destination,
                    other => return Err(TripInferError::Table { line, message: format!("bad event kind {other:?}") }),
                };
                Ok(TripEndEvent {
                    kind,
                    mode: mode(f[1], line)?,
                    operator: f[2].to_string(),
                    time: time(f[3], line)?,
                    point: point(f[4], f[5], line)?,
                })
            })
            .collect()
    }

    pub const IDLE_HEADER: &str = "mode,operator,vehicle_id,start,end,lon,lat,station_id,duration_h";

    pub fn write_idle(intervals: &[IdleInterval]) -> String {
        let mut s = String::from(IDLE_HEADER);
        s.push('\n');
        for i in intervals {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                i.mode,
                i.operator,
                i.vehicle_id,
                i.start,
                i.end,
                i.location.lon,
                i.location.lat,
                i.station_id.as_deref().unwrap_or(""),
                i.duration_h
            ));
        }
        s
    }

    pub fn read_idle(text: &str) -> Result<Vec<IdleInterval>, TripInferError> {
        records(text, 9)
            .map(|(line, f)| {
                Ok(IdleInterval {
                    mode: mode(f[0], line)?,
                    operator: f[1].to_string(),
                    vehicle_id: f[2].to_string(),
                    start: time(f[3], line)?,
                    end: time(f[4], line)?,
                    location: point(f[5], f[6], line)?,
                    station_id: opt(f[7]),
                    duration_h: num(f[8], line)?,
                })
            })
            .collect()
    }
}
