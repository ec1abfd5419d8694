use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{json_error, IngestError};
use crate::diag::Diagnostics;
use crate::model::{GeoPoint, Instant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleObservation {
    pub vehicle_id: String,
    pub point: GeoPoint,
    pub observed_at: Instant,
}

/// Parked, rentable vehicles published by one operator at one moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub operator: String,
    pub taken_at: Instant,
    pub observations: Vec<VehicleObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: String,
    pub point: GeoPoint,
    pub name: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StationRegistry {
    pub stations: BTreeMap<String, Station>,
}

impl StationRegistry {
    pub fn get(&self, id: &str) -> Option<&Station> {
        self.stations.get(id)
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStatus {
    pub station_id: String,
    pub taken_at: Instant,
    pub bikes_available: u32,
}

fn shape(context: &str, message: impl Into<String>) -> IngestError {
    IngestError::Shape { context: context.to_string(), message: message.into() }
}

fn coordinate(v: Option<&Value>) -> Option<f64> {
    match v? {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn id_string(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Array under `data.<key>` for the first key present.
fn data_array<'a>(doc: &'a Value, keys: &[&str], context: &str) -> Result<&'a Vec<Value>, IngestError> {
    let data = doc
        .as_object()
        .ok_or_else(|| shape(context, "top level is not an object"))?
        .get("data")
        .and_then(Value::as_object)
        .ok_or_else(|| shape(context, "missing `data` object"))?;
    for key in keys {
        if let Some(v) = data.get(*key) {
            return v.as_array().ok_or_else(|| shape(context, format!("`data.{key}` is not an array")));
        }
    }
    Err(shape(context, format!("missing `data.{}` array", keys[0])))
}

/// Parses a free-bike-status document into a snapshot. Entries without usable
/// coordinates or ids are dropped and recorded in the returned diagnostics.
pub fn parse_gbfs_snapshot(
    bytes: &[u8],
    operator: &str,
    taken_at: Instant,
) -> Result<(Snapshot, Diagnostics), IngestError> {
    let context = format!("free_bike_status[{operator} @ {taken_at}]");
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| json_error(&context, bytes, e))?;
    let bikes = data_array(&doc, &["bikes", "vehicles"], &context)?;
    let mut diag = Diagnostics::new();
    let mut seen = BTreeSet::new();
    let mut observations = Vec::with_capacity(bikes.len());
    for (i, entry) in bikes.iter().enumerate() {
        let Some(id) = id_string(entry.get("bike_id").or_else(|| entry.get("vehicle_id"))) else {
            diag.warn("gbfs_missing_id", format!("{context}: entry {i} has no bike_id"));
            continue;
        };
        let (lat, lon) = (coordinate(entry.get("lat")), coordinate(entry.get("lon")));
        let point = match (lon, lat) {
            (Some(lon), Some(lat)) => match GeoPoint::new(lon, lat) {
                Ok(p) => p,
                Err(_) => {
                    diag.warn("gbfs_bad_coordinates", format!("{context}: bike {id} at ({lon}, {lat}) out of range"));
                    continue;
                }
            },
            _ => {
                diag.warn("gbfs_missing_coordinates", format!("{context}: bike {id} has no coordinates"));
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId { context, what: "bike", id });
        }
        observations.push(VehicleObservation { vehicle_id: id, point, observed_at: taken_at });
    }
    Ok((Snapshot { operator: operator.to_string(), taken_at, observations }, diag))
}

/// Inverse of [`parse_gbfs_snapshot`].
pub fn snapshot_to_gbfs(snapshot: &Snapshot) -> String {
    let bikes: Vec<Value> = snapshot
        .observations
        .iter()
        .map(|o| {
            json!({
                "bike_id": o.vehicle_id,
                "lat": o.point.lat,
                "lon": o.point.lon,
                "is_reserved": false,
                "is_disabled": false,
            })
        })
        .collect();
    let doc = json!({
        "last_updated": snapshot.taken_at.seconds(),
        "ttl": 0,
        "version": "2.3",
        "data": { "bikes": bikes },
    });
    serde_json::to_string(&doc).expect("serializable")
}

pub fn parse_station_information(bytes: &[u8]) -> Result<StationRegistry, IngestError> {
    let context = "station_information";
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| json_error(context, bytes, e))?;
    let mut registry = StationRegistry::default();
    for (i, entry) in data_array(&doc, &["stations"], context)?.iter().enumerate() {
        let id = id_string(entry.get("station_id")).ok_or_else(|| shape(context, format!("station {i} has no id")))?;
        let (lon, lat) = (coordinate(entry.get("lon")), coordinate(entry.get("lat")));
        let point = lon
            .zip(lat)
            .and_then(|(lon, lat)| GeoPoint::new(lon, lat).ok())
            .ok_or_else(|| shape(context, format!("station {id} has invalid coordinates")))?;
        let name = entry.get("name").and_then(Value::as_str).map(str::to_string);
        if registry.stations.contains_key(&id) {
            return Err(IngestError::DuplicateId { context: context.into(), what: "station", id });
        }
        registry.stations.insert(id.clone(), Station { station_id: id, point, name });
    }
    Ok(registry)
}

pub fn station_information_to_gbfs(registry: &StationRegistry) -> String {
    let stations: Vec<Value> = registry
        .stations
        .values()
        .map(|s| {
            let mut v = json!({ "station_id": s.station_id, "lat": s.point.lat, "lon": s.point.lon });
            if let Some(name) = &s.name {
                v["name"] = json!(name);
            }
            v
        })
        .collect();
    serde_json::to_string(&json!({ "last_updated": 0, "ttl": 0, "data": { "stations": stations } })).unwrap()
}

/// Station status rows; stations missing from the registry are dropped with a warning.
pub fn parse_station_status(
    bytes: &[u8],
    taken_at: Instant,
    registry: &StationRegistry,
) -> Result<(Vec<StationStatus>, Diagnostics), IngestError> {
    let context = format!("station_status[{taken_at}]");
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| json_error(&context, bytes, e))?;
    let mut diag = Diagnostics::new();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, entry) in data_array(&doc, &["stations"], &context)?.iter().enumerate() {
        let Some(id) = id_string(entry.get("station_id")) else {
            diag.warn("station_status_missing_id", format!("{context}: entry {i} has no station_id"));
            continue;
        };
        if registry.get(&id).is_none() {
            diag.warn("station_status_unknown_station", format!("{context}: station {id} not in registry"));
            continue;
        }
        let bikes = entry.get("num_bikes_available").and_then(Value::as_u64);
        let Some(bikes) = bikes else {
            diag.warn("station_status_missing_count", format!("{context}: station {id} has no num_bikes_available"));
            continue;
        };
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId { context, what: "station", id });
        }
        out.push(StationStatus { station_id: id, taken_at, bikes_available: bikes as u32 });
    }
    Ok((out, diag))
}

pub fn station_status_to_gbfs(taken_at: Instant, statuses: &[StationStatus]) -> String {
    let stations: Vec<Value> = statuses
        .iter()
        .map(|s| json!({ "station_id": s.station_id, "num_bikes_available": s.bikes_available }))
        .collect();
    serde_json::to_string(&json!({ "last_updated": taken_at.seconds(), "ttl": 0, "data": { "stations": stations } }))
        .unwrap()
}

/// Parses an ISO 8601 UTC file stem: `2019-06-01T06:00:00Z`, `2019-06-01T060000Z`
/// or `20190601T060000Z`.
pub fn parse_timestamp_stem(stem: &str) -> Option<Instant> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(stem) {
        return Some(Instant(dt.timestamp()));
    }
    let s = stem.strip_suffix('Z')?;
    for fmt in ["%Y-%m-%dT%H%M%S", "%Y%m%dT%H%M%S", "%Y-%m-%dT%H-%M-%S"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Instant(n.and_utc().timestamp()));
        }
    }
    None
}

/// `*.json` files in `dir` whose stem is a timestamp, sorted by time.
/// Other files are reported as warnings.
pub fn list_timestamped_files(dir: &Path, diag: &mut Diagnostics) -> Result<Vec<(Instant, PathBuf)>, IngestError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| IngestError::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ts = path
            .extension()
            .filter(|e| *e == "json")
            .and_then(|_| path.file_stem())
            .and_then(|s| s.to_str())
            .and_then(parse_timestamp_stem);
        match ts {
            Some(t) => out.push((t, path)),
            None => diag.warn("snapshot_bad_filename", format!("{}: not a <timestamp>.json file", path.display())),
        }
    }
    out.sort();
    for w in out.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(IngestError::Validation(format!(
                "{} and {} carry the same timestamp",
                w[0].1.display(),
                w[1].1.display()
            )));
        }
    }
    Ok(out)
}

/// Inter-snapshot interval distribution for one operator, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadenceSummary {
    pub snapshots: usize,
    pub min_interval_s: Option<i64>,
    pub median_interval_s: Option<f64>,
    pub max_interval_s: Option<i64>,
}

pub fn cadence_summary(snapshots: &[Snapshot]) -> CadenceSummary {
    let mut gaps: Vec<i64> = snapshots.windows(2).map(|w| w[1].taken_at.0 - w[0].taken_at.0).collect();
    gaps.sort_unstable();
    let median = if gaps.is_empty() {
        None
    } else if gaps.len() % 2 == 1 {
        Some(gaps[gaps.len() / 2] as f64)
    } else {
        Some((gaps[gaps.len() / 2 - 1] + gaps[gaps.len() / 2]) as f64 / 2.0)
    };
    CadenceSummary {
        snapshots: snapshots.len(),
        min_interval_s: gaps.first().copied(),
        median_interval_s: median,
        max_interval_s: gaps.last().copied(),
    }
}

/// Snapshot series per operator, each sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnapshotArchive {
    pub operators: BTreeMap<String, Vec<Snapshot>>,
}

impl SnapshotArchive {
    pub fn snapshot_count(&self) -> usize {
        self.operators.values().map(Vec::len).sum()
    }
}

/// Loads `<root>/<operator>/<timestamp>.json`. Files are parsed in parallel and merged
/// in time order.
pub fn load_snapshot_tree(root: &Path) -> Result<(SnapshotArchive, Diagnostics), IngestError> {
    let mut diag = Diagnostics::new();
    let mut archive = SnapshotArchive::default();
    let mut operators: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| IngestError::io(root, e))? {
        let path = entry.map_err(|e| IngestError::io(root, e))?.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                operators.push((name.to_string(), path.clone()));
            }
        }
    }
    operators.sort();
    for (operator, dir) in operators {
        let files = list_timestamped_files(&dir, &mut diag)?;
        let parsed: Vec<Result<(Snapshot, Diagnostics), IngestError>> = files
            .par_iter()
            .map(|(ts, path)| {
                let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
                parse_gbfs_snapshot(&bytes, &operator, *ts).map_err(|e| match e {
                    IngestError::Json { offset, message, .. } => {
                        IngestError::Json { context: path.display().to_string(), offset, message }
                    }
                    other => other,
                })
            })
            .collect();
        let mut series = Vec::with_capacity(parsed.len());
        for r in parsed {
            let (snap, d) = r?;
            diag.extend(d);
            series.push(snap);
        }
        archive.operators.insert(operator, series);
    }
    Ok((archive, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: Instant = Instant(1_559_383_200);

    #[test]
    fn single_bike() {
        let doc = br#"{"last_updated":0,"ttl":0,"data":{"bikes":[{"bike_id":"a1","lat":38.9,"lon":-77.0}]}}"#;
        let (snap, diag) = parse_gbfs_snapshot(doc, "lime", T0).unwrap();
        assert_eq!(snap.observations.len(), 1);
        assert_eq!(snap.observations[0].point, GeoPoint { lon: -77.0, lat: 38.9 });
        assert_eq!(snap.observations[0].observed_at, T0);
        assert!(diag.is_empty());
    }

    #[test]
    fn empty_bikes() {
        let (snap, _) = parse_gbfs_snapshot(br#"{"data":{"bikes":[]}}"#, "lime", T0).unwrap();
        assert!(snap.observations.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = br#"{"data":{"bikes":[{"bike_id":"X","lat":1,"lon":1},{"bike_id":"X","lat":2,"lon":2}]}}"#;
        match parse_gbfs_snapshot(doc, "lime", T0) {
            Err(IngestError::DuplicateId { id, .. }) => assert_eq!(id, "X"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn missing_coordinates_counted() {
        let doc = br#"{"data":{"bikes":[{"bike_id":"A","lat":1},{"bike_id":"B","lat":"38.5","lon":"-77.1"}]}}"#;
        let (snap, diag) = parse_gbfs_snapshot(doc, "bird", T0).unwrap();
        assert_eq!(snap.observations.len(), 1);
        assert_eq!(diag.count("gbfs_missing_coordinates"), 1);
    }

    #[test]
    fn malformed_reports_offset() {
        let doc = b"{\"data\":\n {\"bikes\": [ }";
        match parse_gbfs_snapshot(doc, "lime", T0) {
            Err(IngestError::Json { offset, .. }) => assert_eq!(offset, 22),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_gbfs_snapshot(br#"{"bikes":[]}"#, "x", T0), Err(IngestError::Shape { .. })));
    }

    #[test]
    fn truncated_after_newline_points_at_end() {
        let doc = b"{\"data\":{\"bikes\":[{\"bike_id\":\"a\",\n";
        match parse_gbfs_snapshot(doc, "lime", T0) {
            Err(IngestError::Json { offset, .. }) => assert_eq!(offset, doc.len()),
            other => panic!("{other:?}"),
        }
        let doc = b"{\"data\":\n{\"bikes\": x}}";
        match parse_gbfs_snapshot(doc, "lime", T0) {
            Err(IngestError::Json { offset, .. }) => assert_eq!(doc[offset], b'x'),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gbfs_roundtrip() {
        let snap = Snapshot {
            operator: "spin".into(),
            taken_at: T0,
            observations: vec![
                VehicleObservation { vehicle_id: "v1".into(), point: GeoPoint { lon: -77.012345678901, lat: 38.9 }, observed_at: T0 },
                VehicleObservation { vehicle_id: "v2".into(), point: GeoPoint { lon: -76.99, lat: 38.1 / 3.0 + 26.0 }, observed_at: T0 },
            ],
        };
        let (back, _) = parse_gbfs_snapshot(snapshot_to_gbfs(&snap).as_bytes(), "spin", T0).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn station_feeds() {
        let info = br#"{"data":{"stations":[{"station_id":"31000","name":"A","lat":38.9,"lon":-77.0},{"station_id":31001,"lat":38.91,"lon":-77.01}]}}"#;
        let reg = parse_station_information(info).unwrap();
        assert_eq!(reg.len(), 2);
        assert!(reg.get("31001").is_some());
        let status = br#"{"data":{"stations":[{"station_id":"31000","num_bikes_available":7},{"station_id":"99","num_bikes_available":1}]}}"#;
        let (rows, diag) = parse_station_status(status, T0, &reg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bikes_available, 7);
        assert_eq!(diag.count("station_status_unknown_station"), 1);
        let round = parse_station_information(station_information_to_gbfs(&reg).as_bytes()).unwrap();
        assert_eq!(round, reg);
    }

    #[test]
    fn timestamp_stems() {
        let want = Some(Instant(1_559_368_800));
        assert_eq!(parse_timestamp_stem("2019-06-01T06:00:00Z"), want);
        assert_eq!(parse_timestamp_stem("20190601T060000Z"), want);
        assert_eq!(parse_timestamp_stem("2019-06-01T060000Z"), want);
        assert_eq!(parse_timestamp_stem("notes"), None);
    }

    #[test]
    fn cadence() {
        let mk = |t| Snapshot { operator: "x".into(), taken_at: Instant(t), observations: vec![] };
        let s = cadence_summary(&[mk(0), mk(300), mk(600), mk(1500)]);
        assert_eq!(s.min_interval_s, Some(300));
        assert_eq!(s.median_interval_s, Some(300.0));
        assert_eq!(s.max_interval_s, Some(900));
    }
}
