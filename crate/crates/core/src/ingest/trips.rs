use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{find_column, IngestError, StationRegistry};
use crate::diag::Diagnostics;
use crate::model::{Instant, StudyTimezone};

/// One docked-bikeshare trip as published by the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedTrip {
    pub start_time: Instant,
    pub end_time: Instant,
    pub start_station: String,
    pub end_station: String,
    pub vehicle_id: String,
    pub member_type: Option<String>,
}

/// Accepted header names per field, tried in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAliases {
    pub start_time: Vec<String>,
    pub end_time: Vec<String>,
    pub start_station: Vec<String>,
    pub end_station: Vec<String>,
    pub vehicle_id: Vec<String>,
    pub member_type: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for ColumnAliases {
    /// Capital Bikeshare public schema (2019 and 2020+ layouts).
    fn default() -> Self {
        ColumnAliases {
            start_time: strings(&["Start date", "started_at", "start_time"]),
            end_time: strings(&["End date", "ended_at", "end_time"]),
            start_station: strings(&["Start station number", "start_station_id", "start_station"]),
            end_station: strings(&["End station number", "end_station_id", "end_station"]),
            vehicle_id: strings(&["Bike number", "bike_id", "bike_number", "vehicle_id", "ride_id"]),
            member_type: strings(&["Member type", "member_casual", "member_type"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripCsvConfig {
    pub delimiter: u8,
    pub aliases: ColumnAliases,
    /// Wall-clock zone of the timestamps in the file.
    pub timezone: StudyTimezone,
    /// Hard error when more than this fraction of rows is skipped.
    pub max_skip_fraction: f64,
}

impl Default for TripCsvConfig {
    fn default() -> Self {
        TripCsvConfig {
            delimiter: b',',
            aliases: ColumnAliases::default(),
            timezone: StudyTimezone::UTC,
            max_skip_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripParseStats {
    pub rows: usize,
    pub parsed: usize,
    pub skipped_unparseable: usize,
    pub skipped_invalid_times: usize,
    pub skipped_unknown_station: usize,
}

impl TripParseStats {
    pub fn skipped(&self) -> usize {
        self.skipped_unparseable + self.skipped_invalid_times + self.skipped_unknown_station
    }
}

const TIME_FORMATS: [&str; 5] =
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y %H:%M"];

fn parse_local_time(text: &str, tz: StudyTimezone) -> Option<Instant> {
    let t = text.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(t, f).ok())
        .map(|naive| Instant::from_local(naive, tz))
}

pub fn parse_bikeshare_trips(
    bytes: &[u8],
    registry: &StationRegistry,
    config: &TripCsvConfig,
) -> Result<(Vec<RecordedTrip>, TripParseStats, Diagnostics), IngestError> {
    let context = "bikeshare trips";
    let csv_err = |e: csv::Error| IngestError::Csv { context: context.into(), message: e.to_string() };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(config.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let a = &config.aliases;
    let required = |aliases: &Vec<String>, field: &str| {
        find_column(&headers, aliases).ok_or_else(|| IngestError::Schema {
            context: context.into(),
            message: format!("no column for {field}; tried {aliases:?}"),
        })
    };
    let c_start = required(&a.start_time, "start_time")?;
    let c_end = required(&a.end_time, "end_time")?;
    let c_sst = required(&a.start_station, "start_station")?;
    let c_est = required(&a.end_station, "end_station")?;
    let c_veh = required(&a.vehicle_id, "vehicle_id")?;
    let c_mem = find_column(&headers, &a.member_type);

    let mut stats = TripParseStats::default();
    let mut diag = Diagnostics::new();
    let mut trips = Vec::new();
    for (i, record) in reader.records().enumerate() {
        stats.rows += 1;
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                stats.skipped_unparseable += 1;
                diag.warn("trip_row_unparseable", format!("line {line}: {e}"));
                continue;
            }
        };
        let field = |c: usize| record.get(c).map(str::trim).filter(|s| !s.is_empty());
        let start = field(c_start).and_then(|s| parse_local_time(s, config.timezone));
        let end = field(c_end).and_then(|s| parse_local_time(s, config.timezone));
        let (Some(start), Some(end), Some(sst), Some(est), Some(veh)) =
            (start, end, field(c_sst), field(c_est), field(c_veh))
        else {
            stats.skipped_unparseable += 1;
            diag.warn("trip_row_unparseable", format!("line {line}: missing or unparseable field"));
            continue;
        };
        if start >= end {
            stats.skipped_invalid_times += 1;
            diag.warn("trip_row_invalid_times", format!("line {line}: end time not after start time"));
            continue;
        }
        let unknown: Vec<&str> = [sst, est].into_iter().filter(|s| registry.get(s).is_none()).collect();
        if !unknown.is_empty() {
            stats.skipped_unknown_station += 1;
            diag.warn("trip_row_unknown_station", format!("line {line}: station(s) {unknown:?} not in registry"));
            continue;
        }
        trips.push(RecordedTrip {
            start_time: start,
            end_time: end,
            start_station: sst.to_string(),
            end_station: est.to_string(),
            vehicle_id: veh.to_string(),
            member_type: c_mem.and_then(field).map(str::to_string),
        });
    }
    stats.parsed = trips.len();
    if stats.rows > 0 && stats.skipped() as f64 > config.max_skip_fraction * stats.rows as f64 {
        return Err(IngestError::TooManySkipped {
            context: context.into(),
            skipped: stats.skipped(),
            total: stats.rows,
            max_fraction: config.max_skip_fraction,
        });
    }
    Ok((trips, stats, diag))
}
