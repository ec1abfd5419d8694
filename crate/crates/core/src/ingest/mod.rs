//! Parsers and validators for every external input: GBFS vehicle and station feeds,
//! recorded bikeshare trips, zone geometries and zone attributes.

mod attributes;
mod gbfs;
mod trips;
mod zones;

use std::path::PathBuf;

use thiserror::Error;

pub use attributes::{
    attach_attributes, parse_demographics, parse_id_list, parse_jobs, AttributeConfig, DemographicsRow, JobsRow,
};
pub use gbfs::{
    cadence_summary, list_timestamped_files, load_snapshot_tree, parse_gbfs_snapshot, parse_station_information,
    parse_station_status, parse_timestamp_stem, snapshot_to_gbfs, station_information_to_gbfs,
    station_status_to_gbfs, CadenceSummary, Snapshot, SnapshotArchive, Station, StationRegistry, StationStatus,
    VehicleObservation,
};
pub use trips::{parse_bikeshare_trips, ColumnAliases, RecordedTrip, TripCsvConfig, TripParseStats};
pub use zones::{load_zones, ZoneLoadConfig};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{context}: malformed JSON at byte {offset}: {message}")]
    Json { context: String, offset: usize, message: String },
    #[error("{context}: unexpected document shape: {message}")]
    Shape { context: String, message: String },
    #[error("{context}: duplicate {what} id {id:?}")]
    DuplicateId { context: String, what: &'static str, id: String },
    #[error("{context}: {message}")]
    Schema { context: String, message: String },
    #[error("{context}: CSV error: {message}")]
    Csv { context: String, message: String },
    #[error("{context}: {skipped} of {total} rows skipped, above the {max_fraction} limit")]
    TooManySkipped { context: String, skipped: usize, total: usize, max_fraction: f64 },
    #[error("invalid zone {id}: {reason}")]
    InvalidZone { id: String, reason: String },
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io { path: path.into(), source }
    }
}

/// Byte offset of a serde_json error given its 1-based line and column.
pub(crate) fn json_error(context: &str, bytes: &[u8], err: serde_json::Error) -> IngestError {
    let (line, col) = (err.line(), err.column());
    let mut offset = 0usize;
    if line > 0 {
        // Start of the requested line; the end of input when the line is past it.
        let mut line_start = if line == 1 { Some(0) } else { None };
        let mut current = 1;
        for (i, b) in bytes.iter().enumerate() {
            if line_start.is_some() {
                break;
            }
            if *b == b'\n' {
                current += 1;
                if current == line {
                    line_start = Some(i + 1);
                }
            }
        }
        offset = line_start.unwrap_or(bytes.len()) + col.saturating_sub(1);
    }
    IngestError::Json { context: context.to_string(), offset: offset.min(bytes.len()), message: err.to_string() }
}

/// Finds the first header matching any alias (case-insensitive, trimmed).
pub(crate) fn find_column(headers: &csv::StringRecord, aliases: &[String]) -> Option<usize> {
    aliases.iter().find_map(|alias| {
        headers.iter().position(|h| h.trim().trim_start_matches('\u{feff}').eq_ignore_ascii_case(alias.trim()))
    })
}
