//! End-to-end orchestration: ingest check, trip inference, zone metrics and report tables.
//!
//! Each stage writes into `<out>/<stage>/` together with a `manifest.json` that records the
//! checksums of its outputs and a fingerprint of the raw inputs. A stage refuses to run when
//! its upstream stage is missing, was edited after being written, or was computed from
//! different inputs.

pub mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant as Clock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, Linkage, RunConfig, OUT_DIR_ENV};
use crate::diag::Diagnostics;
use crate::geo::{LocalProjection, SearchRadius, ZoneIndex};
use crate::ingest::{
    attach_attributes, cadence_summary, list_timestamped_files, load_snapshot_tree, load_zones, parse_bikeshare_trips,
    parse_demographics, parse_id_list, parse_jobs, parse_station_information, parse_station_status, AttributeConfig,
    IngestError, RecordedTrip, Snapshot, SnapshotArchive, StationRegistry, StationStatus, TripCsvConfig, TripParseStats,
    ZoneLoadConfig,
};
use crate::manifest::{sha256_hex, FileEntry, Manifest};
use crate::metrics::{
    assemble_zone_metrics, bike_reference_days, daily_availability, idle_aggregate, kde_accessibility,
    scooter_reference_days, tables as metric_tables, usage_counts, MetricsError, ModeInputs, ZoneMetrics,
};
use crate::model::{Instant, Mode, Zone};
use crate::tripinfer::{
    idle_intervals_by_vehicle, infer_linked_trips, infer_unlinked_events, recorded_to_trips, tables as trip_tables,
    EventKind, RejectReason, Trip, TripEndEvent, TripInferError,
};

pub const STAGE_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    IngestCheck,
    InferTrips,
    Metrics,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::IngestCheck, Stage::InferTrips, Stage::Metrics, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::IngestCheck => "ingest-check",
            Stage::InferTrips => "infer-trips",
            Stage::Metrics => "metrics",
            Stage::Report => "report",
        }
    }

    /// Output subdirectory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::IngestCheck => "ingest",
            Stage::InferTrips => "trips",
            Stage::Metrics => "metrics",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::IngestCheck => None,
            Stage::InferTrips => Some(Stage::IngestCheck),
            Stage::Metrics => Some(Stage::InferTrips),
            Stage::Report => Some(Stage::Metrics),
        }
    }

    pub fn parse(text: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == text || s.dir() == text)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeSelect {
    Scooter,
    Bike,
    #[default]
    Both,
}

impl ModeSelect {
    pub fn parse(text: &str) -> Option<ModeSelect> {
        match text {
            "scooter" => Some(ModeSelect::Scooter),
            "bike" => Some(ModeSelect::Bike),
            "both" => Some(ModeSelect::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{stage}: refusing to run: {detail}")]
    Stale { stage: Stage, detail: String },
    #[error("{stage}: {source}")]
    Ingest {
        stage: Stage,
        #[source]
        source: IngestError,
    },
    #[error("{stage}: {message}")]
    Data { stage: Stage, message: String },
    #[error("{stage}: {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 validation, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Validation(_) | PipelineError::Stale { .. } => 2,
            PipelineError::Ingest { source: IngestError::Io { .. }, .. } => 4,
            PipelineError::Ingest { .. } | PipelineError::Data { .. } => 3,
            PipelineError::Io { .. } => 4,
        }
    }

    fn data(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError::Data { stage, message: message.to_string() }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { stage, path: path.to_path_buf(), source }
}

fn ingest(stage: Stage) -> impl Fn(IngestError) -> PipelineError {
    move |source| PipelineError::Ingest { stage, source }
}

fn read(stage: Stage, path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io(stage, path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Manifest written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub modes: Vec<Mode>,
    /// Digest of the raw input fingerprint.
    pub inputs_sha256: String,
    /// Digest of the upstream stage's manifest file.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub upstream_sha256: Option<String>,
    pub outputs: Manifest,
}

/// Collects a stage's files in memory and writes them in one go.
#[derive(Debug, Default)]
struct StageFiles {
    files: BTreeMap<String, Vec<u8>>,
}

impl StageFiles {
    fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.insert(name.to_string(), contents.into());
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// Outcome of a full run. Timings stay out of the written report so output trees are
/// byte-identical across runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub modes: Vec<Mode>,
    pub out_dir: PathBuf,
    pub report: Value,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

/// Zones with attributes joined, plus their spatial index.
pub struct ZoneSet {
    pub zones: Vec<Zone>,
    pub index: ZoneIndex,
}

pub struct Pipeline {
    config: RunConfig,
    /// The configuration as written, echoed into the report.
    echo: RunConfig,
    modes: Vec<Mode>,
    out: PathBuf,
}

impl Pipeline {
    /// Loads and validates a config file. `out` overrides both the file and the environment.
    pub fn from_config_file(path: &Path, out: Option<PathBuf>, select: ModeSelect) -> Result<Pipeline> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let echo = RunConfig::from_toml(&text, path)?;
        let mut config = echo.clone();
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            config.output.dir = PathBuf::from(dir);
        }
        if let Some(dir) = out {
            config.output.dir = dir;
        }
        Pipeline::new(config, echo, select)
    }

    /// `config` must have resolved paths; `echo` is what the report shows.
    pub fn new(config: RunConfig, echo: RunConfig, select: ModeSelect) -> Result<Pipeline> {
        config.validate()?;
        let scooter = config.inputs.snapshots.is_some();
        let bike = config.inputs.stations.is_some();
        let modes = match select {
            ModeSelect::Both => Mode::ALL.into_iter().filter(|m| if *m == Mode::Scooter { scooter } else { bike }).collect(),
            ModeSelect::Scooter if scooter => vec![Mode::Scooter],
            ModeSelect::Bike if bike => vec![Mode::Bike],
            ModeSelect::Scooter => return Err(PipelineError::Validation("--mode scooter needs inputs.snapshots".into())),
            ModeSelect::Bike => return Err(PipelineError::Validation("--mode bike needs inputs.stations".into())),
        };
        let out = config.output.dir.clone();
        Ok(Pipeline { config, echo, modes, out })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn has(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }

    /// Runs every stage into a staging directory and moves it into place on success.
    /// On failure nothing is left behind.
    pub fn run(&self) -> Result<RunReport> {
        self.run_through(Stage::Report)
    }

    pub fn run_through(&self, last: Stage) -> Result<RunReport> {
        let staging = staging_path(&self.out);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io(Stage::IngestCheck, &staging))?;
        }
        let mut timings = Vec::new();
        let result = (|| {
            for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
                let started = Clock::now();
                self.run_stage_in(stage, &staging)?;
                let seconds = started.elapsed().as_secs_f64();
                log::info!("{stage}: {seconds:.2}s");
                timings.push(StageTiming { stage, seconds });
            }
            Ok(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        if self.out.exists() {
            fs::remove_dir_all(&self.out).map_err(io(last, &self.out))?;
        }
        if let Some(parent) = self.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io(last, parent))?;
        }
        fs::rename(&staging, &self.out).map_err(io(last, &self.out))?;
        let report = match fs::read(self.out.join("report/run_report.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or(Value::Null),
            Err(_) => Value::Null,
        };
        Ok(RunReport { modes: self.modes.clone(), out_dir: self.out.clone(), report, timings })
    }

    /// Runs one stage against the configured output directory. The stage directory is
    /// replaced only when the stage succeeds.
    pub fn run_stage(&self, stage: Stage) -> Result<StageManifest> {
        self.run_stage_in(stage, &self.out)
    }

    fn run_stage_in(&self, stage: Stage, root: &Path) -> Result<StageManifest> {
        let fingerprint = self.input_fingerprint(stage)?;
        let inputs_sha256 = sha256_hex(to_json(&fingerprint).as_bytes());
        let upstream_sha256 = match stage.upstream() {
            Some(up) => Some(self.check_upstream(stage, up, root, &inputs_sha256)?),
            None => None,
        };
        let files = match stage {
            Stage::IngestCheck => self.ingest_check()?,
            Stage::InferTrips => self.infer_trips()?,
            Stage::Metrics => self.metrics(root)?,
            Stage::Report => self.report(root)?,
        };
        write_stage(stage, root, files, |outputs| StageManifest {
            stage,
            modes: self.modes.clone(),
            inputs_sha256,
            upstream_sha256,
            outputs,
        })
    }

    fn check_upstream(&self, stage: Stage, up: Stage, root: &Path, inputs_sha256: &str) -> Result<String> {
        let dir = root.join(up.dir());
        let path = dir.join(STAGE_MANIFEST);
        let stale = |detail: String| PipelineError::Stale { stage, detail };
        let bytes = fs::read(&path).map_err(|_| stale(format!("no {} output at {}; run `{}` first", up, dir.display(), up)))?;
        let m: StageManifest =
            serde_json::from_slice(&bytes).map_err(|e| stale(format!("unreadable {}: {e}", path.display())))?;
        let changed = m.outputs.stale(&dir);
        if !changed.is_empty() {
            return Err(stale(format!("{} outputs changed since they were written: {}; rerun `{}`", up, changed.join(", "), up)));
        }
        if m.inputs_sha256 != inputs_sha256 {
            return Err(stale(format!("inputs changed since `{up}` ran; rerun it")));
        }
        if let Some(missing) = self.modes.iter().find(|mode| !m.modes.contains(mode)) {
            return Err(stale(format!("`{up}` ran without mode {missing}; rerun it with that mode")));
        }
        Ok(sha256_hex(&bytes))
    }

    /// Checksums of every raw input the selected modes read, keyed by role and relative path.
    pub fn input_fingerprint(&self, stage: Stage) -> Result<Manifest> {
        let i = &self.config.inputs;
        let mut files = Vec::new();
        let mut file = |label: &str, path: &Path| -> Result<()> {
            let bytes = read(stage, path)?;
            files.push(FileEntry { path: label.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
            Ok(())
        };
        file("zones", &i.zones)?;
        file("demographics", &i.demographics)?;
        file("jobs", &i.jobs)?;
        file("eea", &i.eea)?;
        if self.has(Mode::Bike) {
            if let Some(p) = &i.stations {
                file("stations", p)?;
            }
            if let Some(p) = &i.bike_trips {
                file("bike_trips", p)?;
            }
        }
        let mut tree = |label: &str, root: &Path| -> Result<()> {
            let m = Manifest::of_tree(root, &[]).map_err(io(stage, root))?;
            files.extend(m.files.into_iter().map(|f| FileEntry { path: format!("{label}/{}", f.path), ..f }));
            Ok(())
        };
        if self.has(Mode::Scooter) {
            if let Some(p) = &i.snapshots {
                tree("snapshots", p)?;
            }
        }
        if self.has(Mode::Bike) {
            if let Some(p) = &i.station_status {
                tree("station_status", p)?;
            }
        }
        Ok(Manifest { files })
    }

    fn in_study(&self, t: Instant) -> bool {
        let Ok(tz) = self.config.timezone() else { return true };
        let d = t.to_local(tz).date_naive();
        self.config.study.start_date.is_none_or(|s| d >= s) && self.config.study.end_date.is_none_or(|e| d <= e)
    }

    pub fn load_zones(&self, stage: Stage) -> Result<(ZoneSet, Diagnostics)> {
        let i = &self.config.inputs;
        let c = &self.config.classification;
        let zones = load_zones(&read(stage, &i.zones)?, &ZoneLoadConfig { id_property: c.zone_id_property.clone() })
            .map_err(ingest(stage))?;
        if zones.is_empty() {
            return Err(PipelineError::data(stage, format!("{}: no zones", i.zones.display())));
        }
        let attr = AttributeConfig { block_prefix_len: c.block_prefix_len, race_prefix: c.race_prefix.clone(), ..AttributeConfig::default() };
        let demographics = parse_demographics(&read(stage, &i.demographics)?, &attr).map_err(ingest(stage))?;
        let jobs = parse_jobs(&read(stage, &i.jobs)?, &attr).map_err(ingest(stage))?;
        let eea = parse_id_list(&read(stage, &i.eea)?, attr.delimiter).map_err(ingest(stage))?;
        let (zones, diag) = attach_attributes(zones, &demographics, &jobs, &eea, &attr).map_err(ingest(stage))?;
        let index = ZoneIndex::build(&zones, LocalProjection::for_zones(&zones));
        Ok((ZoneSet { zones, index }, diag))
    }

    /// Snapshots of the study period, per operator.
    fn load_snapshots(&self, stage: Stage) -> Result<(SnapshotArchive, Diagnostics)> {
        let root = self.config.inputs.snapshots.as_ref().expect("scooter mode has a snapshot root");
        let (mut archive, diag) = load_snapshot_tree(root).map_err(ingest(stage))?;
        for series in archive.operators.values_mut() {
            series.retain(|s| self.in_study(s.taken_at));
        }
        if archive.operators.is_empty() {
            return Err(PipelineError::data(stage, format!("{}: no operator directories", root.display())));
        }
        Ok((archive, diag))
    }

    fn load_stations(&self, stage: Stage) -> Result<StationRegistry> {
        let p = self.config.inputs.stations.as_ref().expect("bike mode has stations");
        parse_station_information(&read(stage, p)?).map_err(ingest(stage))
    }

    fn load_station_status(&self, stage: Stage, registry: &StationRegistry) -> Result<(Vec<Vec<StationStatus>>, Diagnostics)> {
        let dir = self.config.inputs.station_status.as_ref().expect("bike mode has station status");
        let mut diag = Diagnostics::new();
        let mut out = Vec::new();
        for (t, path) in list_timestamped_files(dir, &mut diag).map_err(ingest(stage))? {
            if !self.in_study(t) {
                continue;
            }
            let bytes = read(stage, &path)?;
            let (rows, d) = parse_station_status(&bytes, t, registry)
                .map_err(|e| match e {
                    IngestError::Json { offset, message, .. } => {
                        IngestError::Json { context: path.display().to_string(), offset, message }
                    }
                    other => other,
                })
                .map_err(ingest(stage))?;
            diag.extend(d);
            out.push(rows);
        }
        Ok((out, diag))
    }

    fn load_bike_trips(&self, stage: Stage, registry: &StationRegistry) -> Result<Option<(Vec<RecordedTrip>, TripParseStats, Diagnostics)>> {
        let Some(p) = &self.config.inputs.bike_trips else { return Ok(None) };
        let cfg = TripCsvConfig {
            timezone: self.config.timezone()?,
            max_skip_fraction: self.config.filters.max_skip_fraction,
            ..TripCsvConfig::default()
        };
        let (mut trips, stats, diag) = parse_bikeshare_trips(&read(stage, p)?, registry, &cfg).map_err(ingest(stage))?;
        trips.retain(|t| self.in_study(t.start_time));
        Ok(Some((trips, stats, diag)))
    }

    fn ingest_check(&self) -> Result<StageFiles> {
        let stage = Stage::IngestCheck;
        let (zs, mut diag) = self.load_zones(stage)?;
        let mut summary = BTreeMap::new();
        summary.insert("zones", json!(zs.zones.len()));
        summary.insert("zones_eea", json!(zs.zones.iter().filter(|z| z.eea).count()));
        summary.insert("population", json!(zs.zones.iter().map(|z| z.population).sum::<u64>()));
        summary.insert("jobs", json!(zs.zones.iter().map(|z| z.jobs).sum::<u64>()));
        if self.has(Mode::Scooter) {
            let (archive, d) = self.load_snapshots(stage)?;
            diag.extend(d);
            let ops: BTreeMap<&str, Value> = archive
                .operators
                .iter()
                .map(|(op, series)| {
                    let observations: usize = series.iter().map(|s| s.observations.len()).sum();
                    (
                        op.as_str(),
                        json!({
                            "linkage": self.config.linkage(op),
                            "snapshots": series.len(),
                            "observations": observations,
                            "cadence": cadence_summary(series),
                        }),
                    )
                })
                .collect();
            summary.insert("scooter_operators", json!(ops));
        }
        if self.has(Mode::Bike) {
            let registry = self.load_stations(stage)?;
            let (captures, d) = self.load_station_status(stage, &registry)?;
            diag.extend(d);
            let mut bike = json!({ "stations": registry.len(), "status_captures": captures.len() });
            if let Some((trips, stats, d)) = self.load_bike_trips(stage, &registry)? {
                diag.extend(d);
                bike["trips_in_study"] = json!(trips.len());
                bike["trip_rows"] = json!(stats);
            }
            summary.insert("bike", bike);
        }
        summary.insert("warnings", json!(diag.counts()));
        let mut files = StageFiles::default();
        files.add("summary.json", to_json(&summary));
        files.add("warnings.json", to_json(&diag.warnings));
        Ok(files)
    }

    fn infer_trips(&self) -> Result<StageFiles> {
        let stage = Stage::InferTrips;
        let rules = self.config.trip_rules();
        let mut files = StageFiles::default();
        let mut summary = BTreeMap::new();
        let mut diag = Diagnostics::new();
        let tri = |e: TripInferError| PipelineError::data(stage, e);
        if self.has(Mode::Scooter) {
            let (archive, d) = self.load_snapshots(stage)?;
            diag.extend(d);
            let mut trips: Vec<Trip> = Vec::new();
            let mut events: Vec<TripEndEvent> = Vec::new();
            let mut ops = BTreeMap::new();
            for (op, series) in &archive.operators {
                let linkage = self.config.linkage(op);
                let s = match linkage {
                    Linkage::Linked => {
                        let r = infer_linked_trips(series, Mode::Scooter, &rules).map_err(tri)?;
                        let s = json!({
                            "linkage": linkage,
                            "snapshots": series.len(),
                            "candidates": r.candidates(),
                            "kept": r.kept.len(),
                            "rejected": rejected_counts(r.rejected.iter().map(|x| x.1)),
                            "disappearances": r.disappearances,
                            "appearances": r.appearances,
                            "unmatched_disappearances": r.unmatched_disappearances,
                            "unmatched_appearances": r.unmatched_appearances,
                        });
                        trips.extend(r.kept);
                        s
                    }
                    Linkage::Unlinked => {
                        let gap = (self.config.filters.max_snapshot_gap_min * 60.0).round() as i64;
                        let r = infer_unlinked_events(series, Mode::Scooter, self.config.filters.jitter_m, Some(gap))
                            .map_err(tri)?;
                        let s = json!({
                            "linkage": linkage,
                            "snapshots": series.len(),
                            "origins": r.count(EventKind::Origin),
                            "destinations": r.count(EventKind::Destination),
                            "suppressed_pairs": r.suppressed_pairs,
                            "skipped_gaps": r.skipped_gaps,
                        });
                        events.extend(r.events);
                        s
                    }
                };
                ops.insert(op.clone(), s);
            }
            let idle = idle_intervals_by_vehicle(&trips);
            if idle.anomalies > 0 {
                diag.warn("idle_overlap", format!("{} overlapping scooter trip pairs skipped", idle.anomalies));
            }
            summary.insert(
                "scooter",
                json!({ "operators": ops, "trips": trips.len(), "events": events.len(), "idle_intervals": idle.intervals.len(), "idle_anomalies": idle.anomalies }),
            );
            files.add("scooter_trips.csv", trip_tables::write_trips(&trips));
            files.add("scooter_events.csv", trip_tables::write_events(&events));
            files.add("scooter_idle.csv", trip_tables::write_idle(&idle.intervals));
        }
        if self.has(Mode::Bike) {
            let registry = self.load_stations(stage)?;
            let mut bike = json!({ "operator": self.config.inputs.bike_operator });
            let (trips, idle) = match self.load_bike_trips(stage, &registry)? {
                Some((recorded, _, d)) => {
                    diag.extend(d);
                    let conv = recorded_to_trips(&recorded, &registry, &self.config.inputs.bike_operator, &rules);
                    let idle = idle_intervals_by_vehicle(&conv.kept);
                    bike["recorded"] = json!(recorded.len());
                    bike["candidates"] = json!(conv.kept.len() + conv.rejected.len());
                    bike["kept"] = json!(conv.kept.len());
                    bike["rejected"] = rejected_counts(conv.rejected.iter().map(|x| x.1));
                    bike["unresolved_stations"] = json!(conv.unresolved_stations);
                    bike["idle_intervals"] = json!(idle.intervals.len());
                    bike["idle_anomalies"] = json!(idle.anomalies);
                    (conv.kept, idle.intervals)
                }
                None => {
                    diag.warn("bike_trips_missing", "no bikeshare trip file; bike usage and idle time are empty");
                    (Vec::new(), Vec::new())
                }
            };
            summary.insert("bike", bike);
            files.add("bike_trips.csv", trip_tables::write_trips(&trips));
            files.add("bike_idle.csv", trip_tables::write_idle(&idle));
        }
        summary.insert("warnings", json!(diag.counts()));
        files.add("summary.json", to_json(&summary));
        Ok(files)
    }

    fn read_stage_text(&self, stage: Stage, root: &Path, from: Stage, name: &str) -> Result<String> {
        let p = root.join(from.dir()).join(name);
        String::from_utf8(read(stage, &p)?).map_err(|_| PipelineError::data(stage, format!("{}: not UTF-8", p.display())))
    }

    fn metrics(&self, root: &Path) -> Result<StageFiles> {
        let stage = Stage::Metrics;
        let (zs, mut diag) = self.load_zones(stage)?;
        let window = self.config.reference_window()?;
        let policy = self.config.outlier_policy();
        let table = |name: &str| self.read_stage_text(stage, root, Stage::InferTrips, name);
        let tri = |e: TripInferError| PipelineError::data(stage, e);
        let mut files = StageFiles::default();
        let mut summary = BTreeMap::new();
        for mode in self.modes.clone() {
            let (days, radius) = match mode {
                Mode::Scooter => {
                    let (archive, d) = self.load_snapshots(stage)?;
                    diag.extend(d);
                    let ops: BTreeMap<String, Vec<Snapshot>> = archive.operators;
                    let (days, d) = scooter_reference_days(&ops, &window);
                    diag.extend(d);
                    (days, self.config.kde.scooter_radius_m)
                }
                Mode::Bike => {
                    let registry = self.load_stations(stage)?;
                    let (captures, d) = self.load_station_status(stage, &registry)?;
                    diag.extend(d);
                    let (days, d) = bike_reference_days(&captures, &registry, &window);
                    diag.extend(d);
                    (days, self.config.kde.bike_radius_m)
                }
            };
            let metrics_err = |e: MetricsError| PipelineError::data(stage, e);
            let availability = daily_availability(&days, &zs.index, mode).map_err(metrics_err)?;
            let radius = SearchRadius::new(radius).map_err(|e| PipelineError::Validation(e.to_string()))?;
            let (raster, kde) = kde_accessibility(&days, &zs.index, radius, self.config.kde.cell_size_m).map_err(metrics_err)?;
            let trips = trip_tables::read_trips(&table(&format!("{mode}_trips.csv"))?).map_err(tri)?;
            let events = match mode {
                Mode::Scooter => trip_tables::read_events(&table("scooter_events.csv")?).map_err(tri)?,
                Mode::Bike => Vec::new(),
            };
            let idle = trip_tables::read_idle(&table(&format!("{mode}_idle.csv"))?).map_err(tri)?;
            let usage = usage_counts(&trips, &events, &zs.index, self.config.usage.weighting);
            if usage.dropped_endpoints > 0 {
                diag.warn("usage_endpoint_outside_zones", format!("{mode}: {} trip ends outside every zone", usage.dropped_endpoints));
            }
            let (idle_stats, idle_dropped) = idle_aggregate(&idle, &zs.index);
            if idle_dropped > 0 {
                diag.warn("idle_outside_zones", format!("{mode}: {idle_dropped} idle intervals outside every zone"));
            }
            if availability.dropped_per_day > 0.0 {
                diag.warn("availability_outside_zones", format!("{mode}: {} vehicles per day outside every zone", availability.dropped_per_day));
            }
            let inputs = ModeInputs { availability: availability.per_zone.clone(), kde, usage: usage.per_zone.clone(), idle: idle_stats };
            let rows: Vec<ZoneMetrics> = assemble_zone_metrics(&zs.zones, mode, &inputs, &policy);
            summary.insert(
                mode.as_str(),
                json!({
                    "reference_days": days.iter().map(|d| d.date.to_string()).collect::<Vec<_>>(),
                    "availability_dropped_per_day": availability.dropped_per_day,
                    "usage_total_weight": usage.total_weight,
                    "usage_dropped_weight": usage.dropped_weight,
                    "usage_dropped_endpoints": usage.dropped_endpoints,
                    "idle_intervals": idle.len(),
                    "idle_dropped": idle_dropped,
                    "kde": { "radius_m": radius.meters(), "cell_size_m": self.config.kde.cell_size_m, "nrows": raster.nrows(), "ncols": raster.ncols(), "total_mass": raster.total_mass() },
                }),
            );
            files.add(&format!("zone_metrics_{mode}.csv"), metric_tables::write_zone_metrics(&rows));
            files.add(&format!("zone_metrics_{mode}.json"), to_json(&rows));
            files.add(&format!("kde_{mode}.asc"), raster.to_esri_ascii());
        }
        summary.insert("warnings", json!(diag.counts()));
        files.add("summary.json", to_json(&summary));
        Ok(files)
    }

    fn report(&self, root: &Path) -> Result<StageFiles> {
        let stage = Stage::Report;
        let (zs, _) = self.load_zones(stage)?;
        let mut metrics = BTreeMap::new();
        for mode in &self.modes {
            let text = self.read_stage_text(stage, root, Stage::Metrics, &format!("zone_metrics_{mode}.csv"))?;
            let rows = metric_tables::read_zone_metrics(&text).map_err(|e| PipelineError::data(stage, e))?;
            metrics.insert(*mode, rows);
        }
        let mut upstream = BTreeMap::new();
        for s in [Stage::IngestCheck, Stage::InferTrips, Stage::Metrics] {
            let text = self.read_stage_text(stage, root, s, "summary.json")?;
            upstream.insert(s.dir(), serde_json::from_str::<Value>(&text).map_err(|e| PipelineError::data(stage, e))?);
        }
        let ctx = report::ReportContext {
            zones: &zs.zones,
            thresholds: self.config.thresholds()?,
            policy: self.config.outlier_policy(),
            alpha: self.config.stats.alpha,
            tail: self.config.stats.tail,
            bonferroni: self.config.stats.bonferroni,
        };
        let built = report::build_tables(&ctx, metrics.get(&Mode::Scooter).map(Vec::as_slice), metrics.get(&Mode::Bike).map(Vec::as_slice));
        let mut files = StageFiles::default();
        let mut outputs = Vec::new();
        for t in &built.tables {
            files.add(&format!("{}.csv", t.name), t.csv.clone());
            files.add(&format!("{}.json", t.name), to_json(&t.json));
            outputs.push(format!("{}/{}.csv", stage.dir(), t.name));
            outputs.push(format!("{}/{}.json", stage.dir(), t.name));
        }
        for mode in &self.modes {
            outputs.push(format!("{}/zone_metrics_{mode}.csv", Stage::Metrics.dir()));
            outputs.push(format!("{}/kde_{mode}.asc", Stage::Metrics.dir()));
        }
        let mut notes = built.notes.clone();
        if !self.has(Mode::Bike) {
            notes.push("bikeshare tables omitted: no bikeshare inputs in this run".into());
        }
        if !self.has(Mode::Scooter) {
            notes.push("e-scooter tables omitted: no scooter inputs in this run".into());
        }
        let run_report = json!({
            "modes": self.modes,
            "config": self.echo,
            "outlier_policy": self.config.outlier_policy(),
            "counts": upstream,
            "report_warnings": built.diag.counts(),
            "outputs": outputs,
            "notes": notes,
        });
        files.add("run_report.json", to_json(&run_report));
        Ok(files)
    }
}

fn rejected_counts(reasons: impl Iterator<Item = RejectReason>) -> Value {
    let mut m: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reasons {
        *m.entry(r.as_str()).or_default() += 1;
    }
    json!(m)
}

fn staging_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "out".into());
    name.push(".staging");
    out.with_file_name(name)
}

/// Writes a stage into `<root>/<dir>.partial`, adds its manifest and swaps it into place.
fn write_stage(
    stage: Stage,
    root: &Path,
    files: StageFiles,
    manifest: impl FnOnce(Manifest) -> StageManifest,
) -> Result<StageManifest> {
    let dir = root.join(stage.dir());
    let tmp = root.join(format!("{}.partial", stage.dir()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(stage, &tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(stage, &tmp))?;
    let result = (|| {
        for (name, bytes) in &files.files {
            let p = tmp.join(name);
            fs::write(&p, bytes).map_err(io(stage, &p))?;
        }
        let outputs = Manifest::of_tree(&tmp, &[STAGE_MANIFEST]).map_err(io(stage, &tmp))?;
        let m = manifest(outputs);
        let p = tmp.join(STAGE_MANIFEST);
        fs::write(&p, to_json(&m)).map_err(io(stage, &p))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io(stage, &dir))?;
        }
        fs::rename(&tmp, &dir).map_err(io(stage, &dir))?;
        Ok(m)
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}
