//! Seeded synthetic cities: a zone lattice with demographics, scooter fleets and trips
//! rendered into snapshot streams, and a station-based bike system, all written in
//! the ingest formats together with the ground truth used to build them.
//!
//! Trips are laid out so that snapshot inference can recover them exactly: every trip
//! is separated from the vehicle's previous trip by at least two snapshot intervals,
//! its inferred duration stays inside the admissible range, and within each snapshot
//! interval no trip origin sits near a trip destination of the same operator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{self, Linkage, RunConfig};
use crate::geo::{haversine, LocalProjection, ProjectedPoint};
use crate::ingest::{
    snapshot_to_gbfs, station_information_to_gbfs, station_status_to_gbfs, DemographicsRow, JobsRow, RecordedTrip, Snapshot,
    Station, StationRegistry, StationStatus, VehicleObservation,
};
use crate::manifest::{sha256_hex, Manifest};
use crate::model::{GeoPoint, Instant, Mode, Polygon, StudyTimezone, Zone};
use crate::tripinfer::{IdleInterval, Trip};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scenario has no zones")]
    NoZones,
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("vehicle {vehicle}: trip starting {start} overlaps the previous trip")]
    OverlappingTrips { vehicle: String, start: Instant },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub name: String,
    pub linkage: Linkage,
    /// Mean vehicles deployed per EEA zone per day.
    pub eea_intensity: f64,
    pub non_eea_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BikeSpec {
    pub operator: String,
    /// Mean stations per EEA zone.
    pub eea_stations: f64,
    pub non_eea_stations: f64,
    /// Mean bikes docked per station at the reference hour.
    pub eea_bikes: f64,
    pub non_eea_bikes: f64,
    pub trips_per_station_day: f64,
    pub fleet_per_station: u32,
    /// Share of recorded trips with durations outside the admissible range.
    pub bad_duration_fraction: f64,
}

impl Default for BikeSpec {
    fn default() -> Self {
        BikeSpec {
            operator: "cabi".into(),
            eea_stations: 0.6,
            non_eea_stations: 1.2,
            eea_bikes: 4.0,
            non_eea_bikes: 7.0,
            trips_per_station_day: 6.0,
            fleet_per_station: 6,
            bad_duration_fraction: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub cell_m: f64,
    /// South-west corner of the lattice.
    pub origin: GeoPoint,
    pub timezone: String,
    pub start_date: NaiveDate,
    pub days: u32,
    pub cadence_min: u32,
    pub service_start_h: u32,
    pub service_end_h: u32,
    pub reference_h: u32,
    pub population: [u64; 2],
    pub jobs: [u64; 2],
    pub eea_income: [f64; 2],
    pub non_eea_income: [f64; 2],
    /// Probability that a zone has no racial majority.
    pub mixed_share_prob: f64,
    pub scooter_operators: Vec<OperatorSpec>,
    pub trips_per_vehicle_day: f64,
    pub mean_idle_h: f64,
    pub trip_radius_m: f64,
    pub min_displacement_m: f64,
    /// Cap on generated trip speed, kept below the inference speed limit.
    pub max_speed_kmh: f64,
    /// Minimum distance between an origin and a destination in the same snapshot interval.
    pub event_separation_m: f64,
    pub bike: Option<BikeSpec>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: 42,
            rows: 8,
            cols: 8,
            cell_m: 500.0,
            origin: GeoPoint { lon: -77.06, lat: 38.88 },
            timezone: "-04:00".into(),
            start_date: NaiveDate::from_ymd_opt(2019, 6, 3).unwrap(),
            days: 3,
            cadence_min: 10,
            service_start_h: 5,
            service_end_h: 23,
            reference_h: 6,
            population: [400, 2500],
            jobs: [0, 3000],
            eea_income: [22_000.0, 70_000.0],
            non_eea_income: [45_000.0, 210_000.0],
            mixed_share_prob: 0.2,
            scooter_operators: vec![
                OperatorSpec { name: "lime".into(), linkage: Linkage::Linked, eea_intensity: 10.0, non_eea_intensity: 5.0 },
                OperatorSpec { name: "bird".into(), linkage: Linkage::Unlinked, eea_intensity: 6.0, non_eea_intensity: 3.0 },
            ],
            trips_per_vehicle_day: 2.5,
            mean_idle_h: 2.0,
            trip_radius_m: 2000.0,
            min_displacement_m: 300.0,
            max_speed_kmh: 15.0,
            event_separation_m: 200.0,
            bike: Some(BikeSpec::default()),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<StudyTimezone, SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if self.rows == 0 || self.cols == 0 {
            return Err(SynthError::NoZones);
        }
        let tz = StudyTimezone::parse(&self.timezone).map_err(|e| SynthError::Invalid(e.to_string()))?;
        if !(self.cell_m > 0.0) || self.days == 0 || self.cadence_min == 0 {
            return bad("cell_m, days and cadence_min must be positive");
        }
        if !(self.service_start_h < self.reference_h && self.reference_h < self.service_end_h && self.service_end_h <= 24) {
            return bad("need service_start_h < reference_h < service_end_h <= 24");
        }
        if 90 < 2 * self.cadence_min + 5 {
            return bad("cadence too coarse for trips of at least 5 minutes");
        }
        if self.population[0] > self.population[1] || self.jobs[0] > self.jobs[1] {
            return bad("population and jobs ranges must be ordered");
        }
        let rates = [self.trips_per_vehicle_day, self.mean_idle_h, self.trip_radius_m, self.mixed_share_prob];
        if rates.iter().any(|r| !(*r >= 0.0)) || self.scooter_operators.iter().any(|o| !(o.eea_intensity >= 0.0 && o.non_eea_intensity >= 0.0)) {
            return bad("rates and intensities must be non-negative");
        }
        if self.min_displacement_m > self.trip_radius_m {
            return bad("min_displacement_m exceeds trip_radius_m");
        }
        Ok(tz)
    }

    /// Expected EEA / non-EEA ratio of daily scooter availability.
    pub fn expected_availability_ratio(&self) -> f64 {
        let eea: f64 = self.scooter_operators.iter().map(|o| o.eea_intensity).sum();
        let non: f64 = self.scooter_operators.iter().map(|o| o.non_eea_intensity).sum();
        eea / non
    }

    /// EEA status of lattice column `col`: the western half.
    pub fn is_eea_column(&self, col: usize) -> bool {
        col < self.cols / 2
    }
}

/// A vehicle placed at `point` for `[from, until)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub operator: String,
    pub vehicle_id: String,
    pub from: Instant,
    pub until: Instant,
    pub point: GeoPoint,
    pub zone_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scooter_trips: Vec<Trip>,
    pub scooter_idle: Vec<IdleInterval>,
    /// Trips per unlinked operator; each trip yields one origin and one destination event.
    pub unlinked_trip_counts: BTreeMap<String, usize>,
    /// Realized mean daily scooters per zone at the reference hour.
    pub scooter_availability: BTreeMap<String, f64>,
    /// Intensity-implied expected scooters per zone.
    pub expected_scooter_availability: BTreeMap<String, f64>,
    pub expected_availability_ratio: f64,
    /// Realized mean daily docked bikes per zone at the reference hour.
    pub bike_availability: BTreeMap<String, f64>,
    pub bike_trips_recorded: usize,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub timezone: StudyTimezone,
    pub zones: Vec<Zone>,
    pub demographics: Vec<DemographicsRow>,
    pub jobs: Vec<JobsRow>,
    pub eea_ids: Vec<String>,
    pub deployments: Vec<Deployment>,
    pub snapshot_times: Vec<Instant>,
    pub snapshots: BTreeMap<String, Vec<Snapshot>>,
    pub stations: StationRegistry,
    pub station_status: Vec<Vec<StationStatus>>,
    pub bike_trips: Vec<RecordedTrip>,
    pub truth: GroundTruth,
}

struct Lattice {
    proj: LocalProjection,
    cell: f64,
    rows: usize,
    cols: usize,
}

impl Lattice {
    fn zone_id(&self, r: usize, c: usize) -> String {
        format!("11001{:07}", r * self.cols + c)
    }

    fn cell_of(&self, q: ProjectedPoint) -> Option<(usize, usize)> {
        let (c, r) = ((q.x / self.cell).floor(), (q.y / self.cell).floor());
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows).then_some((r as usize, c as usize))
    }

    /// Uniform point strictly inside cell (r, c), one meter from its edges.
    fn sample_in(&self, rng: &mut ChaCha8Rng, r: usize, c: usize) -> GeoPoint {
        let x = c as f64 * self.cell + rng.random_range(1.0..self.cell - 1.0);
        let y = r as f64 * self.cell + rng.random_range(1.0..self.cell - 1.0);
        self.proj.unproject(ProjectedPoint::new(x, y))
    }

    fn inside(&self, q: ProjectedPoint) -> bool {
        let (w, h) = (self.cols as f64 * self.cell, self.rows as f64 * self.cell);
        q.x > 1.0 && q.y > 1.0 && q.x < w - 1.0 && q.y < h - 1.0
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn uniform_u(rng: &mut ChaCha8Rng, range: [u64; 2]) -> u64 {
    rng.random_range(range[0]..=range[1])
}

/// Race shares for a zone; EEA zones lean Black-majority, others White-majority.
fn race_shares(rng: &mut ChaCha8Rng, eea: bool, mixed_prob: f64) -> [(&'static str, f64); 4] {
    let (major, minor) = if eea { ("Black", "White") } else { ("White", "Black") };
    let (a, b) = if rng.random::<f64>() < mixed_prob {
        (rng.random_range(0.30..0.45), rng.random_range(0.20..0.40))
    } else {
        let a = rng.random_range(0.55..0.90);
        (a, (1.0 - a) * rng.random_range(0.4..0.8))
    };
    let rest = 1.0 - a - b;
    let asian = rest * rng.random_range(0.3..0.7);
    let mut out = [(major, a), (minor, b), ("Asian", asian), ("Other", rest - asian)];
    out.sort_by(|x, y| x.0.cmp(y.0));
    out
}

struct DayClock {
    first: Instant,
    snapshots: Vec<Instant>,
    deploy: Instant,
    reference: Instant,
    close: Instant,
}

fn day_clock(spec: &ScenarioSpec, tz: StudyTimezone, date: NaiveDate) -> DayClock {
    let at = |h: u32, m: u32| {
        let t = if h == 24 { date.and_time(NaiveTime::MIN) + Duration::days(1) } else { date.and_hms_opt(h, m, 0).unwrap() };
        Instant::from_local(t, tz)
    };
    let first = at(spec.service_start_h, 0);
    let close = at(spec.service_end_h, 0);
    let step = spec.cadence_min as i64 * 60;
    let snapshots = (0..).map(|k| Instant(first.0 + k * step)).take_while(|t| *t <= close).collect();
    DayClock { first, snapshots, deploy: Instant(first.0 - 1800), reference: at(spec.reference_h, 0), close }
}

/// Origin/destination bookkeeping per snapshot interval for the separation rule.
#[derive(Default)]
struct EventGrid {
    origins: BTreeMap<(u32, i64), Vec<GeoPoint>>,
    destinations: BTreeMap<(u32, i64), Vec<GeoPoint>>,
}

impl EventGrid {
    fn near(list: Option<&Vec<GeoPoint>>, p: GeoPoint, sep: f64) -> bool {
        list.is_some_and(|v| v.iter().any(|q| haversine(*q, p) < sep))
    }

    fn conflicts(&self, o_key: (u32, i64), o: GeoPoint, d_key: (u32, i64), d: GeoPoint, sep: f64) -> bool {
        Self::near(self.destinations.get(&o_key), o, sep) || Self::near(self.origins.get(&d_key), d, sep)
    }

    fn add(&mut self, o_key: (u32, i64), o: GeoPoint, d_key: (u32, i64), d: GeoPoint) {
        self.origins.entry(o_key).or_default().push(o);
        self.destinations.entry(d_key).or_default().push(d);
    }
}

/// Interval index in which a departure at `t` is first seen missing.
fn origin_gap(clock: &DayClock, step: i64, t: Instant) -> i64 {
    (t.0 - clock.first.0).div_euclid(step)
}

/// Interval index in which an arrival at `t` is first seen.
fn destination_gap(clock: &DayClock, step: i64, t: Instant) -> i64 {
    (t.0 - clock.first.0 + step - 1).div_euclid(step) - 1
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    let tz = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lat = Lattice { proj: LocalProjection::new(spec.origin), cell: spec.cell_m, rows: spec.rows, cols: spec.cols };

    // Zones and attributes.
    let mut zones = Vec::new();
    let mut demographics = Vec::new();
    let mut jobs = Vec::new();
    let mut eea_ids = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let id = lat.zone_id(r, c);
            let corner = |dx: usize, dy: usize| {
                lat.proj.unproject(ProjectedPoint::new((c + dx) as f64 * spec.cell_m, (r + dy) as f64 * spec.cell_m))
            };
            let ring = vec![corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1), corner(0, 0)];
            let mut zone = Zone::new(id.clone(), vec![Polygon { exterior: ring, holes: vec![] }]);
            let eea = spec.is_eea_column(c);
            let population = uniform_u(&mut rng, spec.population);
            let income = uniform(&mut rng, if eea { spec.eea_income } else { spec.non_eea_income }).round();
            let shares = race_shares(&mut rng, eea, spec.mixed_share_prob);
            let race_counts: BTreeMap<String, u64> =
                shares.iter().map(|(k, s)| (k.to_string(), (s * population as f64).floor() as u64)).collect();
            let total_jobs = uniform_u(&mut rng, spec.jobs);
            let split = rng.random_range(0..=total_jobs);
            jobs.push(JobsRow { block_id: format!("{id}001"), jobs: split });
            jobs.push(JobsRow { block_id: format!("{id}002"), jobs: total_jobs - split });
            zone.eea = eea;
            zone.population = population;
            zone.jobs = total_jobs;
            zone.median_income = Some(income);
            zone.race_shares = (population > 0)
                .then(|| race_counts.iter().map(|(k, n)| (k.clone(), *n as f64 / population as f64)).collect());
            if eea {
                eea_ids.push(id.clone());
            }
            demographics.push(DemographicsRow { zone_id: id, population, median_income: Some(income), race_counts });
            zones.push(zone);
        }
    }

    let clocks: Vec<DayClock> =
        (0..spec.days).map(|d| day_clock(spec, tz, spec.start_date + Duration::days(d as i64))).collect();
    let step = spec.cadence_min as i64 * 60;
    let snapshot_times: Vec<Instant> = clocks.iter().flat_map(|c| c.snapshots.iter().copied()).collect();

    // Scooter fleets, deployments and trips.
    let mut truth = GroundTruth { expected_availability_ratio: spec.expected_availability_ratio(), ..GroundTruth::default() };
    let mut deployments = Vec::new();
    let mut trips: Vec<Trip> = Vec::new();
    let idle_dist = Exp::new(1.0 / (spec.mean_idle_h.max(1e-6) * 3600.0)).unwrap();
    let max_dur_s = ((90 - 2 * spec.cadence_min).min(45) * 60) as i64;
    let mut realized: BTreeMap<String, f64> = zones.iter().map(|z| (z.id.clone(), 0.0)).collect();
    for op in &spec.scooter_operators {
        let mut grid = EventGrid::default();
        let mut unlinked_trips = 0usize;
        for (d, clock) in clocks.iter().enumerate() {
            let mut next_vehicle = 0usize;
            let until = Instant(clock.close.0 + 1800);
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    let lambda = if spec.is_eea_column(c) { op.eea_intensity } else { op.non_eea_intensity };
                    let n = poisson(&mut rng, lambda);
                    let zone_id = lat.zone_id(r, c);
                    *realized.get_mut(&zone_id).unwrap() += n as f64;
                    for _ in 0..n {
                        let vehicle_id = format!("{}-{:05}", op.name, next_vehicle);
                        next_vehicle += 1;
                        let point = lat.sample_in(&mut rng, r, c);
                        deployments.push(Deployment {
                            operator: op.name.clone(),
                            vehicle_id: vehicle_id.clone(),
                            from: clock.deploy,
                            until,
                            point,
                            zone_id: zone_id.clone(),
                        });
                        // Trips for this vehicle-day, all after the reference snapshot.
                        let k = poisson(&mut rng, spec.trips_per_vehicle_day);
                        let mut here = point;
                        let mut free_at = Instant(clock.reference.0 + step);
                        for _ in 0..k {
                            let gap = 2 * step + idle_dist.sample(&mut rng) as i64;
                            let start = Instant(free_at.0 + gap);
                            let dur = rng.random_range(300..=max_dur_s);
                            let end = Instant(start.0 + dur);
                            if end.0 > clock.close.0 - step {
                                break;
                            }
                            let reach = spec.trip_radius_m.min(spec.max_speed_kmh / 3.6 * dur as f64);
                            let mut dest = None;
                            for _ in 0..20 {
                                let dist = rng.random_range(spec.min_displacement_m..=reach.max(spec.min_displacement_m));
                                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                                let p0 = lat.proj.project(here);
                                let q = ProjectedPoint::new(p0.x + dist * theta.cos(), p0.y + dist * theta.sin());
                                if lat.inside(q) && lat.cell_of(q).is_some() {
                                    dest = Some(lat.proj.unproject(q));
                                    break;
                                }
                            }
                            // A rejected draw leaves the vehicle parked; time still advances.
                            free_at = start;
                            let Some(dest) = dest else { continue };
                            let o_key = (d as u32, origin_gap(clock, step, start));
                            let d_key = (d as u32, destination_gap(clock, step, end));
                            if grid.conflicts(o_key, here, d_key, dest, spec.event_separation_m) {
                                continue;
                            }
                            grid.add(o_key, here, d_key, dest);
                            trips.push(Trip {
                                mode: Mode::Scooter,
                                operator: op.name.clone(),
                                vehicle_id: Some(vehicle_id.clone()),
                                start_time: start,
                                end_time: end,
                                start_point: here,
                                end_point: dest,
                                start_station: None,
                                end_station: None,
                                duration_min: dur as f64 / 60.0,
                                distance_m: Some(haversine(here, dest)),
                                linked: op.linkage == Linkage::Linked,
                            });
                            if op.linkage == Linkage::Unlinked {
                                unlinked_trips += 1;
                            }
                            here = dest;
                            free_at = end;
                        }
                    }
                }
            }
        }
        if op.linkage == Linkage::Unlinked {
            truth.unlinked_trip_counts.insert(op.name.clone(), unlinked_trips);
        }
    }
    let ndays = spec.days as f64;
    truth.scooter_availability = realized.into_iter().map(|(k, v)| (k, v / ndays)).collect();
    for z in &zones {
        let col = z.id[5..].parse::<usize>().unwrap() % spec.cols;
        let lambda: f64 = spec
            .scooter_operators
            .iter()
            .map(|o| if spec.is_eea_column(col) { o.eea_intensity } else { o.non_eea_intensity })
            .sum();
        truth.expected_scooter_availability.insert(z.id.clone(), lambda);
    }
    trips.sort_by(|a, b| (&a.operator, &a.vehicle_id, a.start_time).cmp(&(&b.operator, &b.vehicle_id, b.start_time)));
    truth.scooter_idle = ground_truth_idle(&trips);

    let mut snapshots = BTreeMap::new();
    for op in &spec.scooter_operators {
        let deps: Vec<Deployment> = deployments.iter().filter(|d| d.operator == op.name).cloned().collect();
        let op_trips: Vec<Trip> = trips.iter().filter(|t| t.operator == op.name).cloned().collect();
        snapshots.insert(op.name.clone(), render_snapshots(&op.name, &op_trips, &deps, &snapshot_times, op.linkage)?);
    }
    trips.sort_by(|a, b| a.start_time.cmp(&b.start_time).then_with(|| a.vehicle_id.cmp(&b.vehicle_id)));
    truth.scooter_trips = trips;

    // Bikeshare.
    let mut stations = StationRegistry::default();
    let mut station_status = Vec::new();
    let mut bike_trips = Vec::new();
    if let Some(bs) = &spec.bike {
        let mut station_zone = BTreeMap::new();
        let mut next = 0;
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let n = poisson(&mut rng, if spec.is_eea_column(c) { bs.eea_stations } else { bs.non_eea_stations });
                for _ in 0..n {
                    let id = format!("{}", 31000 + next);
                    next += 1;
                    let point = lat.sample_in(&mut rng, r, c);
                    stations.stations.insert(id.clone(), Station { station_id: id.clone(), point, name: Some(format!("Station {id}")) });
                    station_zone.insert(id, (lat.zone_id(r, c), spec.is_eea_column(c)));
                }
            }
        }
        let mut bike_avail: BTreeMap<String, f64> = zones.iter().map(|z| (z.id.clone(), 0.0)).collect();
        for clock in &clocks {
            let capture: Vec<StationStatus> = station_zone
                .iter()
                .map(|(id, (zid, eea))| {
                    let bikes = poisson(&mut rng, if *eea { bs.eea_bikes } else { bs.non_eea_bikes }) as u32;
                    *bike_avail.get_mut(zid).unwrap() += bikes as f64;
                    StationStatus { station_id: id.clone(), taken_at: clock.reference, bikes_available: bikes }
                })
                .collect();
            station_status.push(capture);
        }
        truth.bike_availability = bike_avail.into_iter().map(|(k, v)| (k, v / ndays)).collect();
        bike_trips = generate_bike_trips(&mut rng, bs, &stations, &clocks, spec.trip_radius_m);
        truth.bike_trips_recorded = bike_trips.len();
    }

    Ok(Scenario {
        spec: spec.clone(),
        timezone: tz,
        zones,
        demographics,
        jobs,
        eea_ids,
        deployments,
        snapshot_times,
        snapshots,
        stations,
        station_status,
        bike_trips,
        truth,
    })
}

fn generate_bike_trips(
    rng: &mut ChaCha8Rng,
    bs: &BikeSpec,
    stations: &StationRegistry,
    clocks: &[DayClock],
    radius_m: f64,
) -> Vec<RecordedTrip> {
    let ids: Vec<&Station> = stations.stations.values().collect();
    if ids.is_empty() {
        return Vec::new();
    }
    // (available from, bike id) queues per station.
    let mut docks: BTreeMap<&str, Vec<(Instant, String)>> = BTreeMap::new();
    let mut bike_no = 0;
    for s in &ids {
        let q = docks.entry(s.station_id.as_str()).or_default();
        for _ in 0..bs.fleet_per_station {
            q.push((Instant(i64::MIN / 2), format!("W{:05}", bike_no)));
            bike_no += 1;
        }
    }
    let neighbours: Vec<Vec<usize>> = ids
        .iter()
        .map(|a| (0..ids.len()).filter(|j| haversine(a.point, ids[*j].point) <= radius_m && ids[*j].station_id != a.station_id).collect())
        .collect();
    let mut out = Vec::new();
    for clock in clocks {
        let mut requests: Vec<(Instant, usize)> = Vec::new();
        for i in 0..ids.len() {
            for _ in 0..poisson(rng, bs.trips_per_station_day) {
                let t = rng.random_range(clock.reference.0..clock.close.0 - 3 * 3600);
                requests.push((Instant(t), i));
            }
        }
        requests.sort();
        for (t, i) in requests {
            let from = ids[i].station_id.as_str();
            let queue = docks.get_mut(from).unwrap();
            let Some(pos) = queue.iter().enumerate().filter(|(_, b)| b.0 <= t).min_by(|a, b| a.1 .1.cmp(&b.1 .1)).map(|(p, _)| p)
            else {
                continue;
            };
            let (_, bike) = queue.remove(pos);
            let to = if neighbours[i].is_empty() { i } else { neighbours[i][rng.random_range(0..neighbours[i].len())] };
            let dur_s: i64 = if rng.random::<f64>() < bs.bad_duration_fraction {
                if rng.random::<bool>() { rng.random_range(30..170) } else { rng.random_range(91 * 60..180 * 60) }
            } else {
                rng.random_range(4 * 60..=60 * 60)
            };
            let end = Instant(t.0 + dur_s);
            docks.get_mut(ids[to].station_id.as_str()).unwrap().push((end, bike.clone()));
            out.push(RecordedTrip {
                start_time: t,
                end_time: end,
                start_station: from.to_string(),
                end_station: ids[to].station_id.clone(),
                vehicle_id: bike,
                member_type: Some(if rng.random::<f64>() < 0.7 { "Member" } else { "Casual" }.into()),
            });
        }
    }
    out
}

/// Gaps between consecutive trips of each vehicle, computed from the true trip list.
fn ground_truth_idle(trips: &[Trip]) -> Vec<IdleInterval> {
    let mut by_vehicle: BTreeMap<(&str, &str), Vec<&Trip>> = BTreeMap::new();
    for t in trips {
        by_vehicle.entry((&t.operator, t.vehicle_id.as_deref().unwrap_or(""))).or_default().push(t);
    }
    let mut out = Vec::new();
    for ((op, v), mut ts) in by_vehicle {
        ts.sort_by_key(|t| t.start_time);
        for pair in ts.windows(2) {
            out.push(IdleInterval {
                mode: pair[0].mode,
                operator: op.to_string(),
                vehicle_id: v.to_string(),
                start: pair[0].end_time,
                end: pair[1].start_time,
                location: pair[0].end_point,
                station_id: None,
                duration_h: (pair[1].start_time.0 - pair[0].end_time.0) as f64 / 3600.0,
            });
        }
    }
    out
}

/// Renders vehicle positions at each snapshot time. A vehicle is visible while deployed
/// except strictly inside one of its trips; after a trip it sits at the trip's end point.
/// Unlinked operators get a fresh id for every observation.
pub fn render_snapshots(
    operator: &str,
    trips: &[Trip],
    deployments: &[Deployment],
    times: &[Instant],
    linkage: Linkage,
) -> Result<Vec<Snapshot>, SynthError> {
    let mut by_vehicle: BTreeMap<&str, Vec<&Trip>> = BTreeMap::new();
    for t in trips {
        by_vehicle.entry(t.vehicle_id.as_deref().unwrap_or("")).or_default().push(t);
    }
    for (v, ts) in by_vehicle.iter_mut() {
        ts.sort_by_key(|t| t.start_time);
        for w in ts.windows(2) {
            if w[1].start_time < w[0].end_time {
                return Err(SynthError::OverlappingTrips { vehicle: v.to_string(), start: w[1].start_time });
            }
        }
    }
    let empty = Vec::new();
    let mut snapshots: Vec<Snapshot> =
        times.iter().map(|t| Snapshot { operator: operator.to_string(), taken_at: *t, observations: Vec::new() }).collect();
    let mut deps: Vec<&Deployment> = deployments.iter().collect();
    deps.sort_by(|a, b| (&a.vehicle_id, a.from).cmp(&(&b.vehicle_id, b.from)));
    for dep in deps {
        let ts = by_vehicle.get(dep.vehicle_id.as_str()).unwrap_or(&empty);
        let lo = times.partition_point(|t| *t < dep.from);
        let hi = times.partition_point(|t| *t < dep.until);
        let mut here = dep.point;
        let mut k = ts.partition_point(|t| t.start_time < dep.from);
        for (s, &t) in times.iter().enumerate().take(hi).skip(lo) {
            while k < ts.len() && ts[k].end_time <= t {
                here = ts[k].end_point;
                k += 1;
            }
            let on_trip = k < ts.len() && ts[k].start_time < t && t < ts[k].end_time && ts[k].start_time < dep.until;
            if !on_trip {
                snapshots[s].observations.push(VehicleObservation { vehicle_id: dep.vehicle_id.clone(), point: here, observed_at: t });
            }
        }
    }
    let mut counter = 0u64;
    for snap in &mut snapshots {
        snap.observations.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id));
        if linkage == Linkage::Unlinked {
            for o in &mut snap.observations {
                o.vehicle_id = format!("{operator}{counter:08x}");
                counter += 1;
            }
        }
    }
    Ok(snapshots)
}

fn zones_geojson(zones: &[Zone]) -> String {
    let features: Vec<Value> = zones
        .iter()
        .map(|z| {
            let ring: Vec<[f64; 2]> = z.geometry[0].exterior.iter().map(|p| [p.lon, p.lat]).collect();
            json!({
                "type": "Feature",
                "properties": { "GEOID": z.id },
                "geometry": { "type": "Polygon", "coordinates": [ring] },
            })
        })
        .collect();
    serde_json::to_string(&json!({ "type": "FeatureCollection", "features": features })).unwrap()
}

fn demographics_csv(rows: &[DemographicsRow]) -> String {
    let labels: Vec<&String> = rows.first().map(|r| r.race_counts.keys().collect()).unwrap_or_default();
    let mut s = String::from("GEOID,population,median_income");
    for l in &labels {
        s.push_str(&format!(",race_{l}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{}", r.zone_id, r.population, r.median_income.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())));
        for l in &labels {
            s.push_str(&format!(",{}", r.race_counts[*l]));
        }
        s.push('\n');
    }
    s
}

fn bike_trips_csv(trips: &[RecordedTrip], tz: StudyTimezone) -> String {
    let fmt = |t: Instant| t.to_local(tz).format("%Y-%m-%d %H:%M:%S").to_string();
    let mut s = String::from("Duration,Start date,End date,Start station number,Start station,End station number,End station,Bike number,Member type\n");
    for t in trips {
        s.push_str(&format!(
            "{},{},{},{},Station {},{},Station {},{},{}\n",
            t.end_time.0 - t.start_time.0,
            fmt(t.start_time),
            fmt(t.end_time),
            t.start_station,
            t.start_station,
            t.end_station,
            t.end_station,
            t.vehicle_id,
            t.member_type.as_deref().unwrap_or("")
        ));
    }
    s
}

/// Pipeline configuration pointing at the files written by [`Scenario::write`].
pub fn scenario_run_config(scenario: &Scenario) -> RunConfig {
    let spec = &scenario.spec;
    let has_bike = spec.bike.is_some();
    RunConfig {
        inputs: config::Inputs {
            zones: "zones.geojson".into(),
            demographics: "demographics.csv".into(),
            jobs: "jobs.csv".into(),
            eea: "eea.csv".into(),
            snapshots: (!spec.scooter_operators.is_empty()).then(|| "snapshots".into()),
            operators: spec.scooter_operators.iter().map(|o| (o.name.clone(), o.linkage)).collect(),
            stations: has_bike.then(|| "bikeshare/station_information.json".into()),
            station_status: has_bike.then(|| "bikeshare/station_status".into()),
            bike_trips: has_bike.then(|| "bikeshare/trips.csv".into()),
            bike_operator: spec.bike.as_ref().map(|b| b.operator.clone()).unwrap_or_else(|| "bikeshare".into()),
        },
        study: config::Study {
            timezone: spec.timezone.clone(),
            start_date: Some(spec.start_date),
            end_date: Some(spec.start_date + Duration::days(spec.days as i64 - 1)),
            reference_time: format!("{:02}:00", spec.reference_h),
            reference_tolerance_min: 30,
        },
        classification: Default::default(),
        kde: Default::default(),
        filters: Default::default(),
        outliers: Default::default(),
        usage: Default::default(),
        stats: Default::default(),
        output: config::Output { dir: "out".into() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub seed: u64,
    pub spec_sha256: String,
    #[serde(flatten)]
    pub manifest: Manifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), SynthError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

impl Scenario {
    /// Writes every artifact under `dir` and returns the manifest, which is also written.
    pub fn write(&self, dir: &Path) -> Result<SynthManifest, SynthError> {
        write(&dir.join("zones.geojson"), zones_geojson(&self.zones))?;
        write(&dir.join("demographics.csv"), demographics_csv(&self.demographics))?;
        let mut jobs = String::from("block_id,jobs\n");
        for j in &self.jobs {
            jobs.push_str(&format!("{},{}\n", j.block_id, j.jobs));
        }
        write(&dir.join("jobs.csv"), jobs)?;
        let mut eea = String::from("GEOID\n");
        for id in &self.eea_ids {
            eea.push_str(id);
            eea.push('\n');
        }
        write(&dir.join("eea.csv"), eea)?;
        for (op, snaps) in &self.snapshots {
            for s in snaps {
                write(&dir.join("snapshots").join(op).join(format!("{}.json", s.taken_at.to_iso())), snapshot_to_gbfs(s))?;
            }
        }
        if self.spec.bike.is_some() {
            let b = dir.join("bikeshare");
            write(&b.join("station_information.json"), station_information_to_gbfs(&self.stations))?;
            for capture in &self.station_status {
                if let Some(first) = capture.first() {
                    write(&b.join("station_status").join(format!("{}.json", first.taken_at.to_iso())), station_status_to_gbfs(first.taken_at, capture))?;
                }
            }
            write(&b.join("trips.csv"), bike_trips_csv(&self.bike_trips, self.timezone))?;
        }
        write(&dir.join("ground_truth.json"), serde_json::to_string_pretty(&self.truth).unwrap())?;
        let spec_toml = toml::to_string(&self.spec).expect("spec serializes");
        write(&dir.join("scenario.toml"), &spec_toml)?;
        write(&dir.join("run.toml"), scenario_run_config(self).to_toml())?;
        let manifest = Manifest::of_tree(dir, &[MANIFEST_FILE]).map_err(io_err(dir))?;
        let m = SynthManifest {
            generator: format!("mmequity-synth {}", env!("CARGO_PKG_VERSION")),
            seed: self.spec.seed,
            spec_sha256: sha256_hex(spec_toml.as_bytes()),
            manifest,
        };
        write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m).unwrap())?;
        Ok(m)
    }
}
