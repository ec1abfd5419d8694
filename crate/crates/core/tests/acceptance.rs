//! Acceptance suite. Runs without the default harness so every criterion prints a
//! PASS/FAIL line even when others fail.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant as Clock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmequity::config::Linkage;
use mmequity::geo::{
    kde_raster_weighted, zonal_mean, Extent, KdeRaster, LocalProjection, ProjectedPoint, ProjectedPolygon, ProjectedZone,
    SearchRadius, ZoneIndex, BIKE_RADIUS_M, SCOOTER_RADIUS_M,
};
use mmequity::metrics::{idle_aggregate, population_weighted, weighted_mean, GroupKind, Indicator, OutlierPolicy, ZoneMetrics};
use mmequity::model::{classify_income, GeoPoint, IncomeClass, IncomeThresholds, Instant, Mode, Polygon, Zone};
use mmequity::pipeline::{ModeSelect, Pipeline};
use mmequity::stats::{t_cdf, welch_t};
use mmequity::synth::{generate_scenario, render_snapshots, Deployment, OperatorSpec, ScenarioSpec};
use mmequity::tripinfer::{
    filter_trip, idle_intervals_by_vehicle, infer_linked_trips, infer_unlinked_events, EventKind, FilterOutcome,
    RejectReason, Trip, TripFilterRules,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond { Ok(()) } else { Err(what.into()) }
}

// ---------------------------------------------------------------------------
// 1. Parameter fidelity

fn parameters() -> Outcome {
    let th = IncomeThresholds::default();
    let cases = [
        (49_221.99, IncomeClass::Low),
        (49_222.0, IncomeClass::Low),
        (49_222.01, IncomeClass::Middle),
        (130_614.99, IncomeClass::Middle),
        (130_615.0, IncomeClass::High),
    ];
    for (v, want) in cases {
        let got = classify_income(Some(v), &th);
        check(got == want, format!("income {v} classified {got:?}, want {want:?}"))?;
    }

    let rules = TripFilterRules::default();
    let start = GeoPoint { lon: -77.0, lat: 38.9 };
    let end = GeoPoint { lon: -77.0, lat: 38.9 + 500.0 / 111_195.0 };
    let trip = |minutes: f64| Trip {
        mode: Mode::Scooter,
        operator: "op".into(),
        vehicle_id: Some("v".into()),
        start_time: Instant(0),
        end_time: Instant((minutes * 60.0) as i64),
        start_point: start,
        end_point: end,
        start_station: None,
        end_station: None,
        duration_min: minutes,
        distance_m: None,
        linked: true,
    };
    for (m, want) in [
        (3.0, FilterOutcome::Keep),
        (90.0, FilterOutcome::Keep),
        (2.9, FilterOutcome::Reject(RejectReason::TooShort)),
        (91.0, FilterOutcome::Reject(RejectReason::TooLong)),
    ] {
        let got = filter_trip(&trip(m), &rules);
        check(got == want, format!("{m} min trip: {got:?}, want {want:?}"))?;
    }

    check(SCOOTER_RADIUS_M == 201.168, "scooter radius")?;
    check(BIKE_RADIUS_M == 268.224, "bike radius")?;
    check(SearchRadius::for_mode(Mode::Scooter).meters() == 201.168, "scooter default radius")?;
    check(SearchRadius::for_mode(Mode::Bike).meters() == 268.224, "bike default radius")?;
    check(SCOOTER_RADIUS_M == 1609.344 / 8.0 && BIKE_RADIUS_M == 1609.344 / 6.0, "radii vs mile fractions")?;
    Ok("thresholds 49222/130615, duration [3, 90], radii 201.168/268.224".into())
}

// ---------------------------------------------------------------------------
// 2. KDE vs brute force

fn brute_kde(points: &[ProjectedPoint], r: f64, e: &Extent) -> Vec<f64> {
    let mut out = vec![0.0; e.nrows * e.ncols];
    for row in 0..e.nrows {
        for col in 0..e.ncols {
            let cx = e.origin.x + (col as f64 + 0.5) * e.cell_size_m;
            let cy = e.origin.y + (row as f64 + 0.5) * e.cell_size_m;
            let mut s = 0.0;
            for p in points {
                let d = ((cx - p.x).powi(2) + (cy - p.y).powi(2)).sqrt();
                if d < r {
                    let u = 1.0 - (d / r).powi(2);
                    s += 3.0 / (PI * r * r) * u * u;
                }
            }
            out[row * e.ncols + col] = s * 1e6;
        }
    }
    out
}

fn kde() -> Outcome {
    let started = Clock::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = SCOOTER_RADIUS_M;
    let radius = SearchRadius::new(r).unwrap();

    let extent = Extent::new(ProjectedPoint::new(-300.0, -300.0), 50.0, 36, 44).unwrap();
    let points: Vec<ProjectedPoint> =
        (0..100).map(|_| ProjectedPoint::new(rng.random_range(0.0..1600.0), rng.random_range(0.0..1200.0))).collect();
    let weighted: Vec<_> = points.iter().map(|p| (*p, 1.0)).collect();
    let fast = kde_raster_weighted(&weighted, radius, extent).unwrap();
    let slow = brute_kde(&points, r, &extent);
    let mut worst = 0.0f64;
    for (a, b) in fast.values.iter().zip(&slow) {
        let rel = if *b == 0.0 { a.abs() } else { (a - b).abs() / b.abs() };
        worst = worst.max(rel);
    }
    check(worst <= 1e-9, format!("max relative error {worst:e}"))?;

    // Mass at cell = r/8 with every kernel fully inside the extent.
    let cs = r / 8.0;
    let n = 40;
    let pts: Vec<_> =
        (0..n).map(|_| (ProjectedPoint::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)), 1.0)).collect();
    let pad = 2.0 * r;
    let cells = ((1000.0 + 2.0 * pad) / cs).ceil() as usize;
    let ext = Extent::new(ProjectedPoint::new(-pad, -pad), cs, cells, cells).unwrap();
    let mass = kde_raster_weighted(&pts, radius, ext).unwrap().total_mass();
    let mass_err = (mass - n as f64).abs() / n as f64;
    check(mass_err <= 0.01, format!("mass {mass} for {n} points"))?;

    let secs = started.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("max rel err {worst:.1e}, mass err {:.3}%, {secs:.2}s", mass_err * 100.0))
}

// ---------------------------------------------------------------------------
// 3. Zonal mean vs enumerated cell centers

fn inside_even_odd(x: f64, y: f64, ring: &[ProjectedPoint]) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn zonal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let extent = Extent::new(ProjectedPoint::new(0.0, 0.0), 10.0, 10, 10).unwrap();
    let mut cells_checked = 0;
    for k in 0..20 {
        let values: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..100.0)).collect();
        let raster = KdeRaster { extent, values };
        // Star-shaped polygon with jagged radii around a random center.
        let cx = rng.random_range(35.0..65.0);
        let cy = rng.random_range(35.0..65.0);
        let nv = rng.random_range(5..12);
        let mut angles: Vec<f64> = (0..nv).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let mut ring: Vec<ProjectedPoint> = angles
            .iter()
            .map(|a| {
                let rad = rng.random_range(12.0..45.0);
                ProjectedPoint::new(cx + rad * a.cos(), cy + rad * a.sin())
            })
            .collect();
        ring.push(ring[0]);
        let zone = ProjectedZone::new(format!("z{k}"), vec![ProjectedPolygon::new(ring.clone(), vec![])]);

        let mut sum = 0.0;
        let mut n = 0;
        for row in 0..10 {
            for col in 0..10 {
                let x = (col as f64 + 0.5) * 10.0;
                let y = (row as f64 + 0.5) * 10.0;
                if inside_even_odd(x, y, &ring) {
                    sum += raster.values[row * 10 + col];
                    n += 1;
                }
            }
        }
        check(n > 0, format!("polygon {k} covers no cell center"))?;
        cells_checked += n;
        let want = sum / n as f64;
        let got = zonal_mean(&raster, &zone);
        check(got == want, format!("polygon {k}: {got} vs {want}"))?;
    }
    Ok(format!("20 polygons, {cells_checked} interior cells, exact"))
}

// ---------------------------------------------------------------------------
// 4. Welch

/// Tanh-sinh quadrature on [a, b].
fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let h = 1.0 / 256.0;
    let half = (b - a) / 2.0;
    let mid = (a + b) / 2.0;
    let mut s = 0.0;
    let mut k: i64 = -(6.0 / h) as i64;
    while (k as f64) * h <= 6.0 {
        let t = k as f64 * h;
        let u = PI / 2.0 * t.sinh();
        let x = u.tanh();
        let w = PI / 2.0 * t.cosh() / u.cosh().powi(2);
        let xx = mid + half * x;
        if xx > a && xx < b {
            s += w * f(xx);
        }
        k += 1;
    }
    s * h * half
}

/// Student-t CDF via x = sqrt(df)·tan(θ), which turns the density into cos^(df-1).
fn t_cdf_oracle(t: f64, df: f64) -> f64 {
    let g = |th: f64| th.cos().powf(df - 1.0);
    let total = tanh_sinh(g, 0.0, PI / 2.0);
    let part = tanh_sinh(g, 0.0, (t.abs() / df.sqrt()).atan());
    let upper = 0.5 * part / total;
    if t >= 0.0 { 0.5 + upper } else { 0.5 - upper }
}

fn welch() -> Outcome {
    let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], 0.05).unwrap();
    check((r.t + 1.0).abs() <= 1e-12, format!("t = {}", r.t))?;
    check((r.df - 8.0).abs() <= 1e-12, format!("df = {}", r.df))?;
    let p_oracle = 2.0 * (1.0 - t_cdf_oracle(1.0, 8.0));
    check((r.p - p_oracle).abs() <= 1e-4, format!("p {} vs oracle {p_oracle}", r.p))?;
    check((p_oracle - 0.3466).abs() < 1e-4, format!("oracle p {p_oracle}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_cdf = 0.0f64;
    for _ in 0..200 {
        let df = rng.random_range(1.5..80.0);
        let t = rng.random_range(-6.0..6.0);
        worst_cdf = worst_cdf.max((t_cdf(t, df).unwrap() - t_cdf_oracle(t, df)).abs());
    }
    check(worst_cdf <= 1e-4, format!("t cdf error {worst_cdf:e}"))?;

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs()));
    for i in 0..1000 {
        let na = rng.random_range(2..30);
        let nb = rng.random_range(2..30);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(-50.0..50.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(-40.0..60.0)).collect();
        let ab = welch_t(&a, &b, 0.05).unwrap();
        let ba = welch_t(&b, &a, 0.05).unwrap();
        check(ab.t == -ba.t && ab.p == ba.p && ab.df == ba.df, format!("pair {i}: antisymmetry"))?;
        let c = rng.random_range(-1e3..1e3);
        let k = rng.random_range(0.01..100.0);
        let shifted = welch_t(&a.iter().map(|x| x + c).collect::<Vec<_>>(), &b.iter().map(|x| x + c).collect::<Vec<_>>(), 0.05).unwrap();
        check(close(ab.t, shifted.t) && close(ab.df, shifted.df) && close(ab.p, shifted.p), format!("pair {i}: location"))?;
        let scaled = welch_t(&a.iter().map(|x| x * k).collect::<Vec<_>>(), &b.iter().map(|x| x * k).collect::<Vec<_>>(), 0.05).unwrap();
        check(close(ab.t, scaled.t) && close(ab.df, scaled.df) && close(ab.p, scaled.p), format!("pair {i}: scale"))?;
        let lo = (na.min(nb) - 1) as f64;
        let hi = (na + nb - 2) as f64;
        check(ab.df >= lo - 1e-9 && ab.df <= hi + 1e-9, format!("pair {i}: df {} outside [{lo}, {hi}]", ab.df))?;
    }
    Ok(format!("t={}, df={}, p={:.6} (oracle {p_oracle:.6}), cdf err {worst_cdf:.1e}, 1000 pairs", r.t, r.df, r.p))
}

// ---------------------------------------------------------------------------
// 5. Trip inference round trip

const BASE_LON: f64 = -77.2;
const BASE_LAT: f64 = 38.8;
const M_PER_DEG_LAT: f64 = 111_194.93;

fn offset(home: GeoPoint, dx: f64, dy: f64) -> GeoPoint {
    let m_per_deg_lon = M_PER_DEG_LAT * home.lat.to_radians().cos();
    GeoPoint { lon: home.lon + dx / m_per_deg_lon, lat: home.lat + dy / M_PER_DEG_LAT }
}

struct History {
    trips: Vec<Trip>,
    deployments: Vec<Deployment>,
    times: Vec<Instant>,
}

/// 50 vehicles, 10 trips each, every vehicle on its own 5 km lattice cell so no two
/// vehicles' events fall within the jitter radius.
fn histories(seed: u64, cadence_s: i64) -> History {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = 1_559_556_000; // 2019-06-03T10:00:00Z
    let horizon = 30 * 3600;
    let mut trips = Vec::new();
    let mut deployments = Vec::new();
    for v in 0..50 {
        let home = offset(GeoPoint { lon: BASE_LON, lat: BASE_LAT }, (v % 10) as f64 * 5000.0, (v / 10) as f64 * 5000.0);
        let id = format!("veh-{v:03}");
        deployments.push(Deployment {
            operator: "op".into(),
            vehicle_id: id.clone(),
            from: Instant(t0),
            until: Instant(t0 + horizon + cadence_s),
            point: home,
            zone_id: String::new(),
        });
        let (mut x, mut y) = (0.0f64, 0.0f64);
        let mut t = t0 + cadence_s + rng.random_range(0..cadence_s);
        for _ in 0..10 {
            let dur = rng.random_range(5 * 60..=45 * 60);
            // Speed at most 15 km/h, displacement at least 300 m, staying within 1.2 km of home.
            let max_d = (dur as f64 / 3600.0 * 15_000.0).min(1200.0);
            let (nx, ny) = loop {
                let d = rng.random_range(300.0..=max_d.max(300.0));
                let a = rng.random_range(0.0..2.0 * PI);
                let (nx, ny) = (x + d * a.cos(), y + d * a.sin());
                if nx.hypot(ny) <= 1200.0 {
                    break (nx, ny);
                }
            };
            let from = offset(home, x, y);
            let to = offset(home, nx, ny);
            trips.push(Trip {
                mode: Mode::Scooter,
                operator: "op".into(),
                vehicle_id: Some(id.clone()),
                start_time: Instant(t),
                end_time: Instant(t + dur),
                start_point: from,
                end_point: to,
                start_station: None,
                end_station: None,
                duration_min: dur as f64 / 60.0,
                distance_m: None,
                linked: true,
            });
            x = nx;
            y = ny;
            t += dur + 2 * cadence_s + rng.random_range(0..3600);
        }
        assert!(t < t0 + horizon);
    }
    let times = (0..=horizon / cadence_s).map(|k| Instant(t0 + k * cadence_s)).collect();
    History { trips, deployments, times }
}

fn roundtrip() -> Outcome {
    let cadence = 300;
    let h = histories(5, cadence);
    check(h.trips.len() == 500, format!("{} trips", h.trips.len()))?;
    let snaps = render_snapshots("op", &h.trips, &h.deployments, &h.times, Linkage::Linked).map_err(|e| e.to_string())?;
    let inf = infer_linked_trips(&snaps, Mode::Scooter, &TripFilterRules::default()).map_err(|e| e.to_string())?;

    let mut unmatched: Vec<&Trip> = h.trips.iter().collect();
    let mut matched = 0;
    let mut worst_s = 0i64;
    for t in &inf.kept {
        let hit = unmatched.iter().position(|g| {
            g.vehicle_id == t.vehicle_id
                && g.start_point == t.start_point
                && g.end_point == t.end_point
                && (g.start_time.0 - t.start_time.0).abs() <= cadence
                && (g.end_time.0 - t.end_time.0).abs() <= cadence
        });
        if let Some(i) = hit {
            let g = unmatched.swap_remove(i);
            worst_s = worst_s.max((g.start_time.0 - t.start_time.0).abs()).max((g.end_time.0 - t.end_time.0).abs());
            matched += 1;
        }
    }
    let precision = matched as f64 / inf.kept.len() as f64;
    let recall = matched as f64 / h.trips.len() as f64;
    check(precision == 1.0 && recall == 1.0, format!("precision {precision}, recall {recall}"))?;
    check(worst_s <= cadence, format!("time error {worst_s}s"))?;

    let snaps = render_snapshots("op", &h.trips, &h.deployments, &h.times, Linkage::Unlinked).map_err(|e| e.to_string())?;
    let ev = infer_unlinked_events(&snaps, Mode::Scooter, 100.0, None).map_err(|e| e.to_string())?;
    let (o, d) = (ev.count(EventKind::Origin), ev.count(EventKind::Destination));
    check(o == 500 && d == 500, format!("unlinked origins {o}, destinations {d}"))?;
    Ok(format!("500 trips, precision 1, recall 1, max time error {}s, unlinked {o}/{d}", worst_s))
}

// ---------------------------------------------------------------------------
// 6. Idle time

fn rect_zone(id: &str, lon0: f64, lat0: f64, w: f64, h: f64) -> Zone {
    let p = |lon, lat| GeoPoint { lon, lat };
    let ring = vec![p(lon0, lat0), p(lon0 + w, lat0), p(lon0 + w, lat0 + h), p(lon0, lat0 + h), p(lon0, lat0)];
    Zone::new(id, vec![Polygon { exterior: ring, holes: vec![] }])
}

fn idle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // 3 x 3 grid of 0.01 degree zones.
    let mut zones = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            zones.push(rect_zone(&format!("z{r}{c}"), BASE_LON + c as f64 * 0.01, BASE_LAT + r as f64 * 0.01, 0.01, 0.01));
        }
    }
    let index = ZoneIndex::build(&zones, LocalProjection::for_zones(&zones));
    // Points well inside a zone, or outside the grid entirely.
    let spot = |rng: &mut ChaCha8Rng| -> (GeoPoint, Option<String>) {
        if rng.random_bool(0.05) {
            return (GeoPoint { lon: BASE_LON - 0.5, lat: BASE_LAT }, None);
        }
        let (r, c) = (rng.random_range(0..3), rng.random_range(0..3));
        let p = GeoPoint {
            lon: BASE_LON + c as f64 * 0.01 + rng.random_range(0.001..0.009),
            lat: BASE_LAT + r as f64 * 0.01 + rng.random_range(0.001..0.009),
        };
        (p, Some(format!("z{r}{c}")))
    };

    let mut trips = Vec::new();
    let mut truth: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut outside = 0;
    for v in 0..40 {
        let mut t = 1_559_556_000 + rng.random_range(0..3600);
        let n = rng.random_range(1..12);
        let mut parked: Option<(Option<String>, i64)> = None;
        for _ in 0..n {
            let (start, _) = spot(&mut rng);
            let (end, zone) = spot(&mut rng);
            let dur = rng.random_range(180..3600);
            if let Some((z, since)) = parked.take() {
                let h = (t - since) as f64 / 3600.0;
                match z {
                    Some(z) => truth.entry(z).or_default().push(h),
                    None => outside += 1,
                }
            }
            trips.push(Trip {
                mode: Mode::Scooter,
                operator: "op".into(),
                vehicle_id: Some(format!("v{v}")),
                start_time: Instant(t),
                end_time: Instant(t + dur),
                start_point: start,
                end_point: end,
                start_station: None,
                end_station: None,
                duration_min: dur as f64 / 60.0,
                distance_m: None,
                linked: true,
            });
            parked = Some((zone, t + dur));
            t += dur + rng.random_range(60..20 * 3600);
        }
    }
    // Input order must not matter.
    trips.reverse();
    let res = idle_intervals_by_vehicle(&trips);
    check(res.anomalies == 0, format!("{} anomalies", res.anomalies))?;
    let (stats, dropped) = idle_aggregate(&res.intervals, &index);
    check(dropped == outside, format!("dropped {dropped}, want {outside}"))?;
    check(stats.len() == truth.len(), format!("{} zones, want {}", stats.len(), truth.len()))?;
    let mut worst = 0.0f64;
    for (zone, xs) in &truth {
        let s = stats.get(zone).ok_or(format!("zone {zone} missing"))?;
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let mut v = xs.clone();
        v.sort_by(f64::total_cmp);
        let median = if v.len() % 2 == 1 { v[v.len() / 2] } else { (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0 };
        check(s.intervals == xs.len(), format!("zone {zone}: {} intervals, want {}", s.intervals, xs.len()))?;
        worst = worst.max((s.mean_h - mean).abs()).max((s.median_h - median).abs());
    }
    check(worst <= 1e-9, format!("max idle error {worst:e}"))?;
    Ok(format!("{} intervals over {} zones, max error {worst:.1e}", res.intervals.len(), truth.len()))
}

// ---------------------------------------------------------------------------
// 7. Planted disparity

struct RunResult {
    ratio: f64,
    significant: bool,
    p: f64,
}

fn run_scenario(spec: &ScenarioSpec, dir: &Path) -> Result<RunResult, String> {
    let scenario = generate_scenario(spec).map_err(|e| e.to_string())?;
    scenario.write(&dir.join("in")).map_err(|e| e.to_string())?;
    let out = dir.join("out");
    let p = Pipeline::from_config_file(&dir.join("in/run.toml"), Some(out.clone()), ModeSelect::Scooter).map_err(|e| e.to_string())?;
    p.run().map_err(|e| e.to_string())?;

    let eea: BTreeMap<&str, bool> = scenario.zones.iter().map(|z| (z.id.as_str(), z.eea)).collect();
    let text = std::fs::read_to_string(out.join("metrics/zone_metrics_scooter.json")).map_err(|e| e.to_string())?;
    let metrics: Vec<ZoneMetrics> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for m in &metrics {
        if eea[m.zone_id.as_str()] { a.push(m.avail_daily_mean) } else { b.push(m.avail_daily_mean) }
    }
    let ratio = (a.iter().sum::<f64>() / a.len() as f64) / (b.iter().sum::<f64>() / b.len() as f64);

    let text = std::fs::read_to_string(out.join("report/tableA2_welch.json")).map_err(|e| e.to_string())?;
    let a2: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let row = a2["rows"]
        .as_array()
        .and_then(|rows| rows.iter().find(|r| r["block"] == "scooter" && r["label"] == "EEA vs Non-EEA"))
        .ok_or("no EEA vs Non-EEA row")?;
    let cell = &row["cells"]["avail_daily"];
    Ok(RunResult {
        ratio,
        significant: cell["significant"].as_bool().ok_or("no significance flag")?,
        p: cell["p"].as_f64().unwrap_or(f64::NAN),
    })
}

fn disparity() -> Outcome {
    let started = Clock::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let planted = ScenarioSpec::default();
    let eea_zones = (0..planted.cols).filter(|c| planted.is_eea_column(*c)).count() * planted.rows;
    check(eea_zones >= 30 && planted.rows * planted.cols - eea_zones >= 30, "fewer than 30 zones per category")?;
    let r = run_scenario(&planted, &tmp.path().join("planted"))?;
    let full_secs = started.elapsed().as_secs_f64();
    check((1.8..=2.2).contains(&r.ratio), format!("ratio {:.3}", r.ratio))?;
    check(r.significant, format!("planted contrast not significant, p = {}", r.p))?;
    check(full_secs < 120.0, format!("full run took {full_secs:.1}s"))?;

    let mut nonsig = 0;
    for seed in 1..=20 {
        let spec = ScenarioSpec {
            seed,
            days: 2,
            bike: None,
            scooter_operators: vec![OperatorSpec {
                name: "lime".into(),
                linkage: Linkage::Linked,
                eea_intensity: 8.0,
                non_eea_intensity: 8.0,
            }],
            ..ScenarioSpec::default()
        };
        let r = run_scenario(&spec, &tmp.path().join(format!("null{seed}")))?;
        if !r.significant {
            nonsig += 1;
        }
    }
    check(nonsig >= 18, format!("null scenario non-significant in {nonsig}/20 seeds"))?;
    Ok(format!("ratio {:.3}, p {:.1e}, full run {full_secs:.1}s; null non-significant {nonsig}/20", r.ratio, r.p))
}

// ---------------------------------------------------------------------------
// 8. Population weighting

fn zone_with(id: &str, population: u64, black_share: f64, income: f64) -> Zone {
    let mut z = rect_zone(id, BASE_LON, BASE_LAT, 0.01, 0.01);
    z.population = population;
    z.median_income = Some(income);
    z.race_shares = Some(BTreeMap::from([("Black".to_string(), black_share), ("White".to_string(), 1.0 - black_share)]));
    z
}

fn metric(id: &str, v: f64) -> ZoneMetrics {
    ZoneMetrics {
        zone_id: id.into(),
        mode: Mode::Scooter,
        avail_daily_mean: v,
        avail_per_resident: None,
        avail_per_resident_job: None,
        kde_accessibility: v,
        trips: 0.0,
        trips_per_resident: None,
        trips_per_resident_job: None,
        idle_mean_h: None,
        idle_median_h: None,
    }
}

fn weighting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let th = IncomeThresholds::default();
    let inds = [Indicator::AvailDaily, Indicator::Kde];
    let policy = OutlierPolicy::default();
    let mut groups_checked = 0;
    for _ in 0..50 {
        let c: f64 = rng.random_range(0.0..1000.0);
        let n = rng.random_range(3..40);
        let zones: Vec<Zone> = (0..n)
            .map(|i| {
                zone_with(&format!("z{i}"), rng.random_range(1..5000), rng.random_range(0.0..1.0), rng.random_range(20_000.0..250_000.0))
            })
            .collect();
        let metrics: Vec<ZoneMetrics> = zones.iter().map(|z| metric(&z.id, c)).collect();
        let (groups, _) = population_weighted(&metrics, &zones, &th, &policy, &inds);
        for g in &groups {
            for ind in inds {
                let v = g.values[&ind];
                check(v == Some(c), format!("{:?} {}: {v:?} for constant {c}", g.kind, g.group))?;
            }
            groups_checked += 1;
        }
    }

    check(weighted_mean(&[(100.0, 10.0), (300.0, 20.0)]) == Some(17.5), "weighted_mean two-zone case")?;
    let zones = vec![zone_with("a", 200, 0.5, 60_000.0), zone_with("b", 600, 0.5, 60_000.0)];
    let metrics = vec![metric("a", 10.0), metric("b", 20.0)];
    let (groups, _) = population_weighted(&metrics, &zones, &th, &policy, &inds);
    let black = groups.iter().find(|g| g.kind == GroupKind::Race && g.group == "Black").ok_or("no Black group")?;
    check(black.population == 400.0, format!("group population {}", black.population))?;
    check(black.values[&Indicator::AvailDaily] == Some(17.5), format!("two-zone value {:?}", black.values[&Indicator::AvailDaily]))?;
    Ok(format!("{groups_checked} groups exact under a constant metric; two-zone case 17.5"))
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = ScenarioSpec { rows: 6, cols: 6, days: 2, seed: 9, ..ScenarioSpec::default() };
    generate_scenario(&spec).map_err(|e| e.to_string())?.write(&tmp.path().join("in")).map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("in/run.toml");
    for name in ["a", "b"] {
        let p = Pipeline::from_config_file(&cfg, Some(tmp.path().join(name)), ModeSelect::Both).map_err(|e| e.to_string())?;
        p.run().map_err(|e| e.to_string())?;
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    check(a.keys().eq(b.keys()), "file sets differ")?;
    for (k, v) in &a {
        check(b[k] == *v, format!("{k} differs"))?;
    }
    Ok(format!("{} files byte-identical", a.len()))
}

// ---------------------------------------------------------------------------
// 10. Table shapes

const CATEGORY_ROWS: [(&str, &str); 9] = [
    ("EEA status", "EEA"),
    ("EEA status", "Non-EEA"),
    ("Median household income", "Low"),
    ("Median household income", "Middle"),
    ("Median household income", "High"),
    ("Racial composition", "White-Majority"),
    ("Racial composition", "Black-Majority"),
    ("Racial composition", "No-Majority"),
    ("Average", "Average"),
];

fn stat_columns(prefix: &str, keys: &[&str]) -> Vec<String> {
    keys.iter().flat_map(|k| [format!("{prefix}_{k}_mean"), format!("{prefix}_{k}_median")]).collect()
}

fn check_category_table(path: &Path, indicators: &[(&str, &[&str])]) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let mut want = vec!["block".to_string(), "category".into(), "zones".into()];
    for (mode, keys) in indicators {
        want.extend(stat_columns(mode, keys));
    }
    check(header == want, format!("{}: header {header:?}", path.display()))?;
    let rows: Vec<(&str, &str)> = lines
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap_or(""), f.next().unwrap_or(""))
        })
        .collect();
    check(rows == CATEGORY_ROWS, format!("{}: rows {rows:?}", path.display()))
}

fn tables() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = ScenarioSpec { rows: 6, cols: 6, days: 2, seed: 10, ..ScenarioSpec::default() };
    generate_scenario(&spec).map_err(|e| e.to_string())?.write(&tmp.path().join("in")).map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    Pipeline::from_config_file(&tmp.path().join("in/run.toml"), Some(out.clone()), ModeSelect::Both)
        .and_then(|p| p.run())
        .map_err(|e| e.to_string())?;
    let report = out.join("report");
    let supply_cols = |mode: &str| -> Vec<String> {
        ["avail", "avail_per_res", "avail_per_res_job", "kde", "idle_mean_h"]
            .iter()
            .flat_map(|k| {
                let sfx = if k.starts_with("avail_per_res") { "_x1e-2" } else { "" };
                [format!("{mode}_{k}_mean{sfx}"), format!("{mode}_{k}_median{sfx}")]
            })
            .collect()
    };

    for (file, mode) in [("table1_scooter.csv", "scooter"), ("table2_bike.csv", "bike")] {
        let text = std::fs::read_to_string(report.join(file)).map_err(|e| e.to_string())?;
        let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
        let mut want = vec!["block".to_string(), "category".into(), "zones".into()];
        want.extend(supply_cols(mode));
        check(header == want, format!("{file}: header {header:?}"))?;
        let rows: Vec<(&str, &str)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let mut f = l.split(',');
                (f.next().unwrap_or(""), f.next().unwrap_or(""))
            })
            .collect();
        check(rows == CATEGORY_ROWS, format!("{file}: rows {rows:?}"))?;
    }
    let usage: &[&str] = &["trips", "trips_per_res", "trips_per_res_job"];
    check_category_table(&report.join("table3_usage.csv"), &[("scooter", usage), ("bike", usage)])?;

    let text = std::fs::read_to_string(report.join("tableA1_weighted.csv")).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    check(
        lines.next() == Some("group_kind,group,population,scooter_avail,scooter_kde,bike_avail,bike_kde"),
        "tableA1 header",
    )?;
    let groups: Vec<String> = lines.map(|l| l.split(',').take(2).collect::<Vec<_>>().join("/")).collect();
    for g in ["Race/White", "Race/Black", "Household Income/Low-income Households", "Household Income/Middle-income Households", "Household Income/High-income Households"] {
        check(groups.iter().any(|x| x == g), format!("tableA1 lacks {g}"))?;
    }

    let text = std::fs::read_to_string(report.join("tableA2_welch.csv")).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let mut want = vec!["block".to_string(), "comparison".into()];
    for k in ["avail", "avail_per_res", "avail_per_res_job", "kde", "idle_mean_h", "trips"] {
        want.extend(["t", "df", "p", "significant"].map(|s| format!("{k}_{s}")));
    }
    check(lines.next().map(|h| h.split(',').map(String::from).collect::<Vec<_>>()) == Some(want), "tableA2 header")?;
    let rows: Vec<(String, String)> = lines
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap_or("").to_string(), f.next().unwrap_or("").to_string())
        })
        .collect();
    let within = ["EEA vs Non-EEA", "Low-income vs Middle-income", "Low-income vs High-income", "Middle-income vs High-income",
        "Black-Majority vs White-Majority", "Black-Majority vs No-Majority", "White-Majority vs No-Majority"];
    let cross = ["Within EEA", "Within Non-EEA", "Within Low-income", "Within Middle-income", "Within High-income",
        "Within Black-Majority", "Within White-Majority", "Within No-Majority"];
    let mut expected: Vec<(String, String)> = Vec::new();
    for block in ["E-scooters", "Bikeshare"] {
        expected.extend(within.iter().map(|c| (block.to_string(), c.to_string())));
    }
    expected.extend(cross.iter().map(|c| ("E-scooters vs Bikeshare".to_string(), c.to_string())));
    check(rows == expected, format!("tableA2 rows {rows:?}"))?;
    Ok(format!("tables 1-3 headers and 9 category rows, A1 groups, A2 {} comparison rows", rows.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter fidelity", parameters),
        ("kde oracle equivalence", kde),
        ("zonal mean oracle", zonal),
        ("welch suite", welch),
        ("trip inference round trip", roundtrip),
        ("idle reconstruction", idle),
        ("planted disparity", disparity),
        ("population weighting", weighting),
        ("determinism", determinism),
        ("table shapes", tables),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
