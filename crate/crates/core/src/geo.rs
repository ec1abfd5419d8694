//! Geometric kernels: local projection, great-circle distance, point-in-polygon with a
//! grid index, quartic kernel density rasters and zonal means.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GeoPoint, Mode, Polygon, Zone};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// One-eighth of a statute mile.
pub const SCOOTER_RADIUS_M: f64 = 201.168;
/// One-sixth of a statute mile.
pub const BIKE_RADIUS_M: f64 = 268.224;

pub const DEFAULT_CELL_SIZE_M: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("search radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("cell size {cell} m exceeds half the search radius {radius} m")]
    CellTooCoarse { cell: f64, radius: f64 },
    #[error("raster extent must have at least one row and column and a positive cell size")]
    EmptyExtent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

impl ProjectedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        ProjectedPoint { x, y }
    }

    pub fn distance(self, other: ProjectedPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection about a reference point, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub reference: GeoPoint,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn new(reference: GeoPoint) -> Self {
        LocalProjection { reference, cos_lat: reference.lat.to_radians().cos() }
    }

    /// Reference at the bounding-box center of all zone vertices.
    pub fn for_zones(zones: &[Zone]) -> Self {
        let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in zones.iter().flat_map(|z| z.geometry.iter()).flat_map(|p| p.exterior.iter()) {
            bb[0] = bb[0].min(p.lon);
            bb[1] = bb[1].min(p.lat);
            bb[2] = bb[2].max(p.lon);
            bb[3] = bb[3].max(p.lat);
        }
        if !bb[0].is_finite() {
            return LocalProjection::new(GeoPoint { lon: 0.0, lat: 0.0 });
        }
        LocalProjection::new(GeoPoint { lon: (bb[0] + bb[2]) / 2.0, lat: (bb[1] + bb[3]) / 2.0 })
    }

    pub fn project(&self, p: GeoPoint) -> ProjectedPoint {
        let k = EARTH_RADIUS_M * PI / 180.0;
        ProjectedPoint {
            x: (p.lon - self.reference.lon) * self.cos_lat * k,
            y: (p.lat - self.reference.lat) * k,
        }
    }

    pub fn unproject(&self, q: ProjectedPoint) -> GeoPoint {
        let k = EARTH_RADIUS_M * PI / 180.0;
        GeoPoint { lon: self.reference.lon + q.x / (self.cos_lat * k), lat: self.reference.lat + q.y / k }
    }

    pub fn project_polygon(&self, poly: &Polygon) -> ProjectedPolygon {
        let ring = |r: &Vec<GeoPoint>| r.iter().map(|p| self.project(*p)).collect::<Vec<_>>();
        ProjectedPolygon::new(ring(&poly.exterior), poly.holes.iter().map(ring).collect())
    }

    pub fn project_zone(&self, zone: &Zone) -> ProjectedZone {
        ProjectedZone::new(zone.id.clone(), zone.geometry.iter().map(|p| self.project_polygon(p)).collect())
    }
}

pub fn project(p: GeoPoint, reference: GeoPoint) -> ProjectedPoint {
    LocalProjection::new(reference).project(p)
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchRadius(f64);

impl SearchRadius {
    pub fn new(meters: f64) -> Result<Self, GeoError> {
        if meters.is_finite() && meters > 0.0 {
            Ok(SearchRadius(meters))
        } else {
            Err(GeoError::InvalidRadius(meters))
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Scooter => SearchRadius(SCOOTER_RADIUS_M),
            Mode::Bike => SearchRadius(BIKE_RADIUS_M),
        }
    }

    pub fn meters(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub const EMPTY: BBox =
        BBox { min_x: f64::INFINITY, min_y: f64::INFINITY, max_x: f64::NEG_INFINITY, max_y: f64::NEG_INFINITY };

    pub fn of_points<'a, I: IntoIterator<Item = &'a ProjectedPoint>>(pts: I) -> BBox {
        pts.into_iter().fold(BBox::EMPTY, |b, p| b.include(*p))
    }

    pub fn include(self, p: ProjectedPoint) -> BBox {
        BBox {
            min_x: self.min_x.min(p.x),
            min_y: self.min_y.min(p.y),
            max_x: self.max_x.max(p.x),
            max_y: self.max_y.max(p.y),
        }
    }

    pub fn union(self, o: BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }

    pub fn contains(&self, p: ProjectedPoint) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn is_empty(&self) -> bool {
        !(self.min_x <= self.max_x && self.min_y <= self.max_y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPolygon {
    pub exterior: Vec<ProjectedPoint>,
    pub holes: Vec<Vec<ProjectedPoint>>,
    pub bbox: BBox,
}

impl ProjectedPolygon {
    pub fn new(exterior: Vec<ProjectedPoint>, holes: Vec<Vec<ProjectedPoint>>) -> Self {
        let bbox = BBox::of_points(&exterior);
        ProjectedPolygon { exterior, holes, bbox }
    }

    fn rings(&self) -> impl Iterator<Item = &Vec<ProjectedPoint>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    /// Area with holes removed.
    pub fn area(&self) -> f64 {
        ring_signed_area(&self.exterior).abs() - self.holes.iter().map(|h| ring_signed_area(h).abs()).sum::<f64>()
    }
}

fn on_segment(q: ProjectedPoint, a: ProjectedPoint, b: ProjectedPoint) -> bool {
    let cross = (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
    let len = (b.x - a.x).hypot(b.y - a.y);
    if cross.abs() > 1e-9 * len.max(1.0) {
        return false;
    }
    q.x >= a.x.min(b.x) - 1e-12
        && q.x <= a.x.max(b.x) + 1e-12
        && q.y >= a.y.min(b.y) - 1e-12
        && q.y <= a.y.max(b.y) + 1e-12
}

/// Even-odd rule over every ring; points on any ring boundary count as inside.
pub fn point_in_polygon(q: ProjectedPoint, polygon: &ProjectedPolygon) -> bool {
    if !polygon.bbox.contains(q) {
        return false;
    }
    let mut inside = false;
    for ring in polygon.rings() {
        for w in ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            if on_segment(q, a, b) {
                return true;
            }
            if (a.y > q.y) != (b.y > q.y) {
                let x_cross = (b.x - a.x) * (q.y - a.y) / (b.y - a.y) + a.x;
                if q.x < x_cross {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

/// Shoelace area; positive for counter-clockwise rings.
pub fn ring_signed_area(ring: &[ProjectedPoint]) -> f64 {
    ring.windows(2).map(|w| w[0].x * w[1].y - w[1].x * w[0].y).sum::<f64>() / 2.0
}

fn orient(a: ProjectedPoint, b: ProjectedPoint, c: ProjectedPoint) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_intersect(p1: ProjectedPoint, p2: ProjectedPoint, q1: ProjectedPoint, q2: ProjectedPoint) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p1, q1, q2))
        || (d2 == 0.0 && on_segment(p2, q1, q2))
        || (d3 == 0.0 && on_segment(q1, p1, p2))
        || (d4 == 0.0 && on_segment(q2, p1, p2))
}

/// True when two non-adjacent edges of a closed ring touch or cross.
pub fn ring_self_intersects(ring: &[ProjectedPoint]) -> bool {
    let n = ring.len().saturating_sub(1);
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedZone {
    pub id: String,
    pub polygons: Vec<ProjectedPolygon>,
    pub bbox: BBox,
}

impl ProjectedZone {
    pub fn new(id: String, polygons: Vec<ProjectedPolygon>) -> Self {
        let bbox = polygons.iter().fold(BBox::EMPTY, |b, p| b.union(p.bbox));
        ProjectedZone { id, polygons, bbox }
    }

    pub fn contains(&self, q: ProjectedPoint) -> bool {
        self.bbox.contains(q) && self.polygons.iter().any(|p| point_in_polygon(q, p))
    }

    /// Area-weighted centroid over all polygons, holes subtracted.
    pub fn centroid(&self) -> ProjectedPoint {
        let (mut a_sum, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for poly in &self.polygons {
            for (k, ring) in poly.rings().enumerate() {
                let a = ring_signed_area(ring);
                if a == 0.0 {
                    continue;
                }
                let (mut rx, mut ry) = (0.0, 0.0);
                for w in ring.windows(2) {
                    let c = w[0].x * w[1].y - w[1].x * w[0].y;
                    rx += (w[0].x + w[1].x) * c;
                    ry += (w[0].y + w[1].y) * c;
                }
                let (rx, ry) = (rx / (6.0 * a), ry / (6.0 * a));
                let weight = if k == 0 { a.abs() } else { -a.abs() };
                a_sum += weight;
                cx += weight * rx;
                cy += weight * ry;
            }
        }
        if a_sum == 0.0 {
            return ProjectedPoint::new((self.bbox.min_x + self.bbox.max_x) / 2.0, (self.bbox.min_y + self.bbox.max_y) / 2.0);
        }
        ProjectedPoint::new(cx / a_sum, cy / a_sum)
    }
}

/// Uniform grid of buckets over zone bounding boxes.
#[derive(Debug, Clone)]
pub struct ZoneIndex {
    projection: LocalProjection,
    zones: Vec<ProjectedZone>,
    bounds: BBox,
    nx: usize,
    ny: usize,
    bucket_w: f64,
    bucket_h: f64,
    buckets: Vec<Vec<usize>>,
}

impl ZoneIndex {
    pub fn build(zones: &[Zone], projection: LocalProjection) -> Self {
        let mut projected: Vec<ProjectedZone> = zones.iter().map(|z| projection.project_zone(z)).collect();
        projected.sort_by(|a, b| a.id.cmp(&b.id));
        Self::from_projected(projected, projection)
    }

    pub fn from_projected(mut zones: Vec<ProjectedZone>, projection: LocalProjection) -> Self {
        zones.sort_by(|a, b| a.id.cmp(&b.id));
        let bounds = zones.iter().fold(BBox::EMPTY, |b, z| b.union(z.bbox));
        let side = ((zones.len() as f64).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (side, side);
        let (bucket_w, bucket_h) = if bounds.is_empty() {
            (1.0, 1.0)
        } else {
            (((bounds.max_x - bounds.min_x) / nx as f64).max(1e-9), ((bounds.max_y - bounds.min_y) / ny as f64).max(1e-9))
        };
        let mut index = ZoneIndex { projection, zones, bounds, nx, ny, bucket_w, bucket_h, buckets: vec![Vec::new(); nx * ny] };
        for (i, z) in index.zones.iter().enumerate() {
            if z.bbox.is_empty() {
                continue;
            }
            let (c0, r0) = index.bucket_of(z.bbox.min_x, z.bbox.min_y);
            let (c1, r1) = index.bucket_of(z.bbox.max_x, z.bbox.max_y);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    index.buckets[r * nx + c].push(i);
                }
            }
        }
        index
    }

    fn bucket_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x - self.bounds.min_x) / self.bucket_w).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let r = ((y - self.bounds.min_y) / self.bucket_h).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (c, r)
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    /// Zones in ascending id order.
    pub fn zones(&self) -> &[ProjectedZone] {
        &self.zones
    }

    pub fn bounds(&self) -> BBox {
        self.bounds
    }

    pub fn assign_projected(&self, q: ProjectedPoint) -> Option<&str> {
        if self.bounds.is_empty() || !self.bounds.contains(q) {
            return None;
        }
        let (c, r) = self.bucket_of(q.x, q.y);
        // Bucket lists are ascending, so the first hit is the smallest id.
        self.buckets[r * self.nx + c]
            .iter()
            .map(|&i| &self.zones[i])
            .find(|z| z.contains(q))
            .map(|z| z.id.as_str())
    }

    pub fn assign(&self, p: GeoPoint) -> Option<&str> {
        self.assign_projected(self.projection.project(p))
    }
}

pub fn assign_zone(p: GeoPoint, index: &ZoneIndex) -> Option<&str> {
    index.assign(p)
}

/// Raster grid geometry: lower-left corner, square cells, row 0 at the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub origin: ProjectedPoint,
    pub cell_size_m: f64,
    pub nrows: usize,
    pub ncols: usize,
}

impl Extent {
    pub fn new(origin: ProjectedPoint, cell_size_m: f64, nrows: usize, ncols: usize) -> Result<Self, GeoError> {
        if nrows == 0 || ncols == 0 || !(cell_size_m > 0.0) || !cell_size_m.is_finite() {
            return Err(GeoError::EmptyExtent);
        }
        Ok(Extent { origin, cell_size_m, nrows, ncols })
    }

    /// Smallest cell-aligned extent covering `bbox` padded by `pad_m` on every side.
    pub fn covering(bbox: BBox, pad_m: f64, cell_size_m: f64) -> Result<Self, GeoError> {
        if bbox.is_empty() {
            return Err(GeoError::EmptyExtent);
        }
        let min_x = ((bbox.min_x - pad_m) / cell_size_m).floor() * cell_size_m;
        let min_y = ((bbox.min_y - pad_m) / cell_size_m).floor() * cell_size_m;
        let ncols = (((bbox.max_x + pad_m) - min_x) / cell_size_m).ceil().max(1.0) as usize;
        let nrows = (((bbox.max_y + pad_m) - min_y) / cell_size_m).ceil().max(1.0) as usize;
        Extent::new(ProjectedPoint::new(min_x, min_y), cell_size_m, nrows, ncols)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> ProjectedPoint {
        ProjectedPoint::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_size_m,
            self.origin.y + (row as f64 + 0.5) * self.cell_size_m,
        )
    }

    /// Cell containing `p`, if inside the extent.
    pub fn cell_of(&self, p: ProjectedPoint) -> Option<(usize, usize)> {
        let c = ((p.x - self.origin.x) / self.cell_size_m).floor();
        let r = ((p.y - self.origin.y) / self.cell_size_m).floor();
        if c < 0.0 || r < 0.0 || c >= self.ncols as f64 || r >= self.nrows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// Kernel density surface in points per square kilometre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeRaster {
    pub extent: Extent,
    /// Row-major, row 0 = southernmost row.
    pub values: Vec<f64>,
}

impl KdeRaster {
    pub fn zeros(extent: Extent) -> Self {
        KdeRaster { extent, values: vec![0.0; extent.nrows * extent.ncols] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.extent.ncols + col]
    }

    pub fn nrows(&self) -> usize {
        self.extent.nrows
    }

    pub fn ncols(&self) -> usize {
        self.extent.ncols
    }

    /// Kernel mass represented by the raster (points).
    pub fn total_mass(&self) -> f64 {
        let cell_km2 = self.extent.cell_size_m * self.extent.cell_size_m / 1e6;
        self.values.iter().sum::<f64>() * cell_km2
    }

    /// ESRI ASCII grid. Corner coordinates are in local projected meters.
    pub fn to_esri_ascii(&self) -> String {
        let e = &self.extent;
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", e.ncols);
        let _ = writeln!(out, "nrows {}", e.nrows);
        let _ = writeln!(out, "xllcorner {}", e.origin.x);
        let _ = writeln!(out, "yllcorner {}", e.origin.y);
        let _ = writeln!(out, "cellsize {}", e.cell_size_m);
        let _ = writeln!(out, "NODATA_value -9999");
        for row in (0..e.nrows).rev() {
            let line: Vec<String> = (0..e.ncols).map(|c| format!("{}", self.get(row, c))).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Quartic (biweight) kernel with compact support `r`, integrating to one over the plane.
pub fn quartic_kernel(d: f64, r: f64) -> f64 {
    if d >= r {
        return 0.0;
    }
    let u = d / r;
    let t = 1.0 - u * u;
    3.0 / (PI * r * r) * t * t
}

pub fn kde_raster(
    points: &[GeoPoint],
    projection: &LocalProjection,
    radius: SearchRadius,
    extent: Extent,
) -> Result<KdeRaster, GeoError> {
    let weighted: Vec<(ProjectedPoint, f64)> = points.iter().map(|p| (projection.project(*p), 1.0)).collect();
    kde_raster_weighted(&weighted, radius, extent)
}

/// Weighted kernel density. A weight of `w` counts as `w` coincident points.
pub fn kde_raster_weighted(
    points: &[(ProjectedPoint, f64)],
    radius: SearchRadius,
    extent: Extent,
) -> Result<KdeRaster, GeoError> {
    let r = radius.meters();
    if extent.cell_size_m > r / 2.0 {
        return Err(GeoError::CellTooCoarse { cell: extent.cell_size_m, radius: r });
    }
    let mut sorted: Vec<(ProjectedPoint, f64)> = points.iter().copied().filter(|(_, w)| *w != 0.0).collect();
    sorted.sort_by(|a, b| a.0.y.total_cmp(&b.0.y).then(a.0.x.total_cmp(&b.0.x)));
    let ys: Vec<f64> = sorted.iter().map(|(p, _)| p.y).collect();

    let mut raster = KdeRaster::zeros(extent);
    let cs = extent.cell_size_m;
    raster.values.par_chunks_mut(extent.ncols).enumerate().for_each(|(row, out)| {
        let cy = extent.origin.y + (row as f64 + 0.5) * cs;
        let lo = ys.partition_point(|y| *y <= cy - r);
        let hi = ys.partition_point(|y| *y < cy + r);
        for &(p, w) in &sorted[lo..hi] {
            let c0 = ((p.x - r - extent.origin.x) / cs - 0.5).floor().max(0.0) as usize;
            let c1 = (((p.x + r - extent.origin.x) / cs - 0.5).ceil().max(-1.0) as isize).min(extent.ncols as isize - 1);
            if c1 < c0 as isize {
                continue;
            }
            for (col, v) in out.iter_mut().enumerate().take(c1 as usize + 1).skip(c0) {
                let cx = extent.origin.x + (col as f64 + 0.5) * cs;
                let d = (cx - p.x).hypot(cy - p.y);
                *v += w * quartic_kernel(d, r) * 1e6;
            }
        }
    });
    Ok(raster)
}

/// Mean raster value over cells whose centers lie inside the zone. Falls back to the
/// cell under the zone centroid when no center is inside, and 0 outside the raster.
pub fn zonal_mean(raster: &KdeRaster, zone: &ProjectedZone) -> f64 {
    let e = &raster.extent;
    let cs = e.cell_size_m;
    let bb = zone.bbox;
    // One cell of slack each side; `contains` makes the final decision.
    let col_range = |lo: f64, hi: f64, n: usize| {
        let a = ((lo - cs / 2.0) / cs).ceil() - 1.0;
        let b = ((hi - cs / 2.0) / cs).floor() + 1.0;
        if b < 0.0 || a > (n - 1) as f64 {
            return (1, 0);
        }
        (a.max(0.0) as usize, (b as usize).min(n - 1))
    };
    let (c0, c1) = col_range(bb.min_x - e.origin.x, bb.max_x - e.origin.x, e.ncols);
    let (r0, r1) = col_range(bb.min_y - e.origin.y, bb.max_y - e.origin.y, e.nrows);
    let mut sum = 0.0;
    let mut n = 0usize;
    if c0 <= c1 && r0 <= r1 {
        for row in r0..=r1 {
            for col in c0..=c1 {
                if zone.contains(e.cell_center(row, col)) {
                    sum += raster.get(row, col);
                    n += 1;
                }
            }
        }
    }
    if n > 0 {
        return sum / n as f64;
    }
    match e.cell_of(zone.centroid()) {
        Some((row, col)) => raster.get(row, col),
        None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pp(x: f64, y: f64) -> ProjectedPoint {
        ProjectedPoint::new(x, y)
    }

    fn square(x0: f64, y0: f64, s: f64) -> Vec<ProjectedPoint> {
        vec![pp(x0, y0), pp(x0 + s, y0), pp(x0 + s, y0 + s), pp(x0, y0 + s), pp(x0, y0)]
    }

    #[test]
    fn projection_examples() {
        let r = GeoPoint { lon: -77.0, lat: 38.9 };
        assert_eq!(project(r, r), pp(0.0, 0.0));
        let north = project(GeoPoint { lon: -77.0, lat: 39.9 }, r);
        let oracle = 6_371_000.0 * PI / 180.0;
        assert_relative_eq!(north.y, oracle, max_relative = 1e-12);
        assert_relative_eq!(north.y, 111_194.93, epsilon = 0.01);
        let r60 = GeoPoint { lon: 10.0, lat: 60.0 };
        let east = project(GeoPoint { lon: 11.0, lat: 60.0 }, r60);
        assert_relative_eq!(east.x, oracle / 2.0, max_relative = 1e-12);
        let back = LocalProjection::new(r).unproject(north);
        assert_relative_eq!(back.lat, 39.9, epsilon = 1e-12);
    }

    #[test]
    fn haversine_examples() {
        let a = GeoPoint { lon: 0.0, lat: 0.0 };
        assert_eq!(haversine(a, a), 0.0);
        let oracle = 6_371_000.0 * PI / 180.0;
        assert_relative_eq!(haversine(a, GeoPoint { lon: 1.0, lat: 0.0 }), oracle, max_relative = 1e-12);
        let anti = haversine(GeoPoint { lon: 0.0, lat: 0.0 }, GeoPoint { lon: 180.0, lat: 0.0 });
        assert_relative_eq!(anti, PI * EARTH_RADIUS_M, max_relative = 1e-12);
    }

    #[test]
    fn pip_square_and_hole() {
        let poly = ProjectedPolygon::new(square(0.0, 0.0, 1.0), vec![]);
        assert!(point_in_polygon(pp(0.5, 0.5), &poly));
        assert!(point_in_polygon(pp(1.0, 0.3), &poly));
        assert!(point_in_polygon(pp(0.0, 0.0), &poly));
        assert!(!point_in_polygon(pp(1.2, 0.5), &poly));
        let holed = ProjectedPolygon::new(square(0.0, 0.0, 10.0), vec![square(4.0, 4.0, 2.0)]);
        assert!(!point_in_polygon(pp(5.0, 5.0), &holed));
        assert!(point_in_polygon(pp(4.0, 5.0), &holed));
        assert!(point_in_polygon(pp(2.0, 2.0), &holed));
    }

    #[test]
    fn self_intersection() {
        let bowtie = vec![pp(0.0, 0.0), pp(1.0, 1.0), pp(1.0, 0.0), pp(0.0, 1.0), pp(0.0, 0.0)];
        assert!(ring_self_intersects(&bowtie));
        assert!(!ring_self_intersects(&square(0.0, 0.0, 1.0)));
    }

    #[test]
    fn centroid_of_square_with_hole() {
        let z = ProjectedZone::new("z".into(), vec![ProjectedPolygon::new(square(0.0, 0.0, 4.0), vec![square(0.0, 0.0, 2.0)])]);
        let c = z.centroid();
        // Three unit-2 squares centered at (3,1), (1,3), (3,3).
        assert_relative_eq!(c.x, 7.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(c.y, 7.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_peak_and_support() {
        let r = SCOOTER_RADIUS_M;
        let ext = Extent::new(pp(-500.0, -500.0), 20.0, 50, 50).unwrap();
        let center = ext.cell_center(25, 25);
        let raster = kde_raster_weighted(&[(center, 1.0)], SearchRadius::new(r).unwrap(), ext).unwrap();
        assert_relative_eq!(raster.get(25, 25), 1e6 * 3.0 / (PI * r * r), max_relative = 1e-12);
        for row in 0..50 {
            for col in 0..50 {
                if ext.cell_center(row, col).distance(center) >= r {
                    assert_eq!(raster.get(row, col), 0.0);
                }
            }
        }
        let doubled = kde_raster_weighted(&[(center, 1.0), (center, 1.0)], SearchRadius::new(r).unwrap(), ext).unwrap();
        for (a, b) in raster.values.iter().zip(&doubled.values) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-15);
        }
    }

    #[test]
    fn kde_empty_is_zero() {
        let ext = Extent::new(pp(0.0, 0.0), 50.0, 3, 4).unwrap();
        let r = kde_raster_weighted(&[], SearchRadius::for_mode(Mode::Bike), ext).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kde_rejects_coarse_cells() {
        let ext = Extent::new(pp(0.0, 0.0), 150.0, 3, 4).unwrap();
        assert!(matches!(
            kde_raster_weighted(&[], SearchRadius::for_mode(Mode::Scooter), ext),
            Err(GeoError::CellTooCoarse { .. })
        ));
        assert!(SearchRadius::new(0.0).is_err());
    }

    #[test]
    fn zonal_mean_examples() {
        let ext = Extent::new(pp(0.0, 0.0), 1.0, 4, 4).unwrap();
        let constant = KdeRaster { extent: ext, values: vec![7.5; 16] };
        let zone = ProjectedZone::new("a".into(), vec![ProjectedPolygon::new(square(0.0, 0.0, 3.0), vec![])]);
        assert_eq!(zonal_mean(&constant, &zone), 7.5);

        let mut two = KdeRaster::zeros(ext);
        two.values[0] = 2.0;
        two.values[1] = 4.0;
        let rect = vec![pp(0.0, 0.0), pp(2.0, 0.0), pp(2.0, 1.0), pp(0.0, 1.0), pp(0.0, 0.0)];
        let zone = ProjectedZone::new("b".into(), vec![ProjectedPolygon::new(rect, vec![])]);
        assert_eq!(zonal_mean(&two, &zone), 3.0);

        // Tiny zone with no interior center samples the centroid cell.
        let tiny = ProjectedZone::new("c".into(), vec![ProjectedPolygon::new(square(1.1, 0.1, 0.2), vec![])]);
        assert_eq!(zonal_mean(&two, &tiny), 4.0);
    }

    #[test]
    fn esri_ascii_header_and_row_order() {
        let ext = Extent::new(pp(10.0, 20.0), 5.0, 2, 3).unwrap();
        let mut r = KdeRaster::zeros(ext);
        r.values[3] = 1.5; // row 1 (north), col 0
        let text = r.to_esri_ascii();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ncols 3");
        assert_eq!(lines[1], "nrows 2");
        assert_eq!(lines[2], "xllcorner 10");
        assert_eq!(lines[5], "NODATA_value -9999");
        assert_eq!(lines[6], "1.5 0 0");
        assert_eq!(lines[7], "0 0 0");
    }

    #[test]
    fn index_tie_breaks_by_id() {
        let proj = LocalProjection::new(GeoPoint { lon: 0.0, lat: 0.0 });
        let a = ProjectedZone::new("B".into(), vec![ProjectedPolygon::new(square(0.0, 0.0, 10.0), vec![])]);
        let b = ProjectedZone::new("A".into(), vec![ProjectedPolygon::new(square(10.0, 0.0, 10.0), vec![])]);
        let idx = ZoneIndex::from_projected(vec![a, b], proj);
        assert_eq!(idx.assign_projected(pp(10.0, 5.0)), Some("A"));
        assert_eq!(idx.assign_projected(pp(5.0, 5.0)), Some("B"));
        assert_eq!(idx.assign_projected(pp(50.0, 5.0)), None);
    }
}
