use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{json_error, IngestError};
use crate::geo::{ring_self_intersects, ring_signed_area, ProjectedPoint};
use crate::model::{GeoPoint, Polygon, Ring, Zone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneLoadConfig {
    /// Feature property holding the zone id; the feature-level `id` is the fallback.
    pub id_property: String,
}

impl Default for ZoneLoadConfig {
    fn default() -> Self {
        ZoneLoadConfig { id_property: "GEOID".into() }
    }
}

/// Largest first/last vertex gap, in degrees, that is silently closed.
const CLOSE_TOLERANCE_DEG: f64 = 1e-9;

fn invalid(id: &str, reason: impl Into<String>) -> IngestError {
    IngestError::InvalidZone { id: id.to_string(), reason: reason.into() }
}

fn parse_ring(id: &str, v: &Value) -> Result<Ring, IngestError> {
    let coords = v.as_array().ok_or_else(|| invalid(id, "ring is not an array"))?;
    let mut ring = Vec::with_capacity(coords.len() + 1);
    for c in coords {
        let pos = c.as_array().filter(|p| p.len() >= 2).ok_or_else(|| invalid(id, "position needs [lon, lat]"))?;
        let (lon, lat) = (pos[0].as_f64(), pos[1].as_f64());
        let p = lon
            .zip(lat)
            .and_then(|(lon, lat)| GeoPoint::new(lon, lat).ok())
            .ok_or_else(|| invalid(id, format!("bad position {c}")))?;
        ring.push(p);
    }
    let (Some(first), Some(last)) = (ring.first().copied(), ring.last().copied()) else {
        return Err(invalid(id, "empty ring"));
    };
    if first != last {
        if (first.lon - last.lon).abs() <= CLOSE_TOLERANCE_DEG && (first.lat - last.lat).abs() <= CLOSE_TOLERANCE_DEG {
            *ring.last_mut().unwrap() = first;
        } else {
            return Err(invalid(id, "ring is not closed"));
        }
    }
    if ring.len() < 4 {
        return Err(invalid(id, format!("ring has {} positions, need at least 4", ring.len())));
    }
    Ok(ring)
}

/// Lon/lat treated as planar; the local projection is affine so topology is preserved.
fn planar(ring: &Ring) -> Vec<ProjectedPoint> {
    ring.iter().map(|p| ProjectedPoint::new(p.lon, p.lat)).collect()
}

fn parse_polygon(id: &str, v: &Value) -> Result<Polygon, IngestError> {
    let rings = v.as_array().ok_or_else(|| invalid(id, "polygon is not an array of rings"))?;
    if rings.is_empty() {
        return Err(invalid(id, "polygon has no rings"));
    }
    let mut parsed = rings.iter().map(|r| parse_ring(id, r)).collect::<Result<Vec<_>, _>>()?;
    for ring in &parsed {
        if ring_signed_area(&planar(ring)) == 0.0 {
            return Err(invalid(id, "zero-area ring"));
        }
    }
    let exterior = parsed.remove(0);
    if ring_self_intersects(&planar(&exterior)) {
        return Err(invalid(id, "outer ring self-intersects"));
    }
    Ok(Polygon { exterior, holes: parsed })
}

fn feature_id(feature: &Value, config: &ZoneLoadConfig, index: usize) -> Result<String, IngestError> {
    let prop = feature.get("properties").and_then(|p| p.get(&config.id_property));
    let raw = prop.filter(|v| !v.is_null()).or_else(|| feature.get("id"));
    match raw {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(IngestError::Shape {
            context: "zones".into(),
            message: format!("feature {index} has no `{}` property or id", config.id_property),
        }),
    }
}

/// Reads a GeoJSON FeatureCollection of Polygon / MultiPolygon features into zones
/// with empty attributes, sorted by id.
pub fn load_zones(bytes: &[u8], config: &ZoneLoadConfig) -> Result<Vec<Zone>, IngestError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| json_error("zones", bytes, e))?;
    let shape = |m: &str| IngestError::Shape { context: "zones".into(), message: m.into() };
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(shape("expected a FeatureCollection"));
    }
    let features = doc.get("features").and_then(Value::as_array).ok_or_else(|| shape("missing features array"))?;
    let mut seen = BTreeSet::new();
    let mut zones = Vec::with_capacity(features.len());
    for (i, feature) in features.iter().enumerate() {
        let id = feature_id(feature, config, i)?;
        let geom = feature.get("geometry").filter(|g| !g.is_null()).ok_or_else(|| invalid(&id, "null geometry"))?;
        let coords = geom.get("coordinates").ok_or_else(|| invalid(&id, "geometry has no coordinates"))?;
        let polygons = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(&id, coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| invalid(&id, "MultiPolygon coordinates not an array"))?
                .iter()
                .map(|p| parse_polygon(&id, p))
                .collect::<Result<Vec<_>, _>>()?,
            other => return Err(invalid(&id, format!("unsupported geometry type {other:?}"))),
        };
        if polygons.is_empty() {
            return Err(invalid(&id, "no polygons"));
        }
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId { context: "zones".into(), what: "zone", id });
        }
        zones.push(Zone::new(id, polygons));
    }
    zones.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(zones)
}
