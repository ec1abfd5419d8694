use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{find_column, IngestError};
use crate::diag::Diagnostics;
use crate::model::Zone;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeConfig {
    pub delimiter: u8,
    /// Length of the zone id prefix of a block id (12 for US block groups).
    pub block_prefix_len: usize,
    /// Header prefix marking race/ethnicity count columns, e.g. `race_White`.
    pub race_prefix: String,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        AttributeConfig { delimiter: b',', block_prefix_len: 12, race_prefix: "race_".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsRow {
    pub zone_id: String,
    pub population: u64,
    pub median_income: Option<f64>,
    pub race_counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobsRow {
    pub block_id: String,
    pub jobs: u64,
}

const ZONE_ID_ALIASES: [&str; 4] = ["GEOID", "zone_id", "id", "geoid"];

fn aliases(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn reader(bytes: &[u8], delimiter: u8) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(bytes)
}

fn csv_err(context: &str) -> impl Fn(csv::Error) -> IngestError + '_ {
    move |e| IngestError::Csv { context: context.into(), message: e.to_string() }
}

fn schema(context: &str, message: String) -> IngestError {
    IngestError::Schema { context: context.into(), message }
}

fn parse_count(context: &str, line: usize, column: &str, text: &str) -> Result<u64, IngestError> {
    let t = text.trim();
    if t.is_empty() {
        return Ok(0);
    }
    let v: f64 = t.parse().map_err(|_| schema(context, format!("line {line}: {column}={t:?} is not a number")))?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(schema(context, format!("line {line}: {column}={t} is not a non-negative count")));
    }
    Ok(v as u64)
}

/// Demographics table: zone id, `population`, `median_income` (blank, `NA` or a negative
/// census sentinel means missing) and one count column per race label.
pub fn parse_demographics(bytes: &[u8], config: &AttributeConfig) -> Result<Vec<DemographicsRow>, IngestError> {
    let context = "demographics";
    let mut rdr = reader(bytes, config.delimiter);
    let headers = rdr.headers().map_err(csv_err(context))?.clone();
    let c_id = find_column(&headers, &aliases(&ZONE_ID_ALIASES))
        .ok_or_else(|| schema(context, "no zone id column".into()))?;
    let c_pop = find_column(&headers, &aliases(&["population", "total_population", "pop"]))
        .ok_or_else(|| schema(context, "no population column".into()))?;
    let c_inc = find_column(&headers, &aliases(&["median_income", "median_household_income", "income"]));
    let race_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.trim().strip_prefix(config.race_prefix.as_str()).map(|l| (i, l.to_string())))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(csv_err(context))?;
        let id = rec.get(c_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(schema(context, format!("line {line}: empty zone id")));
        }
        let population = parse_count(context, line, "population", rec.get(c_pop).unwrap_or(""))?;
        let median_income = c_inc.and_then(|c| rec.get(c)).and_then(|t| {
            let t = t.trim();
            t.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0)
        });
        let mut race_counts = BTreeMap::new();
        for (c, label) in &race_cols {
            race_counts.insert(label.clone(), parse_count(context, line, label, rec.get(*c).unwrap_or(""))?);
        }
        out.push(DemographicsRow { zone_id: id, population, median_income, race_counts });
    }
    Ok(out)
}

/// Jobs table keyed by sub-zone (block) id.
pub fn parse_jobs(bytes: &[u8], config: &AttributeConfig) -> Result<Vec<JobsRow>, IngestError> {
    let context = "jobs";
    let mut rdr = reader(bytes, config.delimiter);
    let headers = rdr.headers().map_err(csv_err(context))?.clone();
    let c_id = find_column(&headers, &aliases(&["block_id", "w_geocode", "GEOID", "id"]))
        .ok_or_else(|| schema(context, "no block id column".into()))?;
    let c_jobs = find_column(&headers, &aliases(&["jobs", "C000", "total_jobs"]))
        .ok_or_else(|| schema(context, "no jobs column".into()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(context))?;
        let block_id = rec.get(c_id).unwrap_or("").to_string();
        if block_id.is_empty() {
            return Err(schema(context, format!("line {}: empty block id", i + 2)));
        }
        out.push(JobsRow { block_id, jobs: parse_count(context, i + 2, "jobs", rec.get(c_jobs).unwrap_or(""))? });
    }
    Ok(out)
}

/// Single-column id list (EEA membership). Uses a known id header or the first column.
pub fn parse_id_list(bytes: &[u8], delimiter: u8) -> Result<Vec<String>, IngestError> {
    let context = "id list";
    let mut rdr = reader(bytes, delimiter);
    let headers = rdr.headers().map_err(csv_err(context))?.clone();
    let c = find_column(&headers, &aliases(&ZONE_ID_ALIASES)).unwrap_or(0);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(context))?;
        if let Some(id) = rec.get(c).filter(|s| !s.is_empty()) {
            out.push(id.to_string());
        }
    }
    Ok(out)
}

/// Joins demographics, block-level jobs and the EEA list onto zone geometries.
/// Output is sorted by zone id and independent of input row order.
pub fn attach_attributes(
    zones: Vec<Zone>,
    demographics: &[DemographicsRow],
    jobs: &[JobsRow],
    eea_ids: &[String],
    config: &AttributeConfig,
) -> Result<(Vec<Zone>, Diagnostics), IngestError> {
    let mut diag = Diagnostics::new();
    let mut by_id: BTreeMap<String, Zone> = zones.into_iter().map(|z| (z.id.clone(), z)).collect();

    let mut seen = BTreeSet::new();
    let mut demo_rows: Vec<&DemographicsRow> = demographics.iter().collect();
    demo_rows.sort_by(|a, b| a.zone_id.cmp(&b.zone_id));
    for row in demo_rows {
        if !seen.insert(row.zone_id.as_str()) {
            return Err(IngestError::DuplicateId { context: "demographics".into(), what: "zone", id: row.zone_id.clone() });
        }
        let Some(zone) = by_id.get_mut(&row.zone_id) else {
            diag.warn("attribute_unknown_zone", format!("demographics row for zone {} has no geometry", row.zone_id));
            continue;
        };
        let race_total: u64 = row.race_counts.values().sum();
        if row.population == 0 && race_total > 0 {
            return Err(IngestError::Validation(format!(
                "zone {}: population 0 with {race_total} residents counted by race",
                row.zone_id
            )));
        }
        if race_total > row.population {
            return Err(IngestError::Validation(format!(
                "zone {}: race counts sum to {race_total}, above population {}",
                row.zone_id, row.population
            )));
        }
        zone.population = row.population;
        zone.median_income = row.median_income;
        zone.race_shares = if row.population > 0 {
            let p = row.population as f64;
            Some(row.race_counts.iter().map(|(k, v)| (k.clone(), *v as f64 / p)).collect())
        } else {
            None
        };
    }
    for id in by_id.keys() {
        if !seen.contains(id.as_str()) {
            diag.warn("zone_missing_demographics", format!("zone {id} has no demographics; classified Unknown"));
        }
    }

    let mut job_totals: BTreeMap<&str, u64> = BTreeMap::new();
    for row in jobs {
        let prefix = row.block_id.get(..config.block_prefix_len).unwrap_or(&row.block_id);
        *job_totals.entry(prefix).or_insert(0) += row.jobs;
    }
    for (prefix, total) in job_totals {
        match by_id.get_mut(prefix) {
            Some(zone) => zone.jobs = total,
            None => diag.warn("attribute_unknown_zone", format!("jobs for zone prefix {prefix} have no geometry")),
        }
    }

    for id in eea_ids.iter().collect::<BTreeSet<_>>() {
        match by_id.get_mut(id) {
            Some(zone) => zone.eea = true,
            None => diag.warn("attribute_unknown_zone", format!("EEA list names unknown zone {id}")),
        }
    }

    let zones: Vec<Zone> = by_id.into_values().collect();
    for z in &zones {
        z.validate().map_err(|e| IngestError::Validation(e.to_string()))?;
    }
    Ok((zones, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeoPoint, Polygon};

    fn zone(id: &str) -> Zone {
        let ring = vec![
            GeoPoint { lon: 0.0, lat: 0.0 },
            GeoPoint { lon: 1.0, lat: 0.0 },
            GeoPoint { lon: 1.0, lat: 1.0 },
            GeoPoint { lon: 0.0, lat: 0.0 },
        ];
        Zone::new(id, vec![Polygon { exterior: ring, holes: vec![] }])
    }

    fn cfg() -> AttributeConfig {
        AttributeConfig { block_prefix_len: 1, ..AttributeConfig::default() }
    }

    #[test]
    fn shares_jobs_and_eea() {
        let demo = parse_demographics(b"GEOID,population,median_income,race_White,race_Black\nA,1000,52000,600,300\nB,10,,0,0\n", &cfg()).unwrap();
        let jobs = parse_jobs(b"block_id,jobs\nA1,50\nA2,70\nB1,3\n", &cfg()).unwrap();
        let eea = parse_id_list(b"GEOID\nB\n", b',').unwrap();
        let (zones, diag) = attach_attributes(vec![zone("B"), zone("A")], &demo, &jobs, &eea, &cfg()).unwrap();
        assert!(diag.is_empty(), "{diag:?}");
        let a = &zones[0];
        assert_eq!(a.id, "A");
        assert_eq!(a.race_shares.as_ref().unwrap()["White"], 0.6);
        assert_eq!(a.jobs, 120);
        assert!(!a.eea);
        assert!(zones[1].eea);
        assert_eq!(zones[1].median_income, None);
    }

    #[test]
    fn missing_demographics_flagged() {
        let (zones, diag) = attach_attributes(vec![zone("A")], &[], &[], &[], &cfg()).unwrap();
        assert_eq!(zones[0].race_shares, None);
        assert_eq!(diag.count("zone_missing_demographics"), 1);
    }

    #[test]
    fn unknown_zone_in_attributes_warns() {
        let demo = parse_demographics(b"GEOID,population\nZ,5\n", &cfg()).unwrap();
        let (_, diag) = attach_attributes(vec![zone("A")], &demo, &[], &["Q".into()], &cfg()).unwrap();
        assert_eq!(diag.count("attribute_unknown_zone"), 2);
    }

    #[test]
    fn zero_population_with_race_counts() {
        let demo = parse_demographics(b"GEOID,population,race_White\nA,0,4\n", &cfg()).unwrap();
        assert!(matches!(attach_attributes(vec![zone("A")], &demo, &[], &[], &cfg()), Err(IngestError::Validation(_))));
    }

    #[test]
    fn census_sentinel_income_is_missing() {
        let demo = parse_demographics(b"GEOID,population,median_income\nA,5,-666666666\n", &cfg()).unwrap();
        assert_eq!(demo[0].median_income, None);
    }

    #[test]
    fn duplicate_demographics_rejected() {
        let demo = parse_demographics(b"GEOID,population\nA,5\nA,6\n", &cfg()).unwrap();
        assert!(attach_attributes(vec![zone("A")], &demo, &[], &[], &cfg()).is_err());
    }

    #[test]
    fn order_insensitive() {
        let demo = parse_demographics(b"GEOID,population,race_X\nA,10,6\nB,20,5\nC,30,30\n", &cfg()).unwrap();
        let jobs = parse_jobs(b"block_id,jobs\nA1,1\nB1,2\nA2,3\nC9,4\n", &cfg()).unwrap();
        let eea: Vec<String> = vec!["C".into(), "A".into()];
        let zs = || vec![zone("A"), zone("B"), zone("C")];
        let (base, _) = attach_attributes(zs(), &demo, &jobs, &eea, &cfg()).unwrap();
        let mut d2 = demo.clone();
        d2.reverse();
        let mut j2 = jobs.clone();
        j2.rotate_left(2);
        let mut e2 = eea.clone();
        e2.reverse();
        let mut z2 = zs();
        z2.reverse();
        let (shuffled, _) = attach_attributes(z2, &d2, &j2, &e2, &cfg()).unwrap();
        assert_eq!(base, shuffled);
    }
}
