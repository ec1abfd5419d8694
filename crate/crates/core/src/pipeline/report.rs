//! Report tables: category summaries per mode, usage, population-weighted groups and the
//! Welch comparison matrix. Each table is rendered as CSV (per-resident availability
//! scaled by 100, flagged `_x1e-2` in the header) and as unscaled JSON.

use serde_json::{json, Value};

use crate::diag::Diagnostics;
use crate::metrics::{
    population_weighted, summarize_all, summarize_by_category, CategorySummary, GroupKind, Indicator, OutlierPolicy,
    ZoneMetrics, AVERAGE,
};
use crate::model::{CategoryScheme, IncomeThresholds, Mode, Zone};
use crate::stats::pairwise::{comparison_matrix, ComparisonMatrix, PairwiseConfig, TestCell, MATRIX_INDICATORS};
use crate::stats::Tail;

/// Columns of the availability/accessibility/idle tables.
pub const SUPPLY_INDICATORS: [Indicator; 5] =
    [Indicator::AvailDaily, Indicator::AvailPerResident, Indicator::AvailPerResidentJob, Indicator::Kde, Indicator::IdleMean];

/// Columns of the usage table, per mode.
pub const USAGE_INDICATORS: [Indicator; 3] = [Indicator::Trips, Indicator::TripsPerResident, Indicator::TripsPerResidentJob];

/// Columns of the population-weighted table, per mode.
pub const WEIGHTED_INDICATORS: [Indicator; 2] = [Indicator::AvailDaily, Indicator::Kde];

pub const SCALE_SUFFIX: &str = "_x1e-2";

/// Indicators shown multiplied by 100 in the CSV tables.
pub fn scaled(ind: Indicator) -> bool {
    matches!(ind, Indicator::AvailPerResident | Indicator::AvailPerResidentJob)
}

pub struct ReportContext<'a> {
    pub zones: &'a [Zone],
    pub thresholds: IncomeThresholds,
    pub policy: OutlierPolicy,
    pub alpha: f64,
    pub tail: Tail,
    pub bonferroni: bool,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: &'static str,
    pub csv: String,
    pub json: Value,
}

#[derive(Debug, Default)]
pub struct BuiltTables {
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
    pub diag: Diagnostics,
}

fn cell(v: Option<f64>, scale: bool) -> String {
    match v {
        Some(x) if scale => (x * 100.0).to_string(),
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

fn row_json(summaries: &[(Mode, &CategorySummary)], indicators: &[Indicator]) -> Value {
    let mut values = serde_json::Map::new();
    for (mode, s) in summaries {
        let per: serde_json::Map<String, Value> = indicators
            .iter()
            .map(|i| (i.key().to_string(), json!(s.stats.get(i))))
            .collect();
        values.insert(mode.as_str().to_string(), Value::Object(per));
    }
    json!({ "category": summaries[0].1.category, "zones": summaries[0].1.count, "values": values })
}

fn row_csv(block: &str, summaries: &[(Mode, &CategorySummary)], indicators: &[Indicator]) -> String {
    let mut cells = vec![block.to_string(), summaries[0].1.category.clone(), summaries[0].1.count.to_string()];
    for (_, s) in summaries {
        for i in indicators {
            cells.push(cell(s.mean(*i), scaled(*i)));
            cells.push(cell(s.median(*i), scaled(*i)));
        }
    }
    cells.join(",")
}

/// Header of a category table: block, category, zone count, then mean and median per
/// (mode, indicator).
pub fn category_header(modes: &[Mode], indicators: &[Indicator]) -> Vec<String> {
    let mut h = vec!["block".to_string(), "category".to_string(), "zones".to_string()];
    for m in modes {
        for i in indicators {
            let suffix = if scaled(*i) { SCALE_SUFFIX } else { "" };
            h.push(format!("{m}_{}_mean{suffix}", i.key()));
            h.push(format!("{m}_{}_median{suffix}", i.key()));
        }
    }
    h
}

fn category_table(
    name: &'static str,
    title: &str,
    ctx: &ReportContext,
    inputs: &[(Mode, &[ZoneMetrics])],
    indicators: &[Indicator],
    out: &mut BuiltTables,
) -> Table {
    let modes: Vec<Mode> = inputs.iter().map(|(m, _)| *m).collect();
    let mut csv = category_header(&modes, indicators).join(",");
    csv.push('\n');
    let mut blocks = Vec::new();
    for scheme in CategoryScheme::ALL {
        let per_mode: Vec<_> = inputs
            .iter()
            .map(|(m, rows)| {
                let (s, d) = summarize_by_category(rows, ctx.zones, scheme, &ctx.thresholds, &ctx.policy);
                out.diag.extend(d);
                (*m, s)
            })
            .collect();
        let first = &per_mode[0].1;
        if let Some(u) = &first.unknown {
            out.notes.push(format!("{name}: {} zones without a {} class left out", u.count, scheme.title()));
        }
        let mut rows = Vec::new();
        for (k, r) in first.rows.iter().enumerate() {
            let summaries: Vec<(Mode, &CategorySummary)> = per_mode.iter().map(|(m, s)| (*m, &s.rows[k])).collect();
            debug_assert!(summaries.iter().all(|(_, s)| s.category == r.category));
            csv.push_str(&row_csv(scheme.title(), &summaries, indicators));
            csv.push('\n');
            rows.push(row_json(&summaries, indicators));
        }
        blocks.push(json!({ "block": scheme.title(), "scheme": scheme, "rows": rows }));
    }
    let averages: Vec<(Mode, CategorySummary)> = inputs.iter().map(|(m, rows)| (*m, summarize_all(rows, &ctx.policy))).collect();
    let refs: Vec<(Mode, &CategorySummary)> = averages.iter().map(|(m, s)| (*m, s)).collect();
    csv.push_str(&row_csv(AVERAGE, &refs, indicators));
    csv.push('\n');
    let json = json!({
        "title": title,
        "modes": modes,
        "indicators": indicators.iter().map(|i| i.key()).collect::<Vec<_>>(),
        "blocks": blocks,
        "average": row_json(&refs, indicators),
    });
    Table { name, csv, json }
}

/// Display label of a population-weighted group.
pub fn group_label(kind: GroupKind, group: &str) -> String {
    match kind {
        GroupKind::Race => group.to_string(),
        GroupKind::Income => format!("{group}-income Households"),
    }
}

fn weighted_table(ctx: &ReportContext, inputs: &[(Mode, &[ZoneMetrics])], out: &mut BuiltTables) -> Table {
    let per_mode: Vec<_> = inputs
        .iter()
        .map(|(m, rows)| {
            let (g, d) = population_weighted(rows, ctx.zones, &ctx.thresholds, &ctx.policy, &WEIGHTED_INDICATORS);
            out.diag.extend(d);
            (*m, g)
        })
        .collect();
    let mut header = vec!["group_kind".to_string(), "group".to_string(), "population".to_string()];
    for (m, _) in inputs {
        for i in WEIGHTED_INDICATORS {
            header.push(format!("{m}_{}", i.key()));
        }
    }
    let mut csv = header.join(",");
    csv.push('\n');
    let mut rows = Vec::new();
    for (k, g) in per_mode[0].1.iter().enumerate() {
        let kind = match g.kind {
            GroupKind::Race => "Race",
            GroupKind::Income => "Household Income",
        };
        let mut cells = vec![kind.to_string(), group_label(g.kind, &g.group), g.population.to_string()];
        let mut values = serde_json::Map::new();
        for (m, groups) in &per_mode {
            let same = &groups[k];
            debug_assert_eq!(same.group, g.group);
            for i in WEIGHTED_INDICATORS {
                cells.push(cell(same.values.get(&i).copied().flatten(), false));
            }
            values.insert(
                m.as_str().to_string(),
                WEIGHTED_INDICATORS.iter().map(|i| (i.key().to_string(), json!(same.values.get(i).copied().flatten()))).collect::<serde_json::Map<_, _>>().into(),
            );
        }
        csv.push_str(&cells.join(","));
        csv.push('\n');
        rows.push(json!({ "kind": g.kind, "group": g.group, "label": group_label(g.kind, &g.group), "population": g.population, "values": values }));
    }
    let json = json!({
        "title": "Population-weighted availability and accessibility",
        "modes": inputs.iter().map(|(m, _)| *m).collect::<Vec<_>>(),
        "indicators": WEIGHTED_INDICATORS.iter().map(|i| i.key()).collect::<Vec<_>>(),
        "rows": rows,
    });
    Table { name: "tableA1_weighted", csv, json }
}

/// CSV columns per matrix indicator.
pub fn welch_header(indicators: &[Indicator], bonferroni: bool) -> Vec<String> {
    let mut h = vec!["block".to_string(), "comparison".to_string()];
    for i in indicators {
        let k = i.key();
        h.extend([format!("{k}_t"), format!("{k}_df"), format!("{k}_p"), format!("{k}_significant")]);
        if bonferroni {
            h.push(format!("{k}_significant_bonferroni"));
        }
    }
    h
}

pub fn welch_csv(matrix: &ComparisonMatrix, bonferroni: bool) -> String {
    let mut csv = welch_header(&matrix.indicators, bonferroni).join(",");
    csv.push('\n');
    for row in &matrix.rows {
        let mut cells = vec![row.block.title().to_string(), row.label.clone()];
        for i in &matrix.indicators {
            match row.cells.get(i) {
                Some(TestCell::Computed { result, bonferroni_significant }) => {
                    cells.extend([result.t.to_string(), result.df.to_string(), result.p.to_string(), result.significant.to_string()]);
                    if bonferroni {
                        cells.push(bonferroni_significant.map(|b| b.to_string()).unwrap_or_default());
                    }
                }
                _ => {
                    cells.extend([String::new(), String::new(), String::new(), "NA".to_string()]);
                    if bonferroni {
                        cells.push("NA".into());
                    }
                }
            }
        }
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    csv
}

pub fn build_tables(ctx: &ReportContext, scooter: Option<&[ZoneMetrics]>, bike: Option<&[ZoneMetrics]>) -> BuiltTables {
    let mut out = BuiltTables::default();
    let mut tables = Vec::new();
    if let Some(s) = scooter {
        tables.push(category_table(
            "table1_scooter",
            "E-scooter availability, accessibility and idle time by zone category",
            ctx,
            &[(Mode::Scooter, s)],
            &SUPPLY_INDICATORS,
            &mut out,
        ));
    }
    if let Some(b) = bike {
        tables.push(category_table(
            "table2_bike",
            "Bikeshare availability, accessibility and idle time by zone category",
            ctx,
            &[(Mode::Bike, b)],
            &SUPPLY_INDICATORS,
            &mut out,
        ));
    }
    let present: Vec<(Mode, &[ZoneMetrics])> =
        [(Mode::Scooter, scooter), (Mode::Bike, bike)].into_iter().filter_map(|(m, r)| r.map(|r| (m, r))).collect();
    if !present.is_empty() {
        tables.push(category_table("table3_usage", "Usage by zone category", ctx, &present, &USAGE_INDICATORS, &mut out));
        tables.push(weighted_table(ctx, &present, &mut out));
        let cfg = PairwiseConfig {
            zones: ctx.zones,
            thresholds: &ctx.thresholds,
            policy: &ctx.policy,
            indicators: &MATRIX_INDICATORS,
            alpha: ctx.alpha,
            tail: ctx.tail,
        };
        let mut matrix = comparison_matrix(scooter, bike, &cfg);
        if ctx.bonferroni {
            matrix.apply_bonferroni();
        }
        out.notes.push("tableA2_welch: usage is tested on total trips; per-resident usage is summarized in table3_usage only".into());
        let not_computable = matrix.rows.iter().flat_map(|r| r.cells.values()).filter(|c| c.result().is_none()).count();
        if not_computable > 0 {
            out.notes.push(format!("tableA2_welch: {not_computable} comparisons not computable"));
        }
        tables.push(Table { name: "tableA2_welch", csv: welch_csv(&matrix, ctx.bonferroni), json: serde_json::to_value(&matrix).unwrap() });
    }
    out.tables = tables;
    out
}
