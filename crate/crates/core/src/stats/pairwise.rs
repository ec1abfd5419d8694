//! Category-pair comparison matrix: every pair of zone categories per mode, plus
//! scooter against bike within each category.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{welch_t_tailed, Tail, WelchResult};
use crate::metrics::{group_by_category, Indicator, OutlierPolicy, ZoneMetrics};
use crate::model::{CategoryScheme, IncomeThresholds, Zone, NO_MAJORITY};

/// Indicator columns of the comparison matrix, in display order.
pub const MATRIX_INDICATORS: [Indicator; 6] = [
    Indicator::AvailDaily,
    Indicator::AvailPerResident,
    Indicator::AvailPerResidentJob,
    Indicator::Kde,
    Indicator::IdleMean,
    Indicator::Trips,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Scooter,
    Bike,
    ScooterVsBike,
}

impl Block {
    pub fn title(self) -> &'static str {
        match self {
            Block::Scooter => "E-scooters",
            Block::Bike => "Bikeshare",
            Block::ScooterVsBike => "E-scooters vs Bikeshare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TestCell {
    Computed {
        #[serde(flatten)]
        result: WelchResult,
        /// Significance after Bonferroni adjustment over the whole matrix, when requested.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bonferroni_significant: Option<bool>,
    },
    NotComputable {
        reason: String,
    },
}

impl TestCell {
    pub fn result(&self) -> Option<&WelchResult> {
        match self {
            TestCell::Computed { result, .. } => Some(result),
            TestCell::NotComputable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub block: Block,
    pub scheme: CategoryScheme,
    pub label: String,
    pub cells: BTreeMap<Indicator, TestCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub alpha: f64,
    pub tail: Tail,
    pub indicators: Vec<Indicator>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonMatrix {
    /// Re-marks significance at a new level; the statistics are unchanged.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        for row in &mut self.rows {
            for cell in row.cells.values_mut() {
                if let TestCell::Computed { result, bonferroni_significant } = cell {
                    *result = result.with_alpha(alpha);
                    if bonferroni_significant.is_some() {
                        *bonferroni_significant = None;
                    }
                }
            }
        }
        self
    }

    pub fn computed(&self) -> usize {
        self.rows.iter().flat_map(|r| r.cells.values()).filter(|c| c.result().is_some()).count()
    }

    /// Adds Bonferroni-adjusted significance, dividing α by the number of computed tests.
    pub fn apply_bonferroni(&mut self) {
        let m = self.computed().max(1) as f64;
        let level = self.alpha / m;
        for row in &mut self.rows {
            for cell in row.cells.values_mut() {
                if let TestCell::Computed { result, bonferroni_significant } = cell {
                    *bonferroni_significant = Some(result.p < level);
                }
            }
        }
    }
}

/// Display label of a category inside comparison rows.
pub fn category_label(scheme: CategoryScheme, category: &str) -> String {
    match scheme {
        CategoryScheme::IncomeBand => format!("{category}-income"),
        _ => category.to_string(),
    }
}

/// Categories in comparison order: EEA before Non-EEA, income bands ascending,
/// Black then White majorities, other majorities, No-Majority last.
pub fn comparison_categories<'a, I: IntoIterator<Item = &'a str>>(scheme: CategoryScheme, present: I) -> Vec<String> {
    let mut cats: Vec<String> = match scheme {
        CategoryScheme::EeaStatus => vec!["EEA".into(), "Non-EEA".into()],
        CategoryScheme::IncomeBand => vec!["Low".into(), "Middle".into(), "High".into()],
        CategoryScheme::RacialComposition => vec!["Black-Majority".into(), "White-Majority".into()],
    };
    if scheme == CategoryScheme::RacialComposition {
        let mut extra: Vec<String> = present
            .into_iter()
            .filter(|c| !cats.iter().any(|k| k == c) && *c != NO_MAJORITY && *c != crate::model::UNKNOWN)
            .map(str::to_string)
            .collect();
        extra.sort();
        extra.dedup();
        cats.extend(extra);
        cats.push(NO_MAJORITY.into());
    }
    cats
}

fn values(members: Option<&Vec<&ZoneMetrics>>, ind: Indicator) -> Vec<f64> {
    members.map(|m| m.iter().filter_map(|z| z.value(ind)).collect()).unwrap_or_default()
}

fn test(a: &[f64], b: &[f64], alpha: f64, tail: Tail) -> TestCell {
    if a.len() < 2 || b.len() < 2 {
        return TestCell::NotComputable { reason: format!("need at least 2 zones per side (got {} and {})", a.len(), b.len()) };
    }
    match welch_t_tailed(a, b, alpha, tail) {
        Ok(result) => TestCell::Computed { result, bonferroni_significant: None },
        Err(e) => TestCell::NotComputable { reason: e.to_string() },
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PairwiseConfig<'a> {
    pub zones: &'a [Zone],
    pub thresholds: &'a IncomeThresholds,
    pub policy: &'a OutlierPolicy,
    pub indicators: &'a [Indicator],
    pub alpha: f64,
    pub tail: Tail,
}

/// Every category pair `(i, j)` with `i` before `j` in comparison order, for one mode.
pub fn pairwise_tests(metrics: &[ZoneMetrics], scheme: CategoryScheme, block: Block, cfg: &PairwiseConfig) -> Vec<ComparisonRow> {
    let groups = group_by_category(metrics, cfg.zones, scheme, cfg.thresholds, cfg.policy);
    let cats = comparison_categories(scheme, groups.keys().map(String::as_str));
    let mut rows = Vec::new();
    for i in 0..cats.len() {
        for j in i + 1..cats.len() {
            let (a, b) = (groups.get(&cats[i]), groups.get(&cats[j]));
            let cells = cfg
                .indicators
                .iter()
                .map(|&ind| (ind, test(&values(a, ind), &values(b, ind), cfg.alpha, cfg.tail)))
                .collect();
            rows.push(ComparisonRow {
                block,
                scheme,
                label: format!("{} vs {}", category_label(scheme, &cats[i]), category_label(scheme, &cats[j])),
                cells,
            });
        }
    }
    rows
}

/// Scooter against bike values within each category of the scheme.
pub fn cross_mode_tests(
    scooter: &[ZoneMetrics],
    bike: &[ZoneMetrics],
    scheme: CategoryScheme,
    cfg: &PairwiseConfig,
) -> Vec<ComparisonRow> {
    let gs = group_by_category(scooter, cfg.zones, scheme, cfg.thresholds, cfg.policy);
    let gb = group_by_category(bike, cfg.zones, scheme, cfg.thresholds, cfg.policy);
    let cats = comparison_categories(scheme, gs.keys().chain(gb.keys()).map(String::as_str));
    cats.iter()
        .map(|c| {
            let cells = cfg
                .indicators
                .iter()
                .map(|&ind| (ind, test(&values(gs.get(c), ind), &values(gb.get(c), ind), cfg.alpha, cfg.tail)))
                .collect();
            ComparisonRow { block: Block::ScooterVsBike, scheme, label: format!("Within {}", category_label(scheme, c)), cells }
        })
        .collect()
}

/// The full matrix: per-mode blocks for each scheme, then the cross-mode block when both modes exist.
pub fn comparison_matrix(scooter: Option<&[ZoneMetrics]>, bike: Option<&[ZoneMetrics]>, cfg: &PairwiseConfig) -> ComparisonMatrix {
    let mut rows = Vec::new();
    for (block, metrics) in [(Block::Scooter, scooter), (Block::Bike, bike)] {
        if let Some(m) = metrics {
            for scheme in CategoryScheme::ALL {
                rows.extend(pairwise_tests(m, scheme, block, cfg));
            }
        }
    }
    if let (Some(s), Some(b)) = (scooter, bike) {
        for scheme in CategoryScheme::ALL {
            rows.extend(cross_mode_tests(s, b, scheme, cfg));
        }
    }
    ComparisonMatrix { alpha: cfg.alpha, tail: cfg.tail, indicators: cfg.indicators.to_vec(), rows }
}
