//! Summary tables over website effects: overall, by industry, by popularity
//! decile and by country.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::WindowLabel;
use crate::effects::{WebsiteEffect, SIGNIFICANCE_LEVEL};
use crate::model::MetricKind;
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("no ranks to split into deciles")]
    EmptyRanks,
    #[error("rank must be positive")]
    NonPositiveRank,
}

/// Descriptive attributes of a website used for grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsiteAttributes {
    pub website_id: String,
    pub industry: String,
    pub country: String,
    pub global_rank: u32,
    pub country_rank: u32,
    pub industry_rank: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKind {
    Global,
    Country,
    Industry,
}

impl RankKind {
    pub const ALL: [RankKind; 3] = [RankKind::Global, RankKind::Country, RankKind::Industry];

    fn of(self, a: &WebsiteAttributes) -> u32 {
        match self {
            RankKind::Global => a.global_rank,
            RankKind::Country => a.country_rank,
            RankKind::Industry => a.industry_rank,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RankKind::Global => "global_rank",
            RankKind::Country => "country_rank",
            RankKind::Industry => "industry_rank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "rank", rename_all = "snake_case")]
pub enum Grouping {
    All,
    Industry,
    Decile(RankKind),
    Country,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    /// Grouping dimension, e.g. `all`, `industry`, `decile_global_rank`.
    pub cohort: String,
    /// Group value within the dimension.
    pub group: String,
    pub metric: MetricKind,
    pub window: WindowLabel,
    pub n: usize,
    pub mean_delta: f64,
    pub median_delta: f64,
    pub share_negative: f64,
    pub share_significant: f64,
}

/// Decile 1..=10 for each rank, in input order. Low rank numbers are the
/// most popular. A rank on a decile edge takes the lower decile; equal ranks
/// share the decile of their first sorted position.
pub fn assign_deciles(ranks: &[u32]) -> Result<Vec<u8>, CohortError> {
    if ranks.is_empty() {
        return Err(CohortError::EmptyRanks);
    }
    if ranks.contains(&0) {
        return Err(CohortError::NonPositiveRank);
    }
    let n = ranks.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ranks[i]);
    let mut out = vec![0u8; n];
    let mut first_of: BTreeMap<u32, u8> = BTreeMap::new();
    for (pos, &i) in order.iter().enumerate() {
        let d = ((pos + 1) * 10).div_ceil(n) as u8;
        out[i] = *first_of.entry(ranks[i]).or_insert(d);
    }
    Ok(out)
}

fn summary_row(cohort: &str, group: &str, metric: MetricKind, window: WindowLabel, items: &[&WebsiteEffect]) -> CohortSummary {
    let deltas: Vec<f64> = items.iter().map(|e| e.delta).collect();
    let n = deltas.len();
    CohortSummary {
        cohort: cohort.to_string(),
        group: group.to_string(),
        metric,
        window,
        n,
        mean_delta: stats::mean(&deltas).unwrap_or(f64::NAN),
        median_delta: stats::median(&deltas).unwrap_or(f64::NAN),
        share_negative: deltas.iter().filter(|d| **d < 0.0).count() as f64 / n as f64,
        share_significant: items.iter().filter(|e| e.p_value < SIGNIFICANCE_LEVEL).count() as f64 / n as f64,
    }
}

/// Cohort rows for every (metric, window) in `effects`, sorted by metric,
/// window, then group. Websites without attributes are skipped for
/// attribute-based groupings.
pub fn summarize(
    effects: &[WebsiteEffect],
    attributes: &BTreeMap<String, WebsiteAttributes>,
    grouping: Grouping,
) -> Result<Vec<CohortSummary>, CohortError> {
    let mut cells: BTreeMap<(MetricKind, WindowLabel), Vec<&WebsiteEffect>> = BTreeMap::new();
    for e in effects {
        cells.entry((e.metric, e.window)).or_default().push(e);
    }
    let deciles: BTreeMap<&str, u8> = match grouping {
        Grouping::Decile(kind) => {
            let sites: Vec<&WebsiteAttributes> = attributes.values().collect();
            if sites.is_empty() {
                BTreeMap::new()
            } else {
                let ranks: Vec<u32> = sites.iter().map(|a| kind.of(a)).collect();
                let d = assign_deciles(&ranks)?;
                sites.iter().map(|a| a.website_id.as_str()).zip(d).collect()
            }
        }
        _ => BTreeMap::new(),
    };
    let cohort_name = match grouping {
        Grouping::All => "all".to_string(),
        Grouping::Industry => "industry".to_string(),
        Grouping::Country => "country".to_string(),
        Grouping::Decile(k) => format!("decile_{}", k.as_str()),
    };

    let mut rows = Vec::new();
    for ((metric, window), items) in cells {
        let mut groups: BTreeMap<String, Vec<&WebsiteEffect>> = BTreeMap::new();
        for e in items {
            let key = match grouping {
                Grouping::All => Some("all".to_string()),
                Grouping::Industry => attributes.get(&e.website_id).map(|a| a.industry.clone()),
                Grouping::Country => attributes.get(&e.website_id).map(|a| a.country.clone()),
                Grouping::Decile(_) => deciles.get(e.website_id.as_str()).map(|d| format!("{d:02}")),
            };
            if let Some(k) = key {
                groups.entry(k).or_default().push(e);
            }
        }
        for (group, members) in groups {
            rows.push(summary_row(&cohort_name, &group, metric, window, &members));
        }
    }
    Ok(rows)
}

/// One point of a tidy plot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: String,
    pub y: f64,
}

/// Mean effect per window for each (cohort, group, metric): one series per
/// group with windows on the x axis.
pub fn plot_series(rows: &[CohortSummary]) -> Vec<PlotPoint> {
    let mut out: Vec<PlotPoint> = rows
        .iter()
        .map(|r| PlotPoint {
            series: format!("{}/{}/{}", r.cohort, r.metric, r.group),
            x: r.window.to_string(),
            y: r.mean_delta,
        })
        .collect();
    out.sort_by(|a, b| a.series.cmp(&b.series));
    out
}
