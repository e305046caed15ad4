//! Core panel types: metrics, series, website-instances and treatment assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative value {value} at index {index}")]
    NegativeValue { index: usize, value: f64 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("empty series")]
    EmptySeries,
    #[error("unknown {kind} `{value}`")]
    UnknownLabel { kind: &'static str, value: String },
}

/// Observation frequency of a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Weekly,
    Monthly,
}

/// The five user-quantity metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TotalVisits,
    UniqueVisitors,
    PageImpressions,
    #[serde(rename = "time_on_site_min")]
    TimeOnWebsite,
    BouncingVisitors,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::TotalVisits,
        MetricKind::UniqueVisitors,
        MetricKind::PageImpressions,
        MetricKind::TimeOnWebsite,
        MetricKind::BouncingVisitors,
    ];

    pub fn cadence(self) -> Cadence {
        match self {
            MetricKind::UniqueVisitors => Cadence::Monthly,
            _ => Cadence::Weekly,
        }
    }

    /// Column value used in panel CSV files.
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::TotalVisits => "total_visits",
            MetricKind::UniqueVisitors => "unique_visitors",
            MetricKind::PageImpressions => "page_impressions",
            MetricKind::TimeOnWebsite => "time_on_site_min",
            MetricKind::BouncingVisitors => "bouncing_visitors",
        }
    }

    /// The usage-intensity ratio this quantity metric feeds, if any.
    /// Total visits enters every ratio and so owns none of them.
    pub fn intensity(self) -> Option<IntensityMetric> {
        match self {
            MetricKind::TotalVisits => None,
            MetricKind::UniqueVisitors => Some(IntensityMetric::VisitsPerUnique),
            MetricKind::PageImpressions => Some(IntensityMetric::PageImpressionsPerVisit),
            MetricKind::TimeOnWebsite => Some(IntensityMetric::TimePerVisit),
            MetricKind::BouncingVisitors => Some(IntensityMetric::BounceRate),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownLabel {
                kind: "metric",
                value: s.to_string(),
            })
    }
}

/// Usage-intensity metrics, each a ratio of two quantity metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMetric {
    VisitsPerUnique,
    PageImpressionsPerVisit,
    TimePerVisit,
    BounceRate,
}

impl IntensityMetric {
    pub const ALL: [IntensityMetric; 4] = [
        IntensityMetric::VisitsPerUnique,
        IntensityMetric::PageImpressionsPerVisit,
        IntensityMetric::TimePerVisit,
        IntensityMetric::BounceRate,
    ];

    /// (numerator, denominator) quantity metrics of the ratio.
    pub fn ratio(self) -> (MetricKind, MetricKind) {
        match self {
            IntensityMetric::VisitsPerUnique => (MetricKind::TotalVisits, MetricKind::UniqueVisitors),
            IntensityMetric::PageImpressionsPerVisit => {
                (MetricKind::PageImpressions, MetricKind::TotalVisits)
            }
            IntensityMetric::TimePerVisit => (MetricKind::TimeOnWebsite, MetricKind::TotalVisits),
            IntensityMetric::BounceRate => (MetricKind::BouncingVisitors, MetricKind::TotalVisits),
        }
    }

    /// Quantity metric whose sign splits websites into gainers and losers.
    pub fn split_metric(self) -> MetricKind {
        match self {
            IntensityMetric::VisitsPerUnique => MetricKind::UniqueVisitors,
            _ => MetricKind::TotalVisits,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntensityMetric::VisitsPerUnique => "visits_per_unique",
            IntensityMetric::PageImpressionsPerVisit => "page_impressions_per_visit",
            IntensityMetric::TimePerVisit => "time_per_visit",
            IntensityMetric::BounceRate => "bounce_rate",
        }
    }
}

impl fmt::Display for IntensityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Location of a website or of its user base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Base {
    #[serde(rename = "EU")]
    Eu,
    #[serde(rename = "NONEU")]
    NonEu,
}

impl Base {
    pub fn as_str(self) -> &'static str {
        match self {
            Base::Eu => "EU",
            Base::NonEu => "NONEU",
        }
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Base {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EU" => Ok(Base::Eu),
            "NONEU" | "NON-EU" | "NON_EU" => Ok(Base::NonEu),
            _ => Err(ModelError::UnknownLabel {
                kind: "base",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    Treated,
    Control,
}

/// The regulation binds whenever either the website or its users are in the EU.
pub fn assign_treatment(website_base: Base, user_base: Base) -> Treatment {
    match (website_base, user_base) {
        (Base::NonEu, Base::NonEu) => Treatment::Control,
        _ => Treatment::Treated,
    }
}

/// One metric for one unit on a regular calendar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub metric: MetricKind,
    pub cadence: Cadence,
    /// First observation: week start for weekly series, first of month for monthly ones.
    pub start: NaiveDate,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(metric: MetricKind, start: NaiveDate, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptySeries);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(ModelError::NonFinite { index });
            }
            if value < 0.0 {
                return Err(ModelError::NegativeValue { index, value });
            }
        }
        Ok(Self {
            metric,
            cadence: metric.cadence(),
            start,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Replace every value `v` by `ln(v + 1)`.
pub fn log1p_transform(series: &TimeSeries) -> Result<TimeSeries, ModelError> {
    let mut values = Vec::with_capacity(series.values.len());
    for (index, &v) in series.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { index });
        }
        if v < 0.0 {
            return Err(ModelError::NegativeValue { index, value: v });
        }
        values.push(v.ln_1p());
    }
    Ok(TimeSeries {
        values,
        ..series.clone()
    })
}

/// A website observed through one of its two user bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsiteInstance {
    pub instance_id: String,
    pub website_id: String,
    pub user_base: Base,
    pub website_base: Base,
    pub industry: String,
    pub global_rank: u32,
    pub country_rank: u32,
    pub industry_rank: u32,
    pub user_country: String,
    pub series: BTreeMap<MetricKind, TimeSeries>,
}

impl WebsiteInstance {
    pub fn treatment(&self) -> Treatment {
        assign_treatment(self.website_base, self.user_base)
    }

    pub fn is_treated(&self) -> bool {
        self.treatment() == Treatment::Treated
    }

    pub fn series(&self, metric: MetricKind) -> Option<&TimeSeries> {
        self.series.get(&metric)
    }
}
