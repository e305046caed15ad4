//! Panel CSV ingestion, sample filters and pre-period instance shares.
//!
//! The input format is one row per (instance, date, metric):
//!
//! ```text
//! instance_id,website_id,user_base,website_base,user_country,industry,
//! global_rank,country_rank,industry_rank,date,metric,value
//! ```
//!
//! A website that shows up in several country top lists produces repeated
//! rows for the same instance with a different `user_country`. Those rows are
//! collapsed onto the listing where the website ranks best.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calendar::{Calendar, ExclusionBand, MonthIndex};
use crate::model::{Base, Cadence, MetricKind, ModelError, TimeSeries, WebsiteInstance};
use crate::stats;

pub const CSV_HEADER: [&str; 12] = [
    "instance_id",
    "website_id",
    "user_base",
    "website_base",
    "user_country",
    "industry",
    "global_rank",
    "country_rank",
    "industry_rank",
    "date",
    "metric",
    "value",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: duplicate observation for {instance_id} {metric} {date} (first seen on line {first_line})")]
    DuplicateObservation {
        line: u64,
        first_line: u64,
        instance_id: String,
        metric: MetricKind,
        date: NaiveDate,
    },
    #[error("line {line}: instance {instance_id} has conflicting `{field}`")]
    ConflictingInstance {
        line: u64,
        instance_id: String,
        field: &'static str,
    },
    #[error("website {website_id} has more than one instance for user base {user_base}")]
    DuplicateInstance { website_id: String, user_base: Base },
    #[error("instance {instance_id} {metric}: gap after {after}")]
    Gap {
        instance_id: String,
        metric: MetricKind,
        after: NaiveDate,
    },
    #[error("instance {instance_id} {metric}: {source}")]
    Series {
        instance_id: String,
        metric: MetricKind,
        #[source]
        source: ModelError,
    },
    #[error("website {0}: pre-period visits are all zero, shares undefined")]
    ZeroPrePeriod(String),
    #[error("website {0} has no instances")]
    UnknownWebsite(String),
}

/// SHA-256 of an input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDigest {
    pub source: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub delimiter: u8,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub instances: BTreeMap<String, WebsiteInstance>,
    pub websites: BTreeMap<String, Vec<String>>,
    pub provenance: Vec<SourceDigest>,
}

impl PanelDataset {
    pub fn from_instances(
        instances: impl IntoIterator<Item = WebsiteInstance>,
    ) -> Result<Self, IngestError> {
        let mut map = BTreeMap::new();
        for inst in instances {
            if map.contains_key(&inst.instance_id) {
                return Err(IngestError::Malformed {
                    line: 0,
                    message: format!("duplicate instance id {}", inst.instance_id),
                });
            }
            map.insert(inst.instance_id.clone(), inst);
        }
        let websites = index_websites(&map)?;
        Ok(Self {
            instances: map,
            websites,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&WebsiteInstance> {
        self.instances.get(id)
    }

    pub fn website_instances(&self, website_id: &str) -> Vec<&WebsiteInstance> {
        self.websites
            .get(website_id)
            .map(|ids| ids.iter().filter_map(|id| self.instances.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn treated(&self) -> impl Iterator<Item = &WebsiteInstance> {
        self.instances.values().filter(|i| i.is_treated())
    }

    pub fn controls(&self) -> impl Iterator<Item = &WebsiteInstance> {
        self.instances.values().filter(|i| !i.is_treated())
    }

    /// Keep only the listed instances; the website index is rebuilt.
    pub fn retain_ids(&self, keep: &BTreeSet<String>) -> PanelDataset {
        let instances: BTreeMap<_, _> = self
            .instances
            .iter()
            .filter(|(id, _)| keep.contains(*id))
            .map(|(id, inst)| (id.clone(), inst.clone()))
            .collect();
        let websites = index_websites(&instances).expect("subset of a valid dataset");
        PanelDataset {
            instances,
            websites,
            provenance: self.provenance.clone(),
        }
    }
}

fn index_websites(
    instances: &BTreeMap<String, WebsiteInstance>,
) -> Result<BTreeMap<String, Vec<String>>, IngestError> {
    let mut websites: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for inst in instances.values() {
        let entry = websites.entry(inst.website_id.clone()).or_default();
        if entry
            .iter()
            .any(|other| instances[other].user_base == inst.user_base)
        {
            return Err(IngestError::DuplicateInstance {
                website_id: inst.website_id.clone(),
                user_base: inst.user_base,
            });
        }
        entry.push(inst.instance_id.clone());
    }
    Ok(websites)
}

pub fn parse_panel(path: &Path, schema: &SchemaConfig) -> Result<PanelDataset, IngestError> {
    let io = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io)?
        .read_to_end(&mut bytes)
        .map_err(io)?;
    let mut ds = parse_panel_bytes(&bytes, schema)?;
    ds.provenance = vec![SourceDigest {
        source: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    }];
    Ok(ds)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Listing {
    user_country: String,
    country_rank: u32,
    industry_rank: u32,
}

struct PendingInstance {
    website_id: String,
    user_base: Base,
    website_base: Base,
    industry: String,
    global_rank: u32,
    listing: Listing,
    obs: BTreeMap<(MetricKind, NaiveDate), (f64, String, u64)>,
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'a str, IngestError> {
    rec.get(idx).map(str::trim).ok_or_else(|| IngestError::Malformed {
        line,
        message: format!("missing column `{name}`"),
    })
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T, IngestError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| IngestError::Malformed {
        line,
        message: format!("bad `{name}` value `{raw}`: {e}"),
    })
}

fn positive_rank(raw: &str, name: &str, line: u64) -> Result<u32, IngestError> {
    let r: u32 = parse_field(raw, name, line)?;
    if r == 0 {
        return Err(IngestError::Malformed {
            line,
            message: format!("`{name}` must be positive"),
        });
    }
    Ok(r)
}

/// Parse panel CSV content already held in memory.
pub fn parse_panel_bytes(bytes: &[u8], schema: &SchemaConfig) -> Result<PanelDataset, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);

    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return Err(IngestError::Malformed {
                line: 1,
                message: e.to_string(),
            })
        }
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(PanelDataset::default());
    }
    let mut col = [0usize; 12];
    for (slot, name) in col.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::Malformed {
                line: 1,
                message: format!("missing column `{name}` in header"),
            })?;
    }

    let mut pending: BTreeMap<String, PendingInstance> = BTreeMap::new();
    for result in reader.records() {
        let rec = result.map_err(|e| IngestError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| field(&rec, col[i], CSV_HEADER[i], line);

        let instance_id = get(0)?.to_string();
        let website_id = get(1)?.to_string();
        if instance_id.is_empty() || website_id.is_empty() {
            return Err(IngestError::Malformed {
                line,
                message: "empty identifier".into(),
            });
        }
        let user_base: Base = parse_field(get(2)?, "user_base", line)?;
        let website_base: Base = parse_field(get(3)?, "website_base", line)?;
        let user_country = get(4)?.to_string();
        let industry = get(5)?.to_string();
        let global_rank = positive_rank(get(6)?, "global_rank", line)?;
        let country_rank = positive_rank(get(7)?, "country_rank", line)?;
        let industry_rank = positive_rank(get(8)?, "industry_rank", line)?;
        let date: NaiveDate = parse_field(get(9)?, "date", line)?;
        let metric: MetricKind = parse_field(get(10)?, "metric", line)?;
        let value: f64 = parse_field(get(11)?, "value", line)?;
        if !value.is_finite() || value < 0.0 {
            return Err(IngestError::Malformed {
                line,
                message: format!("value must be a non-negative number, got {value}"),
            });
        }
        let date = match metric.cadence() {
            Cadence::Weekly => date,
            Cadence::Monthly => date.with_day(1).expect("day one exists"),
        };

        let entry = pending
            .entry(instance_id.clone())
            .or_insert_with(|| PendingInstance {
                website_id: website_id.clone(),
                user_base,
                website_base,
                industry: industry.clone(),
                global_rank,
                listing: Listing {
                    user_country: user_country.clone(),
                    country_rank,
                    industry_rank,
                },
                obs: BTreeMap::new(),
            });
        let conflict = |field: &'static str| IngestError::ConflictingInstance {
            line,
            instance_id: instance_id.clone(),
            field,
        };
        if entry.website_id != website_id {
            return Err(conflict("website_id"));
        }
        if entry.user_base != user_base {
            return Err(conflict("user_base"));
        }
        if entry.website_base != website_base {
            return Err(conflict("website_base"));
        }
        if entry.industry != industry {
            return Err(conflict("industry"));
        }
        if entry.global_rank != global_rank {
            return Err(conflict("global_rank"));
        }
        if country_rank < entry.listing.country_rank {
            entry.listing = Listing {
                user_country: user_country.clone(),
                country_rank,
                industry_rank,
            };
        }

        match entry.obs.get(&(metric, date)) {
            None => {
                entry.obs.insert((metric, date), (value, user_country, line));
            }
            Some((prev, prev_country, first_line)) => {
                // Same observation repeated by another country listing.
                let collapsible = *prev_country != user_country && *prev == value;
                if !collapsible {
                    return Err(IngestError::DuplicateObservation {
                        line,
                        first_line: *first_line,
                        instance_id,
                        metric,
                        date,
                    });
                }
            }
        }
    }

    let mut instances = Vec::with_capacity(pending.len());
    for (instance_id, p) in pending {
        let mut by_metric: BTreeMap<MetricKind, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        for ((metric, date), (value, _, _)) in p.obs {
            by_metric.entry(metric).or_default().push((date, value));
        }
        let mut series = BTreeMap::new();
        for (metric, points) in by_metric {
            // BTreeMap ordering already sorts by date within a metric.
            for pair in points.windows(2) {
                let (a, b) = (pair[0].0, pair[1].0);
                let contiguous = match metric.cadence() {
                    Cadence::Weekly => b - a == Duration::days(7),
                    Cadence::Monthly => MonthIndex::of(b).0 - MonthIndex::of(a).0 == 1,
                };
                if !contiguous {
                    return Err(IngestError::Gap {
                        instance_id,
                        metric,
                        after: a,
                    });
                }
            }
            let start = points[0].0;
            let values = points.into_iter().map(|(_, v)| v).collect();
            let s = TimeSeries::new(metric, start, values).map_err(|source| IngestError::Series {
                instance_id: instance_id.clone(),
                metric,
                source,
            })?;
            series.insert(metric, s);
        }
        instances.push(WebsiteInstance {
            instance_id,
            website_id: p.website_id,
            user_base: p.user_base,
            website_base: p.website_base,
            industry: p.industry,
            global_rank: p.global_rank,
            country_rank: p.listing.country_rank,
            industry_rank: p.listing.industry_rank,
            user_country: p.listing.user_country,
            series,
        });
    }
    PanelDataset::from_instances(instances)
}

/// Write a dataset in the panel CSV schema, ordered by instance, metric, date.
pub fn write_panel<W: Write>(dataset: &PanelDataset, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for inst in dataset.instances.values() {
        for s in inst.series.values() {
            for (i, v) in s.values.iter().enumerate() {
                let date = match s.cadence {
                    Cadence::Weekly => s.start + Duration::days(7 * i as i64),
                    Cadence::Monthly => MonthIndex(MonthIndex::of(s.start).0 + i as i32).first_day(),
                };
                w.write_record([
                    inst.instance_id.as_str(),
                    inst.website_id.as_str(),
                    inst.user_base.as_str(),
                    inst.website_base.as_str(),
                    inst.user_country.as_str(),
                    inst.industry.as_str(),
                    &inst.global_rank.to_string(),
                    &inst.country_rank.to_string(),
                    &inst.industry_rank.to_string(),
                    &date.to_string(),
                    s.metric.as_str(),
                    &v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    BelowThreshold,
    MonthlyGap,
    Outlier,
    BelowUniqueFloor,
    MissingUniqueVisitors,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub instance_id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: String,
    pub input: usize,
    pub excluded: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub output: usize,
    pub rules: Vec<RuleOutcome>,
    pub excluded: Vec<Exclusion>,
}

impl FilterReport {
    fn new(input: usize) -> Self {
        Self {
            input,
            output: input,
            ..Self::default()
        }
    }

    fn record(&mut self, rule: &str, input: usize, mut dropped: Vec<Exclusion>) {
        dropped.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let excluded = dropped.len();
        self.rules.push(RuleOutcome {
            rule: rule.to_string(),
            input,
            excluded,
            retained: input - excluded,
        });
        self.output = input - excluded;
        self.excluded.extend(dropped);
    }
}

/// Flags an instance whose weekly visit path contains an unexplained spike or drop.
pub trait OutlierRule: Send + Sync {
    fn name(&self) -> &str;
    fn is_outlier(&self, visits: &TimeSeries) -> bool;
}

/// Rolling-median / MAD rule on log visits: flag when at least `min_run`
/// consecutive weeks deviate from the centred rolling median by more than
/// `threshold` median absolute deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingMadRule {
    pub window: usize,
    pub threshold: f64,
    pub min_run: usize,
}

impl Default for RollingMadRule {
    fn default() -> Self {
        Self {
            window: 9,
            threshold: 6.0,
            min_run: 2,
        }
    }
}

impl OutlierRule for RollingMadRule {
    fn name(&self) -> &str {
        "rolling_mad"
    }

    fn is_outlier(&self, visits: &TimeSeries) -> bool {
        let logs: Vec<f64> = visits.values.iter().map(|v| v.ln_1p()).collect();
        let n = logs.len();
        if n < self.window.max(3) {
            return false;
        }
        let half = self.window / 2;
        let resid: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(n);
                logs[i] - stats::median(&logs[lo..hi]).unwrap()
            })
            .collect();
        let center = stats::median(&resid).unwrap();
        let abs_dev: Vec<f64> = resid.iter().map(|r| (r - center).abs()).collect();
        let mad = stats::median(&abs_dev).unwrap();
        let mut run = 0;
        for r in &resid {
            if (r - center).abs() > self.threshold * mad {
                run += 1;
                if run >= self.min_run {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutlierRuleConfig {
    Off,
    RollingMad(RollingMadRule),
}

impl Default for OutlierRuleConfig {
    fn default() -> Self {
        OutlierRuleConfig::RollingMad(RollingMadRule::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_avg_weekly_visits: f64,
    pub outlier_rule: OutlierRuleConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_avg_weekly_visits: 1000.0,
            outlier_rule: OutlierRuleConfig::default(),
        }
    }
}

/// Mean weekly total visits over the whole observed series (0 when absent).
pub fn mean_weekly_visits(inst: &WebsiteInstance) -> f64 {
    inst.series(MetricKind::TotalVisits)
        .and_then(|s| stats::mean(&s.values))
        .unwrap_or(0.0)
}

/// True when some full calendar month inside the series has no visits at
/// all, i.e. every week touching that month is zero.
pub fn has_zero_month(visits: &TimeSeries, calendar: &Calendar) -> bool {
    if visits.cadence != Cadence::Weekly || visits.is_empty() {
        return false;
    }
    let first_week = calendar.week_of(visits.start);
    let last_week = first_week + visits.len() as i64 - 1;
    let begin = calendar.week_start(first_week);
    let end = calendar.week_end(last_week);
    let mut m = MonthIndex::of(begin);
    if begin.day() != 1 {
        m = m.next();
    }
    while m.last_day() <= end {
        let w0 = calendar.week_of(m.first_day());
        let w1 = calendar.week_of(m.last_day());
        if (w0..=w1).all(|w| visits.values[(w - first_week) as usize] == 0.0) {
            return true;
        }
        m = m.next();
    }
    false
}

pub fn apply_filters(
    dataset: &PanelDataset,
    config: &FilterConfig,
    calendar: &Calendar,
) -> (PanelDataset, FilterReport) {
    match config.outlier_rule {
        OutlierRuleConfig::Off => {
            apply_filters_with(dataset, config.min_avg_weekly_visits, None, calendar)
        }
        OutlierRuleConfig::RollingMad(rule) => {
            apply_filters_with(dataset, config.min_avg_weekly_visits, Some(&rule), calendar)
        }
    }
}

/// Sequential sample filters: average weekly visits, zero-visit months,
/// then the outlier rule (if any).
pub fn apply_filters_with(
    dataset: &PanelDataset,
    min_avg_weekly_visits: f64,
    outlier_rule: Option<&dyn OutlierRule>,
    calendar: &Calendar,
) -> (PanelDataset, FilterReport) {
    let mut report = FilterReport::new(dataset.len());
    let mut survivors: Vec<&WebsiteInstance> = dataset.instances.values().collect();

    // strict "<": an instance sitting exactly at the threshold stays
    survivors = run_rule(
        &mut report,
        "below_threshold",
        ExclusionReason::BelowThreshold,
        survivors,
        &|i| mean_weekly_visits(i) < min_avg_weekly_visits,
    );
    survivors = run_rule(
        &mut report,
        "monthly_gap",
        ExclusionReason::MonthlyGap,
        survivors,
        &|i| {
            i.series(MetricKind::TotalVisits)
                .is_some_and(|s| has_zero_month(s, calendar))
        },
    );
    if let Some(rule) = outlier_rule {
        survivors = run_rule(&mut report, rule.name(), ExclusionReason::Outlier, survivors, &|i| {
            i.series(MetricKind::TotalVisits)
                .is_some_and(|s| rule.is_outlier(s))
        });
    }

    let keep: BTreeSet<String> = survivors.iter().map(|i| i.instance_id.clone()).collect();
    (dataset.retain_ids(&keep), report)
}

fn run_rule<'a>(
    report: &mut FilterReport,
    name: &str,
    reason: ExclusionReason,
    survivors: Vec<&'a WebsiteInstance>,
    drop: &(dyn Fn(&WebsiteInstance) -> bool + Sync),
) -> Vec<&'a WebsiteInstance> {
    let input = survivors.len();
    let flags: Vec<bool> = survivors.par_iter().map(|i| drop(i)).collect();
    let mut kept = Vec::with_capacity(input);
    let mut dropped = Vec::new();
    for (inst, flag) in survivors.into_iter().zip(flags) {
        if flag {
            dropped.push(Exclusion {
                instance_id: inst.instance_id.clone(),
                reason,
            });
        } else {
            kept.push(inst);
        }
    }
    report.record(name, input, dropped);
    kept
}

/// Instances whose monthly unique visitors never fall below `floor`.
pub fn unique_visitor_subsample(dataset: &PanelDataset, floor: f64) -> (PanelDataset, FilterReport) {
    let mut report = FilterReport::new(dataset.len());
    let mut keep = BTreeSet::new();
    let mut dropped = Vec::new();
    for inst in dataset.instances.values() {
        match inst.series(MetricKind::UniqueVisitors) {
            None => dropped.push(Exclusion {
                instance_id: inst.instance_id.clone(),
                reason: ExclusionReason::MissingUniqueVisitors,
            }),
            Some(s) if s.values.iter().any(|&v| v < floor) => dropped.push(Exclusion {
                instance_id: inst.instance_id.clone(),
                reason: ExclusionReason::BelowUniqueFloor,
            }),
            Some(_) => {
                keep.insert(inst.instance_id.clone());
            }
        }
    }
    report.record("below_unique_floor", dataset.len(), dropped);
    (dataset.retain_ids(&keep), report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceShare {
    pub instance_id: String,
    pub user_base: Base,
    pub share: f64,
}

/// Relative pre-period size of each instance of one website.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceShares {
    pub website_id: String,
    pub shares: Vec<InstanceShare>,
}

impl InstanceShares {
    fn share_of(&self, base: Base) -> f64 {
        self.shares
            .iter()
            .filter(|s| s.user_base == base)
            .map(|s| s.share)
            .sum()
    }

    pub fn share_eu(&self) -> f64 {
        self.share_of(Base::Eu)
    }

    pub fn share_noneu(&self) -> f64 {
        self.share_of(Base::NonEu)
    }

    pub fn get(&self, instance_id: &str) -> Option<f64> {
        self.shares
            .iter()
            .find(|s| s.instance_id == instance_id)
            .map(|s| s.share)
    }
}

/// Pre-period mean of raw weekly total visits.
pub fn pre_mean_visits(inst: &WebsiteInstance, calendar: &Calendar, band: Option<&ExclusionBand>) -> f64 {
    inst.series(MetricKind::TotalVisits)
        .and_then(|s| {
            let idx = calendar.pre_indices(s, band);
            let vals: Vec<f64> = idx.iter().map(|&i| s.values[i]).collect();
            stats::mean(&vals)
        })
        .unwrap_or(0.0)
}

/// Shares of pre-period total visits among the given instances of one website.
pub fn pre_treatment_shares(
    instances: &[&WebsiteInstance],
    calendar: &Calendar,
    band: Option<&ExclusionBand>,
) -> Result<InstanceShares, IngestError> {
    let website_id = instances
        .first()
        .map(|i| i.website_id.clone())
        .ok_or_else(|| IngestError::UnknownWebsite(String::new()))?;
    let means: Vec<f64> = instances
        .iter()
        .map(|i| pre_mean_visits(i, calendar, band))
        .collect();
    let total: f64 = means.iter().sum();
    if total <= 0.0 {
        return Err(IngestError::ZeroPrePeriod(website_id));
    }
    let shares = instances
        .iter()
        .zip(&means)
        .map(|(i, m)| InstanceShare {
            instance_id: i.instance_id.clone(),
            user_base: i.user_base,
            share: m / total,
        })
        .collect();
    Ok(InstanceShares { website_id, shares })
}

/// Pre-period share of a website's traffic coming from EU users (0 when the
/// website has no EU-user instance).
pub fn eu_traffic_share(dataset: &PanelDataset, website_id: &str, calendar: &Calendar) -> f64 {
    let insts = dataset.website_instances(website_id);
    pre_treatment_shares(&insts, calendar, None)
        .map(|s| s.share_eu())
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn weekly(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new(MetricKind::TotalVisits, date(2017, 7, 1), values).unwrap()
    }

    fn instance(id: &str, website: &str, user: Base, site: Base, visits: Vec<f64>) -> WebsiteInstance {
        let mut series = BTreeMap::new();
        series.insert(MetricKind::TotalVisits, weekly(visits));
        WebsiteInstance {
            instance_id: id.into(),
            website_id: website.into(),
            user_base: user,
            website_base: site,
            industry: "news".into(),
            global_rank: 10,
            country_rank: 3,
            industry_rank: 2,
            user_country: "DE".into(),
            series,
        }
    }

    fn header() -> String {
        CSV_HEADER.join(",") + "\n"
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_panel_bytes(b"", &SchemaConfig::default()).unwrap();
        assert!(ds.is_empty());
        let ds = parse_panel_bytes(header().as_bytes(), &SchemaConfig::default()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn country_list_duplicates_collapse_to_one_website() {
        let mut csv = header();
        // the same instance listed under 13 different countries
        for (k, country) in ["DE", "FR", "IT", "ES", "NL", "AT", "BE", "PL", "SE", "DK", "HU", "CH", "US"]
            .iter()
            .enumerate()
        {
            for w in 0..3 {
                let d = date(2017, 7, 1) + Duration::days(7 * w);
                csv.push_str(&format!(
                    "g-eu,google.com,EU,NONEU,{country},search,1,{},1,{d},total_visits,{}\n",
                    k + 1,
                    1000 + w
                ));
            }
        }
        let ds = parse_panel_bytes(csv.as_bytes(), &SchemaConfig::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.websites.len(), 1);
        let inst = ds.get("g-eu").unwrap();
        assert_eq!(inst.user_country, "DE");
        assert_eq!(inst.country_rank, 1);
        assert_eq!(inst.series(MetricKind::TotalVisits).unwrap().values, vec![1000.0, 1001.0, 1002.0]);
    }

    #[test]
    fn duplicate_observation_rejected() {
        let mut csv = header();
        csv.push_str("a,w,EU,EU,DE,news,1,1,1,2017-07-01,total_visits,5\n");
        csv.push_str("a,w,EU,EU,DE,news,1,1,1,2017-07-01,total_visits,5\n");
        let err = parse_panel_bytes(csv.as_bytes(), &SchemaConfig::default()).unwrap_err();
        assert!(matches!(err, IngestError::DuplicateObservation { line: 3, first_line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let mut csv = header();
        csv.push_str("a,w,EU,EU,DE,news,1,1,1,2017-07-01,total_visits,5\n");
        csv.push_str("a,w,EU,EU,DE,news,1,1,1,2017-07-08,total_visits,abc\n");
        let err = parse_panel_bytes(csv.as_bytes(), &SchemaConfig::default()).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { line: 3, .. }), "{err}");
        let mut csv = header();
        csv.push_str("a,w,EU,XX,DE,news,1,1,1,2017-07-01,total_visits,5\n");
        assert!(matches!(
            parse_panel_bytes(csv.as_bytes(), &SchemaConfig::default()),
            Err(IngestError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn gaps_are_rejected() {
        let mut csv = header();
        csv.push_str("a,w,EU,EU,DE,news,1,1,1,2017-07-01,total_visits,5\n");
        csv.push_str("a,w,EU,EU,DE,news,1,1,1,2017-07-15,total_visits,5\n");
        assert!(matches!(
            parse_panel_bytes(csv.as_bytes(), &SchemaConfig::default()),
            Err(IngestError::Gap { .. })
        ));
    }

    #[test]
    fn threshold_is_strict() {
        let cal = Calendar::default();
        let ds = PanelDataset::from_instances(vec![
            instance("a", "wa", Base::Eu, Base::Eu, vec![999.0; 125]),
            instance("b", "wb", Base::Eu, Base::Eu, vec![1000.0; 125]),
        ])
        .unwrap();
        let (out, report) = apply_filters(&ds, &FilterConfig::default(), &cal);
        assert_eq!(out.instances.keys().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(
            report.excluded,
            vec![Exclusion {
                instance_id: "a".into(),
                reason: ExclusionReason::BelowThreshold
            }]
        );
    }

    #[test]
    fn zero_month_excluded() {
        let cal = Calendar::default();
        let mut v = vec![5000.0; 125];
        for w in cal.week_of(date(2018, 3, 1))..=cal.week_of(date(2018, 3, 31)) {
            v[(w - 1) as usize] = 0.0;
        }
        // zeros only strictly inside the month do not prove a visit-free month
        let mut partial = vec![5000.0; 125];
        for w in cal.week_of(date(2018, 3, 1)) + 1..cal.week_of(date(2018, 3, 31)) {
            partial[(w - 1) as usize] = 0.0;
        }
        let ds = PanelDataset::from_instances(vec![
            instance("a", "wa", Base::Eu, Base::Eu, v),
            instance("b", "wb", Base::Eu, Base::Eu, partial),
        ])
        .unwrap();
        let cfg = FilterConfig {
            outlier_rule: OutlierRuleConfig::Off,
            ..FilterConfig::default()
        };
        let (out, report) = apply_filters(&ds, &cfg, &cal);
        assert_eq!(out.len(), 1);
        assert_eq!(report.excluded[0].reason, ExclusionReason::MonthlyGap);
        assert_eq!(report.excluded[0].instance_id, "a");
    }

    #[test]
    fn outlier_rule_flags_two_week_spike_only() {
        let rule = RollingMadRule::default();
        let base: Vec<f64> = (0..125).map(|i| 10_000.0 * (1.0 + 0.05 * ((i * 7 % 11) as f64 / 11.0))).collect();
        assert!(!rule.is_outlier(&weekly(base.clone())));
        let mut one = base.clone();
        one[60] *= 20.0;
        assert!(!rule.is_outlier(&weekly(one)));
        let mut two = base.clone();
        two[60] *= 20.0;
        two[61] *= 20.0;
        assert!(rule.is_outlier(&weekly(two)));
        // a permanent level shift is not an outlier
        let mut shift = base;
        for v in &mut shift[60..] {
            *v *= 0.5;
        }
        assert!(!rule.is_outlier(&weekly(shift)));
    }

    #[test]
    fn report_counts_add_up_and_filters_are_idempotent() {
        let cal = Calendar::default();
        let mut spike = vec![5000.0; 125];
        spike[10] = 1e7;
        spike[11] = 1e7;
        let ds = PanelDataset::from_instances(vec![
            instance("a", "wa", Base::Eu, Base::Eu, vec![10.0; 125]),
            instance("b", "wb", Base::Eu, Base::Eu, spike),
            instance("c", "wc", Base::NonEu, Base::NonEu, vec![2000.0; 125]),
        ])
        .unwrap();
        let (out, report) = apply_filters(&ds, &FilterConfig::default(), &cal);
        assert_eq!(report.input - report.output, report.excluded.len());
        for r in &report.rules {
            assert_eq!(r.input, r.excluded + r.retained);
        }
        assert_eq!(out.len(), 1);
        let (again, report2) = apply_filters(&out, &FilterConfig::default(), &cal);
        assert_eq!(again.instances.keys().collect::<Vec<_>>(), out.instances.keys().collect::<Vec<_>>());
        assert!(report2.excluded.is_empty());
    }

    fn with_uniques(mut inst: WebsiteInstance, uniques: Vec<f64>) -> WebsiteInstance {
        inst.series.insert(
            MetricKind::UniqueVisitors,
            TimeSeries::new(MetricKind::UniqueVisitors, date(2017, 7, 1), uniques).unwrap(),
        );
        inst
    }

    #[test]
    fn unique_floor() {
        let mut dip = vec![6000.0; 28];
        dip[5] = 4999.0;
        let ds = PanelDataset::from_instances(vec![
            with_uniques(instance("a", "wa", Base::Eu, Base::Eu, vec![1.0; 4]), vec![5000.0; 28]),
            with_uniques(instance("b", "wb", Base::Eu, Base::Eu, vec![1.0; 4]), dip),
            instance("c", "wc", Base::Eu, Base::Eu, vec![1.0; 4]),
        ])
        .unwrap();
        let (sub, report) = unique_visitor_subsample(&ds, 5000.0);
        assert_eq!(sub.instances.keys().collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(report.excluded.len(), 2);
        assert_eq!(report.excluded[1].reason, ExclusionReason::MissingUniqueVisitors);

        let (none, _) = unique_visitor_subsample(&ds, 1e9);
        assert!(none.is_empty());
    }

    #[test]
    fn shares() {
        let cal = Calendar::default();
        let eu = instance("z-eu", "zeit.de", Base::Eu, Base::Eu, vec![9894.0; 125]);
        let non = instance("z-non", "zeit.de", Base::NonEu, Base::Eu, vec![106.0; 125]);
        let s = pre_treatment_shares(&[&eu, &non], &cal, None).unwrap();
        assert!((s.share_eu() - 0.9894).abs() < 1e-12);
        assert!((s.share_noneu() - 0.0106).abs() < 1e-12);
        assert!((s.share_eu() + s.share_noneu() - 1.0).abs() < 1e-12);

        let single = pre_treatment_shares(&[&eu], &cal, None).unwrap();
        assert_eq!(single.shares[0].share, 1.0);

        let a = instance("a", "w", Base::Eu, Base::Eu, vec![50.0; 125]);
        let b = instance("b", "w", Base::NonEu, Base::Eu, vec![50.0; 125]);
        let s = pre_treatment_shares(&[&a, &b], &cal, None).unwrap();
        assert_eq!((s.share_eu(), s.share_noneu()), (0.5, 0.5));

        let zero = instance("z", "w", Base::Eu, Base::Eu, vec![0.0; 125]);
        assert!(matches!(
            pre_treatment_shares(&[&zero], &cal, None),
            Err(IngestError::ZeroPrePeriod(_))
        ));
    }

    #[test]
    fn at_most_one_instance_per_user_base() {
        let a = instance("a", "w", Base::Eu, Base::Eu, vec![1.0]);
        let b = instance("b", "w", Base::Eu, Base::Eu, vec![1.0]);
        assert!(matches!(
            PanelDataset::from_instances(vec![a, b]),
            Err(IngestError::DuplicateInstance { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn shares_sum_to_one(a in 0.0f64..1e9, b in 1.0f64..1e9) {
            let cal = Calendar::default();
            let x = instance("x", "w", Base::Eu, Base::Eu, vec![a; 60]);
            let y = instance("y", "w", Base::NonEu, Base::Eu, vec![b; 60]);
            let s = pre_treatment_shares(&[&x, &y], &cal, None).unwrap();
            proptest::prop_assert!((s.share_eu() + s.share_noneu() - 1.0).abs() <= 1e-12);
        }
    }
}
