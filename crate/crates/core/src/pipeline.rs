//! End-to-end estimation: donor selection, synthetic control, per-window
//! effects, inference, website merging and intensity effects.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{Calendar, CalendarError, ExclusionBand, MonthIndex, WindowLabel, WindowSpan};
use crate::cohorts::WebsiteAttributes;
use crate::effects::{self, EffectEstimate, IntensityEffect, WebsiteEffect};
use crate::ingest::{self, FilterConfig, FilterReport, PanelDataset};
use crate::model::{Cadence, MetricKind, TimeSeries, WebsiteInstance};
use crate::synth::{self, Candidate, DonorPool, DonorSettings, SynthWeights};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no treated instances in the dataset")]
    NoTreated,
    #[error("no usable control instances for metric {0}")]
    NoControls(MetricKind),
    #[error(transparent)]
    Calendar(#[from] CalendarError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMethod {
    #[default]
    Hc1,
    Placebo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub method: InferenceMethod,
    /// Number of control instances refitted as pseudo-treated.
    pub n_placebo: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            method: InferenceMethod::Hc1,
            n_placebo: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub calendar: Calendar,
    pub filters: FilterConfig,
    pub donors: DonorSettings,
    pub inference: InferenceConfig,
    pub windows: Vec<WindowLabel>,
    pub metrics: Vec<MetricKind>,
    /// Instances with any month of unique visitors below this are dropped
    /// from the unique-visitor estimates.
    pub unique_visitor_floor: f64,
    pub exclusion_band: Option<ExclusionBand>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            calendar: Calendar::default(),
            filters: FilterConfig::default(),
            donors: DonorSettings::default(),
            inference: InferenceConfig::default(),
            windows: WindowLabel::ALL.to_vec(),
            metrics: MetricKind::ALL.to_vec(),
            unique_visitor_floor: 5000.0,
            exclusion_band: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.windows.is_empty() {
            return Err(PipelineError::Config("windows: at least one window label required".into()));
        }
        if self.metrics.is_empty() {
            return Err(PipelineError::Config("metrics: at least one metric required".into()));
        }
        if self.donors.k == 0 {
            return Err(PipelineError::Config("donors.k: must be at least 1".into()));
        }
        if let synth::DonorMatching::EuShare { tolerance } = self.donors.matching {
            if !(tolerance >= 0.0) {
                return Err(PipelineError::Config("donors.matching.tolerance: must be non-negative".into()));
            }
        }
        if self.inference.method == InferenceMethod::Placebo && self.inference.n_placebo == 0 {
            return Err(PipelineError::Config("inference.n_placebo: must be at least 1".into()));
        }
        if !(self.unique_visitor_floor >= 0.0) {
            return Err(PipelineError::Config("unique_visitor_floor: must be non-negative".into()));
        }
        Ok(())
    }
}

/// A unit of work that could not be estimated, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub instance_id: String,
    pub metric: MetricKind,
    pub window: Option<WindowLabel>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub instance_id: String,
    pub metric: MetricKind,
    pub pool: DonorPool,
    pub weights: SynthWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboSummary {
    pub metric: MetricKind,
    pub requested: usize,
    pub used: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EstimationOutput {
    pub instance_effects: Vec<EffectEstimate>,
    pub website_effects: Vec<WebsiteEffect>,
    pub intensity_effects: Vec<IntensityEffect>,
    pub synth_fits: Vec<SynthRecord>,
    pub failures: Vec<Failure>,
    pub placebo: Vec<PlaceboSummary>,
    pub unique_subsample: Option<FilterReport>,
    pub attributes: BTreeMap<String, WebsiteAttributes>,
}

/// Periods common to all instances of one cadence: the full pre-period
/// through the end of the longest requested window.
struct Grid {
    start: i64,
    len: usize,
    pre: Vec<usize>,
    spans: BTreeMap<WindowLabel, WindowSpan>,
}

fn period_of(cadence: Cadence, calendar: &Calendar, series: &TimeSeries) -> i64 {
    match cadence {
        Cadence::Weekly => calendar.week_of(series.start),
        Cadence::Monthly => i64::from(MonthIndex::of(series.start).0),
    }
}

fn build_grid(
    cadence: Cadence,
    calendar: &Calendar,
    windows: &[WindowLabel],
    band: Option<&ExclusionBand>,
) -> Result<Grid, CalendarError> {
    let analysis = calendar.windows(windows);
    let (start, end, start_date) = match cadence {
        Cadence::Weekly => {
            let end = analysis.iter().map(|w| w.post_end_week).max().unwrap_or(1);
            (1, end, calendar.week_start(1))
        }
        Cadence::Monthly => {
            let first = calendar.first_month();
            let end = analysis
                .iter()
                .map(|w| calendar.last_month_in(w))
                .max()
                .unwrap_or(first);
            (i64::from(first.0), i64::from(end.0), first.first_day())
        }
    };
    let len = (end - start + 1).max(0) as usize;
    let metric = match cadence {
        Cadence::Weekly => MetricKind::TotalVisits,
        Cadence::Monthly => MetricKind::UniqueVisitors,
    };
    let template = TimeSeries {
        metric,
        cadence,
        start: start_date,
        values: vec![0.0; len],
    };
    let mut spans = BTreeMap::new();
    for w in &analysis {
        spans.insert(w.label, calendar.span(&template, w, band)?);
    }
    let pre = calendar.pre_indices(&template, band);
    Ok(Grid {
        start,
        len,
        pre,
        spans,
    })
}

/// One instance's log series on the grid.
struct Prepared<'a> {
    inst: &'a WebsiteInstance,
    eu_share: f64,
    grid: Vec<f64>,
    pre: Vec<f64>,
}

fn prepare<'a>(
    inst: &'a WebsiteInstance,
    metric: MetricKind,
    calendar: &Calendar,
    grid: &Grid,
    eu_share: f64,
) -> Result<Prepared<'a>, String> {
    let series = inst
        .series(metric)
        .ok_or_else(|| format!("no {metric} series"))?;
    let first = period_of(metric.cadence(), calendar, series);
    let offset = grid.start - first;
    let last = first + series.len() as i64 - 1;
    if offset < 0 || last < grid.start + grid.len as i64 - 1 {
        return Err(format!(
            "series covers periods {first}..={last}, analysis needs {}..={}",
            grid.start,
            grid.start + grid.len as i64 - 1
        ));
    }
    let values: Vec<f64> = series.values[offset as usize..offset as usize + grid.len]
        .iter()
        .map(|v| v.ln_1p())
        .collect();
    let pre = grid.pre.iter().map(|&i| values[i]).collect();
    Ok(Prepared {
        inst,
        eu_share,
        grid: values,
        pre,
    })
}

/// Result of fitting one (pseudo-)treated unit.
struct UnitFit {
    record: SynthRecord,
    per_window: Vec<(WindowLabel, Result<effects::DidFit, String>)>,
}

fn fit_unit(
    unit: &Prepared<'_>,
    controls: &[Prepared<'_>],
    metric: MetricKind,
    settings: &DonorSettings,
    grid: &Grid,
) -> Result<UnitFit, String> {
    let pool: Vec<Candidate<'_>> = controls
        .iter()
        .filter(|c| c.inst.website_id != unit.inst.website_id)
        .map(|c| Candidate {
            instance_id: &c.inst.instance_id,
            industry: &c.inst.industry,
            eu_share: c.eu_share,
            pre: &c.pre,
        })
        .collect();
    let treated = Candidate {
        instance_id: &unit.inst.instance_id,
        industry: &unit.inst.industry,
        eu_share: unit.eu_share,
        pre: &unit.pre,
    };
    let selected = synth::select_donors(&treated, &pool, settings.k, settings.matching).map_err(|e| e.to_string())?;
    let by_id: BTreeMap<&str, &Prepared<'_>> = controls.iter().map(|c| (c.inst.instance_id.as_str(), c)).collect();
    let donors: Vec<&Prepared<'_>> = selected.donor_ids.iter().map(|id| by_id[id.as_str()]).collect();
    let donor_pre: Vec<&[f64]> = donors.iter().map(|d| d.pre.as_slice()).collect();
    let weights = synth::fit_weights(&unit.pre, &donor_pre, &selected.donor_ids, settings.mode).map_err(|e| e.to_string())?;
    let donor_grid: Vec<&[f64]> = donors.iter().map(|d| d.grid.as_slice()).collect();
    let synthetic = synth::synthesize(&weights, &donor_grid).map_err(|e| e.to_string())?;
    let per_window = grid
        .spans
        .iter()
        .map(|(label, span)| {
            (
                *label,
                effects::estimate_effect(&unit.grid, &synthetic, span).map_err(|e| e.to_string()),
            )
        })
        .collect();
    Ok(UnitFit {
        record: SynthRecord {
            instance_id: unit.inst.instance_id.clone(),
            metric,
            pool: selected,
            weights,
        },
        per_window,
    })
}

fn metric_seed(seed: u64, metric: MetricKind) -> u64 {
    let tag = MetricKind::ALL.iter().position(|m| *m == metric).unwrap_or(0) as u64;
    seed ^ (tag + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct MetricRun {
    effects: Vec<EffectEstimate>,
    fits: Vec<SynthRecord>,
    failures: Vec<Failure>,
    placebo: Option<(PlaceboSummary, BTreeMap<WindowLabel, Vec<f64>>)>,
}

fn run_metric(
    dataset: &PanelDataset,
    metric: MetricKind,
    config: &PipelineConfig,
    eu_shares: &BTreeMap<&str, f64>,
) -> Result<MetricRun, PipelineError> {
    let calendar = &config.calendar;
    let grid = build_grid(
        metric.cadence(),
        calendar,
        &config.windows,
        config.exclusion_band.as_ref(),
    )?;
    let share_of = |inst: &WebsiteInstance| eu_shares.get(inst.website_id.as_str()).copied().unwrap_or(0.0);

    let instances: Vec<&WebsiteInstance> = dataset.instances.values().collect();
    let prepared: Vec<Result<Prepared<'_>, String>> = instances
        .par_iter()
        .map(|inst| prepare(inst, metric, calendar, &grid, share_of(inst)))
        .collect();

    let mut failures = Vec::new();
    let mut controls = Vec::new();
    let mut treated = Vec::new();
    for (inst, p) in instances.iter().zip(prepared) {
        match p {
            Ok(p) if inst.is_treated() => treated.push(p),
            Ok(p) => controls.push(p),
            Err(reason) => failures.push(Failure {
                instance_id: inst.instance_id.clone(),
                metric,
                window: None,
                reason,
            }),
        }
    }
    if controls.is_empty() {
        return Err(PipelineError::NoControls(metric));
    }

    let fits: Vec<Result<UnitFit, String>> = treated
        .par_iter()
        .map(|t| fit_unit(t, &controls, metric, &config.donors, &grid))
        .collect();

    let mut effects_out = Vec::new();
    let mut records = Vec::new();
    for (t, fit) in treated.iter().zip(fits) {
        match fit {
            Err(reason) => failures.push(Failure {
                instance_id: t.inst.instance_id.clone(),
                metric,
                window: None,
                reason,
            }),
            Ok(fit) => {
                for (label, res) in fit.per_window {
                    match res {
                        Ok(did) => effects_out.push(EffectEstimate::from_fit(
                            &t.inst.website_id,
                            &t.inst.instance_id,
                            metric,
                            label,
                            did,
                        )),
                        Err(reason) => failures.push(Failure {
                            instance_id: t.inst.instance_id.clone(),
                            metric,
                            window: Some(label),
                            reason,
                        }),
                    }
                }
                records.push(fit.record);
            }
        }
    }

    let placebo = if config.inference.method == InferenceMethod::Placebo {
        let mut order: Vec<usize> = (0..controls.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(metric_seed(config.inference.seed, metric));
        order.shuffle(&mut rng);
        let requested = config.inference.n_placebo;
        order.truncate(requested);
        order.sort_unstable();
        let placebo_fits: Vec<Result<UnitFit, String>> = order
            .par_iter()
            .map(|&i| fit_unit(&controls[i], &controls, metric, &config.donors, &grid))
            .collect();
        let mut betas: BTreeMap<WindowLabel, Vec<f64>> = BTreeMap::new();
        let mut used = 0;
        for fit in placebo_fits.into_iter().flatten() {
            used += 1;
            for (label, res) in fit.per_window {
                if let Ok(did) = res {
                    betas.entry(label).or_default().push(did.beta3);
                }
            }
        }
        for e in &mut effects_out {
            let dist = betas.get(&e.window).map(Vec::as_slice).unwrap_or(&[]);
            *e = e.clone().with_p_value(effects::placebo_p_value(e.beta3, dist));
        }
        Some((
            PlaceboSummary {
                metric,
                requested,
                used,
                shortfall: requested.saturating_sub(used),
            },
            betas,
        ))
    } else {
        None
    };

    Ok(MetricRun {
        effects: effects_out,
        fits: records,
        failures,
        placebo,
    })
}

/// Attributes of each website, taken from its treated instance with the
/// largest pre-period share of traffic.
pub fn website_attributes(dataset: &PanelDataset, calendar: &Calendar) -> BTreeMap<String, WebsiteAttributes> {
    let mut out = BTreeMap::new();
    for (website_id, ids) in &dataset.websites {
        let treated: Vec<&WebsiteInstance> = ids
            .iter()
            .filter_map(|id| dataset.get(id))
            .filter(|i| i.is_treated())
            .collect();
        if treated.is_empty() {
            continue;
        }
        let main = match ingest::pre_treatment_shares(&treated, calendar, None) {
            Ok(shares) => {
                let best = shares
                    .shares
                    .iter()
                    .max_by(|a, b| a.share.total_cmp(&b.share).then(b.instance_id.cmp(&a.instance_id)))
                    .map(|s| s.instance_id.clone());
                best.and_then(|id| dataset.get(&id)).unwrap_or(treated[0])
            }
            Err(_) => treated[0],
        };
        out.insert(
            website_id.clone(),
            WebsiteAttributes {
                website_id: website_id.clone(),
                industry: main.industry.clone(),
                country: main.user_country.clone(),
                global_rank: main.global_rank,
                country_rank: main.country_rank,
                industry_rank: main.industry_rank,
            },
        );
    }
    out
}

/// Merge instance effects into website effects for every
/// (website, metric, window). Shares come from pre-period total visits of
/// the website's treated instances that have an effect in that cell.
pub fn merge_all(
    dataset: &PanelDataset,
    effects: &[EffectEstimate],
    calendar: &Calendar,
    band: Option<&ExclusionBand>,
) -> (Vec<WebsiteEffect>, Vec<Failure>) {
    let mut cells: BTreeMap<(&str, MetricKind, WindowLabel), Vec<&EffectEstimate>> = BTreeMap::new();
    for e in effects {
        cells
            .entry((e.website_id.as_str(), e.metric, e.window))
            .or_default()
            .push(e);
    }
    let mut merged = Vec::new();
    let mut failures = Vec::new();
    for ((site, metric, window), items) in cells {
        let insts: Vec<&WebsiteInstance> = items.iter().filter_map(|e| dataset.get(&e.instance_id)).collect();
        let result = ingest::pre_treatment_shares(&insts, calendar, band)
            .map_err(|e| e.to_string())
            .and_then(|shares| effects::merge_website(&items, &shares).map_err(|e| e.to_string()));
        match result {
            Ok(w) => merged.push(w),
            Err(reason) => failures.push(Failure {
                instance_id: site.to_string(),
                metric,
                window: Some(window),
                reason,
            }),
        }
    }
    (merged, failures)
}

/// Run the estimation stack on an already filtered dataset.
pub fn run_estimation(dataset: &PanelDataset, config: &PipelineConfig) -> Result<EstimationOutput, PipelineError> {
    config.validate()?;
    if dataset.treated().next().is_none() {
        return Err(PipelineError::NoTreated);
    }
    let calendar = &config.calendar;
    let needs_shares = matches!(config.donors.matching, synth::DonorMatching::EuShare { .. });

    let mut metrics: Vec<MetricKind> = config.metrics.clone();
    metrics.sort();
    metrics.dedup();

    let mut out = EstimationOutput::default();
    let unique_subsample = metrics
        .contains(&MetricKind::UniqueVisitors)
        .then(|| ingest::unique_visitor_subsample(dataset, config.unique_visitor_floor));

    let mut all_effects = Vec::new();
    let mut placebo_betas: BTreeMap<(MetricKind, WindowLabel), Vec<f64>> = BTreeMap::new();
    for &metric in &metrics {
        let ds = match (&unique_subsample, metric) {
            (Some((sub, _)), MetricKind::UniqueVisitors) => sub,
            _ => dataset,
        };
        let eu_shares: BTreeMap<&str, f64> = if needs_shares {
            ds.websites
                .keys()
                .map(|w| (w.as_str(), ingest::eu_traffic_share(ds, w, calendar)))
                .collect()
        } else {
            BTreeMap::new()
        };
        let run = match run_metric(ds, metric, config, &eu_shares) {
            Ok(run) => run,
            Err(PipelineError::NoControls(m)) if metric == MetricKind::UniqueVisitors => {
                out.failures.push(Failure {
                    instance_id: String::new(),
                    metric: m,
                    window: None,
                    reason: "no control instances in the unique-visitor subsample".into(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        all_effects.extend(run.effects);
        out.synth_fits.extend(run.fits);
        out.failures.extend(run.failures);
        if let Some((summary, betas)) = run.placebo {
            out.placebo.push(summary);
            for (w, b) in betas {
                placebo_betas.insert((metric, w), b);
            }
        }
    }
    all_effects.sort_by(|a, b| {
        (&a.website_id, &a.instance_id, a.metric, a.window).cmp(&(&b.website_id, &b.instance_id, b.metric, b.window))
    });

    let (mut merged, merge_failures) = merge_all(dataset, &all_effects, calendar, config.exclusion_band.as_ref());
    if config.inference.method == InferenceMethod::Placebo {
        for w in &mut merged {
            let dist = placebo_betas
                .get(&(w.metric, w.window))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            *w = w.clone().with_p_value(effects::placebo_p_value(w.beta, dist));
        }
    }
    out.failures.extend(merge_failures);
    out.intensity_effects = effects::intensity_effects(&merged);
    out.website_effects = merged;
    out.instance_effects = all_effects;
    out.synth_fits
        .sort_by(|a, b| (&a.instance_id, a.metric).cmp(&(&b.instance_id, b.metric)));
    out.unique_subsample = unique_subsample.map(|(_, r)| r);
    out.attributes = website_attributes(dataset, calendar);
    Ok(out)
}

/// Filter a raw dataset and estimate.
pub fn run_pipeline(raw: &PanelDataset, config: &PipelineConfig) -> Result<(EstimationOutput, FilterReport), PipelineError> {
    let (filtered, report) = ingest::apply_filters(raw, &config.filters, &config.calendar);
    Ok((run_estimation(&filtered, config)?, report))
}
