//! Treatment effects against the synthetic control, website-level merging
//! and usage-intensity effects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::{WindowLabel, WindowSpan};
use crate::ingest::InstanceShares;
use crate::model::{IntensityMetric, MetricKind};
use crate::stats::{self, CovarianceKind, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EffectsError {
    #[error("window has {pre} pre and {post} post points, need at least 2 of each")]
    WindowTooShort { pre: usize, post: usize },
    #[error("treated and synthetic series differ in length ({treated} vs {synth})")]
    LengthMismatch { treated: usize, synth: usize },
    #[error("index {index} outside series of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate regression design")]
    Degenerate,
    #[error("non-finite value in series")]
    NonFinite,
    #[error("no effect supplied for instance {0} with positive share")]
    MissingEffect(String),
    #[error("effect for instance {0} has no share")]
    MissingShare(String),
    #[error("effects mix metrics or windows")]
    Mixed,
    #[error("no effects to merge")]
    Empty,
    #[error("denominator change {0} ≤ −1 leaves the ratio undefined")]
    DenominatorAnnihilated(f64),
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Per-instance difference-in-differences estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub website_id: String,
    pub instance_id: String,
    pub metric: MetricKind,
    pub window: WindowLabel,
    /// Log-point coefficient on the treated × post interaction.
    pub beta3: f64,
    /// `exp(beta3) − 1`.
    pub delta: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub significant_5pct: bool,
    pub df_resid: usize,
}

/// β3 with its robust standard error, before identifiers are attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DidFit {
    pub beta3: f64,
    pub delta: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub df_resid: usize,
}

/// Fit `ln(y+1) = b0 + b1·EU + b2·Post + b3·EU·Post` on the stacked treated
/// (EU = 1) and synthetic (EU = 0) log series.
///
/// Both series share the calendar of `span`.
pub fn estimate_effect(treated: &[f64], synth: &[f64], span: &WindowSpan) -> Result<DidFit, EffectsError> {
    if treated.len() != synth.len() {
        return Err(EffectsError::LengthMismatch {
            treated: treated.len(),
            synth: synth.len(),
        });
    }
    if span.pre.len() < 2 || span.post.len() < 2 {
        return Err(EffectsError::WindowTooShort {
            pre: span.pre.len(),
            post: span.post.len(),
        });
    }
    let len = treated.len();
    let mut x = Vec::with_capacity(2 * (span.pre.len() + span.post.len()));
    let mut y = Vec::with_capacity(x.capacity());
    for (post, idx) in [(0.0, &span.pre), (1.0, &span.post)] {
        for &i in idx {
            if i >= len {
                return Err(EffectsError::IndexOutOfRange { index: i, len });
            }
            x.push(vec![1.0, 1.0, post, post]);
            y.push(treated[i]);
            x.push(vec![1.0, 0.0, post, 0.0]);
            y.push(synth[i]);
        }
    }
    let fit = stats::ols(&x, &y, CovarianceKind::Hc1).map_err(|e| match e {
        StatsError::NonFinite => EffectsError::NonFinite,
        _ => EffectsError::Degenerate,
    })?;
    let beta3 = fit.coefficients[3];
    Ok(DidFit {
        beta3,
        delta: beta3.exp_m1(),
        std_err: fit.std_errors[3],
        p_value: fit.p_values[3],
        df_resid: fit.df_resid,
    })
}

impl EffectEstimate {
    pub fn from_fit(
        website_id: &str,
        instance_id: &str,
        metric: MetricKind,
        window: WindowLabel,
        fit: DidFit,
    ) -> Self {
        Self {
            website_id: website_id.to_string(),
            instance_id: instance_id.to_string(),
            metric,
            window,
            beta3: fit.beta3,
            delta: fit.delta,
            std_err: fit.std_err,
            p_value: fit.p_value,
            significant_5pct: fit.p_value < SIGNIFICANCE_LEVEL,
            df_resid: fit.df_resid,
        }
    }

    /// Replace the p-value (e.g. by a placebo rank) keeping the flag consistent.
    pub fn with_p_value(mut self, p: f64) -> Self {
        self.p_value = p;
        self.significant_5pct = p < SIGNIFICANCE_LEVEL;
        self
    }
}

/// Two-sided permutation p-value with the plus-one correction:
/// `(1 + #{|b| ≥ |beta|}) / (1 + n)`.
pub fn placebo_p_value(beta: f64, placebo: &[f64]) -> f64 {
    let hits = placebo.iter().filter(|b| b.abs() >= beta.abs()).count();
    (1 + hits) as f64 / (1 + placebo.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeComponent {
    pub instance_id: String,
    pub delta: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsiteEffect {
    pub website_id: String,
    pub metric: MetricKind,
    pub window: WindowLabel,
    /// Share-weighted mean of instance deltas.
    pub delta: f64,
    /// Share-weighted log-point effect used for inference.
    pub beta: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub significant_5pct: bool,
    pub components: Vec<MergeComponent>,
}

/// Merge instance effects of one website using pre-period traffic shares.
///
/// The test statistic combines the instance coefficients with the same
/// weights, treating instances as independent; it reduces to the instance
/// test when a single instance carries the whole share.
pub fn merge_website(effects: &[&EffectEstimate], shares: &InstanceShares) -> Result<WebsiteEffect, EffectsError> {
    let first = effects.first().ok_or(EffectsError::Empty)?;
    if effects
        .iter()
        .any(|e| e.metric != first.metric || e.window != first.window)
    {
        return Err(EffectsError::Mixed);
    }
    let by_id: BTreeMap<&str, &EffectEstimate> =
        effects.iter().map(|e| (e.instance_id.as_str(), *e)).collect();
    for e in effects {
        if shares.get(&e.instance_id).is_none() {
            return Err(EffectsError::MissingShare(e.instance_id.clone()));
        }
    }
    let mut components = Vec::new();
    let (mut delta, mut beta, mut var) = (0.0, 0.0, 0.0);
    let mut df = usize::MAX;
    let mut sorted = shares.shares.clone();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    for s in &sorted {
        if s.share <= 0.0 {
            continue;
        }
        let e = by_id
            .get(s.instance_id.as_str())
            .ok_or_else(|| EffectsError::MissingEffect(s.instance_id.clone()))?;
        delta += s.share * e.delta;
        beta += s.share * e.beta3;
        var += (s.share * e.std_err).powi(2);
        df = df.min(e.df_resid);
        components.push(MergeComponent {
            instance_id: s.instance_id.clone(),
            delta: e.delta,
            share: s.share,
        });
    }
    if components.is_empty() {
        return Err(EffectsError::Empty);
    }
    let std_err = var.sqrt();
    let p_value = stats::t_two_sided_p(stats::t_ratio(beta, std_err), df as f64);
    Ok(WebsiteEffect {
        website_id: shares.website_id.clone(),
        metric: first.metric,
        window: first.window,
        delta,
        beta,
        std_err,
        p_value,
        significant_5pct: p_value < SIGNIFICANCE_LEVEL,
        components,
    })
}

impl WebsiteEffect {
    pub fn with_p_value(mut self, p: f64) -> Self {
        self.p_value = p;
        self.significant_5pct = p < SIGNIFICANCE_LEVEL;
        self
    }
}

/// Flat CSV view of a [`WebsiteEffect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsiteEffectRow {
    pub website_id: String,
    pub metric: MetricKind,
    pub window: WindowLabel,
    pub delta: f64,
    pub beta: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub significant_5pct: bool,
    pub n_instances: usize,
}

impl From<&WebsiteEffect> for WebsiteEffectRow {
    fn from(w: &WebsiteEffect) -> Self {
        Self {
            website_id: w.website_id.clone(),
            metric: w.metric,
            window: w.window,
            delta: w.delta,
            beta: w.beta,
            std_err: w.std_err,
            p_value: w.p_value,
            significant_5pct: w.significant_5pct,
            n_instances: w.components.len(),
        }
    }
}

/// `(1 + Δnumerator) / (1 + Δdenominator) − 1`.
pub fn intensity_effect(delta_numerator: f64, delta_denominator: f64) -> Result<f64, EffectsError> {
    if delta_denominator <= -1.0 || !delta_denominator.is_finite() {
        return Err(EffectsError::DenominatorAnnihilated(delta_denominator));
    }
    Ok((1.0 + delta_numerator) / (1.0 + delta_denominator) - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityEffect {
    pub website_id: String,
    pub intensity_metric: IntensityMetric,
    pub window: WindowLabel,
    pub delta: f64,
    pub numerator_delta: f64,
    pub denominator_delta: f64,
}

/// Intensity effects for every website and window where both quantity
/// effects of a ratio exist. Output sorted by (website, metric, window).
pub fn intensity_effects(website_effects: &[WebsiteEffect]) -> Vec<IntensityEffect> {
    let index: BTreeMap<(&str, MetricKind, WindowLabel), f64> = website_effects
        .iter()
        .map(|w| ((w.website_id.as_str(), w.metric, w.window), w.delta))
        .collect();
    let mut keys: Vec<(&str, WindowLabel)> = website_effects
        .iter()
        .map(|w| (w.website_id.as_str(), w.window))
        .collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (site, window) in keys {
        for metric in IntensityMetric::ALL {
            let (num, den) = metric.ratio();
            let (Some(&dn), Some(&dd)) = (index.get(&(site, num, window)), index.get(&(site, den, window))) else {
                continue;
            };
            if let Ok(delta) = intensity_effect(dn, dd) {
                out.push(IntensityEffect {
                    website_id: site.to_string(),
                    intensity_metric: metric,
                    window,
                    delta,
                    numerator_delta: dn,
                    denominator_delta: dd,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        (a.website_id.as_str(), a.intensity_metric, a.window).cmp(&(
            b.website_id.as_str(),
            b.intensity_metric,
            b.window,
        ))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub share: f64,
    pub mean_intensity: Option<f64>,
    pub median_intensity: Option<f64>,
}

/// Websites split by the sign of a quantity effect, with the paired
/// intensity effect summarised per group. Zero counts as a gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainLoseSplit {
    pub intensity_metric: IntensityMetric,
    pub split_metric: MetricKind,
    pub window: WindowLabel,
    pub gain: GroupSummary,
    pub lose: GroupSummary,
}

fn group(values: &[f64], total: usize) -> GroupSummary {
    GroupSummary {
        n: values.len(),
        share: if total == 0 {
            0.0
        } else {
            values.len() as f64 / total as f64
        },
        mean_intensity: stats::mean(values),
        median_intensity: stats::median(values),
    }
}

pub fn gain_lose_split(
    website_effects: &[WebsiteEffect],
    intensity: &[IntensityEffect],
    intensity_metric: IntensityMetric,
    window: WindowLabel,
) -> GainLoseSplit {
    let split_metric = intensity_metric.split_metric();
    let quantity: BTreeMap<&str, f64> = website_effects
        .iter()
        .filter(|w| w.metric == split_metric && w.window == window)
        .map(|w| (w.website_id.as_str(), w.delta))
        .collect();
    let mut gain = Vec::new();
    let mut lose = Vec::new();
    for ie in intensity
        .iter()
        .filter(|i| i.intensity_metric == intensity_metric && i.window == window)
    {
        if let Some(&q) = quantity.get(ie.website_id.as_str()) {
            if q < 0.0 {
                lose.push(ie.delta);
            } else {
                gain.push(ie.delta);
            }
        }
    }
    let total = gain.len() + lose.len();
    GainLoseSplit {
        intensity_metric,
        split_metric,
        window,
        gain: group(&gain, total),
        lose: group(&lose, total),
    }
}

/// One gain/lose table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainLoseRow {
    pub intensity_metric: IntensityMetric,
    pub window: WindowLabel,
    pub gain_share: f64,
    pub gain_n: usize,
    pub gain_mean: Option<f64>,
    pub gain_median: Option<f64>,
    pub lose_share: f64,
    pub lose_n: usize,
    pub lose_mean: Option<f64>,
    pub lose_median: Option<f64>,
}

impl From<&GainLoseSplit> for GainLoseRow {
    fn from(s: &GainLoseSplit) -> Self {
        Self {
            intensity_metric: s.intensity_metric,
            window: s.window,
            gain_share: s.gain.share,
            gain_n: s.gain.n,
            gain_mean: s.gain.mean_intensity,
            gain_median: s.gain.median_intensity,
            lose_share: s.lose.share,
            lose_n: s.lose.n,
            lose_mean: s.lose.mean_intensity,
            lose_median: s.lose.median_intensity,
        }
    }
}
