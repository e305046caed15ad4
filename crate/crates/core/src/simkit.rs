//! Synthetic panels with known injected effects, used to validate the
//! estimation stack end to end.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::calendar::{Calendar, WindowLabel};
use crate::effects::EffectEstimate;
use crate::ingest::{IngestError, PanelDataset};
use crate::model::{Base, MetricKind, TimeSeries, WebsiteInstance};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Panel(#[from] IngestError),
}

/// Time path of the injected effect on visits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectProfile {
    /// `delta` from the enforcement week onward.
    Constant { delta: f64 },
    /// Linear from zero before the enforcement week to `delta` at `full_week`.
    Ramp { delta: f64, full_week: i64 },
}

impl EffectProfile {
    pub fn delta(&self) -> f64 {
        match *self {
            EffectProfile::Constant { delta } | EffectProfile::Ramp { delta, .. } => delta,
        }
    }

    /// Effect in `week` given the enforcement week.
    pub fn at(&self, week: i64, enforcement_week: i64) -> f64 {
        if week < enforcement_week {
            return 0.0;
        }
        match *self {
            EffectProfile::Constant { delta } => delta,
            EffectProfile::Ramp { delta, full_week } => {
                let span = (full_week - enforcement_week + 1) as f64;
                delta * ((week - enforcement_week + 1) as f64 / span).min(1.0)
            }
        }
    }
}

/// Step changes of the usage-intensity ratios for treated instances after
/// enforcement.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityShifts {
    pub visits_per_unique: f64,
    pub page_impressions_per_visit: f64,
    pub time_per_visit: f64,
    pub bounce_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_treated: usize,
    pub n_control: usize,
    pub weeks: usize,
    /// Mean weekly log visits.
    pub base_level: f64,
    /// Standard deviation of the per-instance level.
    pub unit_sd: f64,
    pub seasonality_amplitude: f64,
    pub seasonality_period: f64,
    pub noise_sigma: f64,
    pub effect: EffectProfile,
    pub intensity: IntensityShifts,
    pub industries: Vec<String>,
    /// Share of treated websites observed with both an EU and a non-EU user base.
    pub paired_fraction: f64,
    pub round_counts: bool,
    pub calendar: Calendar,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_treated: 100,
            n_control: 100,
            weeks: 125,
            base_level: 9.0,
            unit_sd: 0.5,
            seasonality_amplitude: 0.15,
            seasonality_period: 52.0,
            noise_sigma: 0.05,
            effect: EffectProfile::Constant { delta: -0.10 },
            intensity: IntensityShifts::default(),
            industries: ["news", "shopping", "technology", "sports"]
                .map(String::from)
                .to_vec(),
            paired_fraction: 0.0,
            round_counts: true,
            calendar: Calendar::default(),
            seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        let enf = self.calendar.enforcement_week();
        if self.n_treated == 0 {
            return bad("n_treated must be positive");
        }
        if self.n_control < 2 {
            return bad("n_control must be at least 2");
        }
        if (self.weeks as i64) <= enf {
            return bad("weeks must extend past the enforcement week");
        }
        if !(self.effect.delta() > -1.0) {
            return bad("effect.delta must exceed -1");
        }
        if let EffectProfile::Ramp { full_week, .. } = self.effect {
            if full_week < enf {
                return bad("effect.full_week must not precede the enforcement week");
            }
        }
        let shifts = [
            self.intensity.visits_per_unique,
            self.intensity.page_impressions_per_visit,
            self.intensity.time_per_visit,
            self.intensity.bounce_rate,
        ];
        if shifts.iter().any(|s| !(*s > -1.0)) {
            return bad("intensity shifts must exceed -1");
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("unit_sd", self.unit_sd),
            ("seasonality_amplitude", self.seasonality_amplitude),
        ] {
            if !(v >= 0.0) {
                return Err(SimError::Invalid(format!("{name} must be non-negative")));
            }
        }
        if !(self.seasonality_period > 0.0) {
            return bad("seasonality_period must be positive");
        }
        if self.industries.is_empty() {
            return bad("industries must not be empty");
        }
        if !(0.0..=1.0).contains(&self.paired_fraction) {
            return bad("paired_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Injected effects of each treated instance, per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    /// instance → window → mean effect on total visits over the window's post weeks.
    pub visits: BTreeMap<String, BTreeMap<WindowLabel, f64>>,
    /// instance → window → mean effect on monthly unique visitors.
    pub unique_visitors: BTreeMap<String, BTreeMap<WindowLabel, f64>>,
    pub intensity: IntensityShifts,
}

impl GroundTruth {
    /// Injected relative effect for an instance's quantity metric.
    pub fn delta(&self, instance_id: &str, metric: MetricKind, window: WindowLabel) -> Option<f64> {
        if metric == MetricKind::UniqueVisitors {
            return self.unique_visitors.get(instance_id)?.get(&window).copied();
        }
        let v = *self.visits.get(instance_id)?.get(&window)?;
        let shift = match metric {
            MetricKind::TotalVisits => 0.0,
            MetricKind::PageImpressions => self.intensity.page_impressions_per_visit,
            MetricKind::TimeOnWebsite => self.intensity.time_per_visit,
            MetricKind::BouncingVisitors => self.intensity.bounce_rate,
            MetricKind::UniqueVisitors => unreachable!(),
        };
        Some((1.0 + v) * (1.0 + shift) - 1.0)
    }
}

/// Mean injected effect over the post weeks of each window.
pub fn window_truth(profile: &EffectProfile, calendar: &Calendar, window: WindowLabel) -> f64 {
    let w = calendar.window(window);
    let weeks = w.post_first_week()..=w.post_end_week;
    let n = weeks.clone().count() as f64;
    weeks.map(|t| profile.at(t, calendar.enforcement_week())).sum::<f64>() / n
}

fn monthly_truth(profile: &EffectProfile, calendar: &Calendar, window: WindowLabel, vpu_shift: f64) -> f64 {
    let w = calendar.window(window);
    let enf = calendar.enforcement_week();
    let mut month = calendar.enforcement_month();
    let last = calendar.last_month_in(&w);
    let mut total = 0.0;
    let mut count = 0.0;
    while month <= last {
        let mut d = month.first_day();
        let mut factor = 0.0;
        let mut days = 0.0;
        while d <= month.last_day() {
            factor += 1.0 + profile.at(calendar.week_of(d), enf);
            days += 1.0;
            d += Duration::days(1);
        }
        total += factor / days / (1.0 + vpu_shift);
        count += 1.0;
        month = month.next();
    }
    total / count - 1.0
}

struct UnitSpec {
    instance_id: String,
    website_id: String,
    user_base: Base,
    website_base: Base,
    industry: usize,
    treated: bool,
    index: u64,
}

const EU_COUNTRIES: [&str; 5] = ["DE", "FR", "IT", "ES", "NL"];
const NON_EU_COUNTRIES: [&str; 5] = ["US", "CA", "BR", "JP", "AU"];

fn unit_specs(config: &SimConfig) -> Vec<UnitSpec> {
    let mut specs = Vec::new();
    let n_ind = config.industries.len();
    let mut remaining = config.n_treated;
    let mut site = 0usize;
    let mut pairs_left = ((config.n_treated as f64 * config.paired_fraction) / 2.0).floor() as usize;
    while remaining > 0 {
        site += 1;
        let website_id = format!("tw{site:05}");
        let industry = site % n_ind;
        let paired = pairs_left > 0 && remaining >= 2;
        specs.push(UnitSpec {
            instance_id: format!("{website_id}-EU"),
            website_id: website_id.clone(),
            user_base: Base::Eu,
            website_base: Base::Eu,
            industry,
            treated: true,
            index: specs.len() as u64,
        });
        remaining -= 1;
        if paired {
            pairs_left -= 1;
            specs.push(UnitSpec {
                instance_id: format!("{website_id}-NONEU"),
                website_id,
                user_base: Base::NonEu,
                website_base: Base::Eu,
                industry,
                treated: true,
                index: specs.len() as u64,
            });
            remaining -= 1;
        }
    }
    for c in 1..=config.n_control {
        let website_id = format!("cw{c:05}");
        specs.push(UnitSpec {
            instance_id: format!("{website_id}-NONEU"),
            website_id,
            user_base: Base::NonEu,
            website_base: Base::NonEu,
            industry: c % n_ind,
            treated: false,
            index: specs.len() as u64,
        });
    }
    specs
}

fn round(v: f64, counts: bool) -> f64 {
    if counts {
        v.round()
    } else {
        v
    }
}

fn simulate_unit(spec: &UnitSpec, config: &SimConfig) -> WebsiteInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(spec.index);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = |rng: &mut ChaCha8Rng| config.noise_sigma * std_normal.sample(rng);

    let cal = &config.calendar;
    let enf = cal.enforcement_week();
    let level = config.base_level + config.unit_sd * std_normal.sample(&mut rng);
    let phase = 2.0 * PI * spec.industry as f64 / config.industries.len() as f64;
    let ppv: f64 = rng.random_range(2.0..6.0);
    let tpv: f64 = rng.random_range(1.0..8.0);
    let bounce: f64 = rng.random_range(0.25..0.6);
    let vpu: f64 = rng.random_range(1.2..2.5);
    let shifts = if spec.treated {
        config.intensity
    } else {
        IntensityShifts::default()
    };
    let profile = |week: i64| {
        if spec.treated {
            config.effect.at(week, enf)
        } else {
            0.0
        }
    };
    let step = |week: i64, shift: f64| if week >= enf { 1.0 + shift } else { 1.0 };

    let weeks = config.weeks;
    let mut visits = Vec::with_capacity(weeks);
    let mut pages = Vec::with_capacity(weeks);
    let mut time = Vec::with_capacity(weeks);
    let mut bouncing = Vec::with_capacity(weeks);
    let mut raw_visits = Vec::with_capacity(weeks);
    for i in 0..weeks {
        let week = i as i64 + 1;
        let season = config.seasonality_amplitude * (2.0 * PI * week as f64 / config.seasonality_period + phase).sin();
        let v = (level + season + noise(&mut rng)).exp() * (1.0 + profile(week));
        raw_visits.push(v);
        visits.push(round(v, config.round_counts));
        pages.push(round(
            v * ppv * step(week, shifts.page_impressions_per_visit) * noise(&mut rng).exp(),
            config.round_counts,
        ));
        time.push(v * tpv * step(week, shifts.time_per_visit) * noise(&mut rng).exp());
        let b = (bounce * step(week, shifts.bounce_rate) * noise(&mut rng).exp()).min(1.0);
        bouncing.push(round(v * b, config.round_counts));
    }

    // monthly uniques from daily visits (weekly visits spread evenly)
    let first_month = cal.first_month();
    let last_day = cal.week_end(weeks as i64);
    let mut uniques = Vec::new();
    let mut month = first_month;
    while month.last_day() <= last_day {
        let mut d = month.first_day();
        let mut total = 0.0;
        while d <= month.last_day() {
            let w = cal.week_of(d);
            if w >= 1 {
                total += raw_visits[(w - 1) as usize] / 7.0;
            }
            d += Duration::days(1);
        }
        let enforced = month >= cal.enforcement_month();
        let factor = if enforced { 1.0 + shifts.visits_per_unique } else { 1.0 };
        uniques.push(round(total / (vpu * factor) * noise(&mut rng).exp(), config.round_counts));
        month = month.next();
    }

    let start = cal.week_start(1);
    let mut series = BTreeMap::new();
    for (metric, values) in [
        (MetricKind::TotalVisits, visits),
        (MetricKind::PageImpressions, pages),
        (MetricKind::TimeOnWebsite, time),
        (MetricKind::BouncingVisitors, bouncing),
    ] {
        series.insert(metric, TimeSeries::new(metric, start, values).expect("positive values"));
    }
    if !uniques.is_empty() {
        series.insert(
            MetricKind::UniqueVisitors,
            TimeSeries::new(MetricKind::UniqueVisitors, first_month.first_day(), uniques).expect("positive values"),
        );
    }

    let countries = if spec.user_base == Base::Eu {
        EU_COUNTRIES
    } else {
        NON_EU_COUNTRIES
    };
    WebsiteInstance {
        instance_id: spec.instance_id.clone(),
        website_id: spec.website_id.clone(),
        user_base: spec.user_base,
        website_base: spec.website_base,
        industry: config.industries[spec.industry].clone(),
        global_rank: rng.random_range(1..200_000),
        country_rank: rng.random_range(1..20_000),
        industry_rank: rng.random_range(1..5_000),
        user_country: countries[rng.random_range(0..countries.len())].to_string(),
        series,
    }
}

/// Generate a panel and the effects injected into it.
pub fn generate_panel(config: &SimConfig) -> Result<(PanelDataset, GroundTruth), SimError> {
    config.validate()?;
    let specs = unit_specs(config);
    let instances: Vec<WebsiteInstance> = specs.par_iter().map(|s| simulate_unit(s, config)).collect();

    let cal = &config.calendar;
    let mut truth = GroundTruth {
        intensity: config.intensity,
        ..Default::default()
    };
    let last_week = config.weeks as i64;
    let covered: Vec<WindowLabel> = WindowLabel::ALL
        .into_iter()
        .filter(|w| cal.window(*w).post_end_week <= last_week)
        .collect();
    let visits: BTreeMap<WindowLabel, f64> = covered
        .iter()
        .map(|&w| (w, window_truth(&config.effect, cal, w)))
        .collect();
    let uniques: BTreeMap<WindowLabel, f64> = covered
        .iter()
        .map(|&w| (w, monthly_truth(&config.effect, cal, w, config.intensity.visits_per_unique)))
        .collect();
    for s in specs.iter().filter(|s| s.treated) {
        truth.visits.insert(s.instance_id.clone(), visits.clone());
        truth.unique_visitors.insert(s.instance_id.clone(), uniques.clone());
    }
    let mut dataset = PanelDataset::from_instances(instances)?;
    dataset.provenance.clear();
    Ok((dataset, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecovery {
    pub window: WindowLabel,
    pub n: usize,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub bias: f64,
    pub mae: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub n: usize,
    pub bias: f64,
    pub mae: f64,
    /// Share of truths inside the estimate's 95% interval.
    pub coverage: f64,
    pub per_window: Vec<WindowRecovery>,
    /// Estimates with no matching truth.
    pub unmatched: usize,
}

/// 95% interval for the relative effect, from the log-point estimate.
pub fn interval_95(e: &EffectEstimate) -> (f64, f64) {
    let q = StudentsT::new(0.0, 1.0, e.df_resid.max(1) as f64)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.96);
    ((e.beta3 - q * e.std_err).exp_m1(), (e.beta3 + q * e.std_err).exp_m1())
}

/// Compare estimated deltas with injected ones.
pub fn evaluate_recovery(estimates: &[EffectEstimate], truth: &GroundTruth) -> RecoveryReport {
    let mut by_window: BTreeMap<WindowLabel, Vec<(f64, f64, bool)>> = BTreeMap::new();
    let mut unmatched = 0;
    for e in estimates {
        match truth.delta(&e.instance_id, e.metric, e.window) {
            Some(t) => {
                let (lo, hi) = interval_95(e);
                by_window
                    .entry(e.window)
                    .or_default()
                    .push((e.delta, t, lo <= t && t <= hi));
            }
            None => unmatched += 1,
        }
    }
    let summarize = |items: &[(f64, f64, bool)]| {
        let n = items.len().max(1) as f64;
        (
            items.iter().map(|x| x.0).sum::<f64>() / n,
            items.iter().map(|x| x.1).sum::<f64>() / n,
            items.iter().map(|x| x.0 - x.1).sum::<f64>() / n,
            items.iter().map(|x| (x.0 - x.1).abs()).sum::<f64>() / n,
            items.iter().filter(|x| x.2).count() as f64 / n,
        )
    };
    let per_window: Vec<WindowRecovery> = by_window
        .iter()
        .map(|(w, items)| {
            let (mean_estimate, mean_truth, bias, mae, coverage) = summarize(items);
            WindowRecovery {
                window: *w,
                n: items.len(),
                mean_estimate,
                mean_truth,
                bias,
                mae,
                coverage,
            }
        })
        .collect();
    let all: Vec<(f64, f64, bool)> = by_window.into_values().flatten().collect();
    let (_, _, bias, mae, coverage) = summarize(&all);
    RecoveryReport {
        n: all.len(),
        bias,
        mae,
        coverage,
        per_window,
        unmatched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_treated: 6,
            n_control: 6,
            ..SimConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, _) = generate_panel(&small()).unwrap();
        let (b, _) = generate_panel(&small()).unwrap();
        assert_eq!(a.instances, b.instances);
        let (c, _) = generate_panel(&SimConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn constant_profile_truth_is_delta() {
        let (ds, truth) = generate_panel(&small()).unwrap();
        assert_eq!(ds.len(), 12);
        for w in truth.visits.values() {
            assert_eq!(w.len(), 5);
            assert!(w.values().all(|&d| (d + 0.10).abs() < 1e-12));
        }
        // the enforcement month is only partly treated
        for w in truth.unique_visitors.values() {
            assert!(w.values().all(|&d| d > -0.10 && d < -0.07));
        }
        assert_eq!(ds.treated().count(), 6);
        assert_eq!(ds.controls().count(), 6);
    }

    #[test]
    fn ramp_truth_matches_analytic_integral_and_decreases() {
        let cal = Calendar::default();
        let profile = EffectProfile::Ramp {
            delta: -0.10,
            full_week: 125,
        };
        let enf = cal.enforcement_week();
        let mut prev = 0.0;
        for w in WindowLabel::ALL {
            let end = cal.window(w).post_end_week;
            // arithmetic series: Σ_{j=1..m} j / L with m = end − enf + 1, L = 125 − enf + 1
            let m = (end - enf + 1) as f64;
            let l = (125 - enf + 1) as f64;
            let analytic = -0.10 * (m + 1.0) / (2.0 * l);
            let got = window_truth(&profile, &cal, w);
            assert!((got - analytic).abs() < 1e-12, "{w}: {got} vs {analytic}");
            assert!(got < prev);
            prev = got;
        }
    }

    #[test]
    fn series_shapes() {
        let (ds, _) = generate_panel(&small()).unwrap();
        let inst = ds.instances.values().next().unwrap();
        assert_eq!(inst.series(MetricKind::TotalVisits).unwrap().len(), 125);
        // Jul 2017 .. Oct 2019
        let u = inst.series(MetricKind::UniqueVisitors).unwrap();
        assert_eq!(u.len(), 28);
        assert_eq!(u.start, crate::calendar::MonthIndex::of(u.start).first_day());
        let v = &inst.series(MetricKind::TotalVisits).unwrap().values;
        let b = &inst.series(MetricKind::BouncingVisitors).unwrap().values;
        assert!(v.iter().zip(b).all(|(v, b)| b <= v));
    }

    #[test]
    fn paired_websites_share_ids() {
        let cfg = SimConfig {
            n_treated: 10,
            paired_fraction: 1.0,
            ..small()
        };
        let (ds, _) = generate_panel(&cfg).unwrap();
        assert_eq!(ds.treated().count(), 10);
        let paired = ds.websites.values().filter(|ids| ids.len() == 2).count();
        assert_eq!(paired, 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SimConfig { n_control: 1, ..small() },
            SimConfig {
                effect: EffectProfile::Constant { delta: -1.0 },
                ..small()
            },
            SimConfig {
                noise_sigma: -0.1,
                ..small()
            },
            SimConfig { weeks: 40, ..small() },
            SimConfig {
                industries: vec![],
                ..small()
            },
        ] {
            assert!(generate_panel(&cfg).is_err());
        }
    }

    fn est(id: &str, delta: f64) -> EffectEstimate {
        EffectEstimate {
            website_id: id.into(),
            instance_id: id.into(),
            metric: MetricKind::TotalVisits,
            window: WindowLabel::M3,
            beta3: delta.ln_1p(),
            delta,
            std_err: 0.01,
            p_value: 0.5,
            significant_5pct: false,
            df_resid: 100,
        }
    }

    #[test]
    fn recovery_bias_and_mae() {
        let mut truth = GroundTruth::default();
        for (id, d) in [("a", -0.1), ("b", -0.05)] {
            truth.visits.insert(id.into(), BTreeMap::from([(WindowLabel::M3, d)]));
        }
        let exact = [est("a", -0.1), est("b", -0.05)];
        let r = evaluate_recovery(&exact, &truth);
        assert!(r.bias.abs() < 1e-15);
        assert!(r.mae.abs() < 1e-15);
        assert_eq!(r.coverage, 1.0);
        let shifted = [est("a", -0.09), est("b", -0.04)];
        let r = evaluate_recovery(&shifted, &truth);
        assert!((r.bias - 0.01).abs() < 1e-12);
        let r = evaluate_recovery(&[est("zzz", 0.0)], &truth);
        assert_eq!(r.unmatched, 1);
    }
}
