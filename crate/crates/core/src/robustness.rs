//! Robustness analyses: filter-threshold sweep, exclusion-band rerun,
//! control-group EU-share checks, crossed mean comparisons and donor-rule
//! variants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::calendar::{Calendar, ExclusionBand, WindowLabel};
use crate::effects::{WebsiteEffect, SIGNIFICANCE_LEVEL};
use crate::ingest::{self, FilterConfig, PanelDataset};
use crate::model::{Base, MetricKind, WebsiteInstance};
use crate::pipeline::{self, EstimationOutput, PipelineConfig, PipelineError};
use crate::stats::{self, CovarianceKind, StatsError};
use crate::synth::DonorMatching;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("regression failed: {0}")]
    Stats(#[from] StatsError),
    #[error("no control instances with a total-visits series")]
    NoControls,
    #[error("threshold list is empty")]
    NoThresholds,
}

/// `lo, lo+step, …, hi` inclusive.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || hi < lo {
        return Vec::new();
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub user_base: Base,
    pub is_base: bool,
    pub n: usize,
    /// Instances in this sample but not in the base sample.
    pub added: usize,
    /// Instances in the base sample but not in this one.
    pub removed: usize,
    /// Mean of per-instance average weekly total visits.
    pub mean_visits: f64,
    pub std_visits: f64,
    /// Welch test against the base sample; the base row compares with itself.
    pub t: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub base_threshold: f64,
    pub rows: Vec<SweepRow>,
}

/// Refilter the raw panel at each threshold and compare the distribution of
/// instance-level average weekly visits with the base sample, separately for
/// each user base.
pub fn threshold_sweep(
    raw: &PanelDataset,
    thresholds: &[f64],
    base: f64,
    filters: &FilterConfig,
    calendar: &Calendar,
) -> Result<SweepReport, RobustnessError> {
    if thresholds.is_empty() {
        return Err(RobustnessError::NoThresholds);
    }
    let sample = |t: f64| {
        let cfg = FilterConfig {
            min_avg_weekly_visits: t,
            ..*filters
        };
        ingest::apply_filters(raw, &cfg, calendar).0
    };
    let base_ds = sample(base);
    let mut rows = Vec::new();
    let mut all: Vec<f64> = thresholds.to_vec();
    if !all.contains(&base) {
        all.push(base);
    }
    all.sort_by(f64::total_cmp);
    for &t in &all {
        let ds = if t == base { base_ds.clone() } else { sample(t) };
        for user_base in [Base::Eu, Base::NonEu] {
            let ids = |d: &PanelDataset| -> BTreeSet<String> {
                d.instances
                    .values()
                    .filter(|i| i.user_base == user_base)
                    .map(|i| i.instance_id.clone())
                    .collect()
            };
            let visits = |d: &PanelDataset| -> Vec<f64> {
                d.instances
                    .values()
                    .filter(|i| i.user_base == user_base)
                    .map(ingest::mean_weekly_visits)
                    .collect()
            };
            let (base_ids, cur_ids) = (ids(&base_ds), ids(&ds));
            let (base_v, cur_v) = (visits(&base_ds), visits(&ds));
            let is_base = t == base;
            let (t_stat, p_value) = if is_base {
                (0.0, 1.0)
            } else {
                stats::welch_t_test(&cur_v, &base_v)
                    .map(|w| (w.t, w.p_value))
                    .unwrap_or((f64::NAN, f64::NAN))
            };
            rows.push(SweepRow {
                threshold: t,
                user_base,
                is_base,
                n: cur_v.len(),
                added: cur_ids.difference(&base_ids).count(),
                removed: base_ids.difference(&cur_ids).count(),
                mean_visits: stats::mean(&cur_v).unwrap_or(f64::NAN),
                std_visits: stats::std_dev(&cur_v).unwrap_or(f64::NAN),
                t: t_stat,
                p_value,
                significant: p_value < SIGNIFICANCE_LEVEL,
            });
        }
    }
    Ok(SweepReport {
        base_threshold: base,
        rows,
    })
}

/// Dotted paths of leaves that differ between two configurations.
pub fn config_diff(a: &PipelineConfig, b: &PipelineConfig) -> Vec<String> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    walk("", &va, &vb, &mut out);
    out
}

/// Mean/median of website effects under two configurations, with a Welch
/// test of the two effect distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: MetricKind,
    pub window: WindowLabel,
    pub n_base: usize,
    pub n_variant: usize,
    pub base_mean: f64,
    pub base_median: f64,
    pub variant_mean: f64,
    pub variant_median: f64,
    pub t: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub variant: String,
    pub config_diff: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn compare(base: &[WebsiteEffect], variant: &[WebsiteEffect]) -> Vec<ComparisonRow> {
    let group = |effects: &[WebsiteEffect]| {
        let mut m: BTreeMap<(MetricKind, WindowLabel), Vec<f64>> = BTreeMap::new();
        for e in effects {
            m.entry((e.metric, e.window)).or_default().push(e.delta);
        }
        m
    };
    let (gb, gv) = (group(base), group(variant));
    let keys: BTreeSet<&(MetricKind, WindowLabel)> = gb.keys().chain(gv.keys()).collect();
    keys.into_iter()
        .map(|key| {
            let empty = Vec::new();
            let b = gb.get(key).unwrap_or(&empty);
            let v = gv.get(key).unwrap_or(&empty);
            let (t, p_value) = if b == v {
                (0.0, 1.0)
            } else {
                stats::welch_t_test(b, v)
                    .map(|w| (w.t, w.p_value))
                    .unwrap_or((f64::NAN, f64::NAN))
            };
            ComparisonRow {
                metric: key.0,
                window: key.1,
                n_base: b.len(),
                n_variant: v.len(),
                base_mean: stats::mean(b).unwrap_or(f64::NAN),
                base_median: stats::median(b).unwrap_or(f64::NAN),
                variant_mean: stats::mean(v).unwrap_or(f64::NAN),
                variant_median: stats::median(v).unwrap_or(f64::NAN),
                t,
                p_value,
                significant: p_value < SIGNIFICANCE_LEVEL,
            }
        })
        .collect()
}

/// Rerun estimation under `variant` and compare with `base_out`.
pub fn rerun_and_compare(
    dataset: &PanelDataset,
    base: &PipelineConfig,
    base_out: &EstimationOutput,
    variant: &PipelineConfig,
    name: &str,
) -> Result<(ComparisonReport, EstimationOutput), RobustnessError> {
    let out = pipeline::run_estimation(dataset, variant)?;
    let report = ComparisonReport {
        variant: name.to_string(),
        config_diff: config_diff(base, variant),
        rows: compare(&base_out.website_effects, &out.website_effects),
    };
    Ok((report, out))
}

/// Drop observations within `exclude_days` of enforcement and re-estimate.
pub fn exclusion_window_rerun(
    dataset: &PanelDataset,
    config: &PipelineConfig,
    base_out: &EstimationOutput,
    exclude_days: u32,
) -> Result<(ComparisonReport, EstimationOutput), RobustnessError> {
    let variant = PipelineConfig {
        exclusion_band: Some(ExclusionBand { days: exclude_days }),
        ..config.clone()
    };
    rerun_and_compare(dataset, config, base_out, &variant, &format!("exclude_{exclude_days}_days"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorVariant {
    NoIndustry,
    EuShareMatch,
    K10,
}

impl DonorVariant {
    pub const ALL: [DonorVariant; 3] = [DonorVariant::NoIndustry, DonorVariant::EuShareMatch, DonorVariant::K10];

    pub fn as_str(self) -> &'static str {
        match self {
            DonorVariant::NoIndustry => "no_industry",
            DonorVariant::EuShareMatch => "eu_share_match",
            DonorVariant::K10 => "k10",
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        match self {
            DonorVariant::NoIndustry => cfg.donors.matching = DonorMatching::None,
            DonorVariant::EuShareMatch => cfg.donors.matching = DonorMatching::EuShare { tolerance: 0.10 },
            DonorVariant::K10 => cfg.donors.k = 10,
        }
        cfg
    }
}

pub fn donor_variant_rerun(
    dataset: &PanelDataset,
    config: &PipelineConfig,
    base_out: &EstimationOutput,
    variant: DonorVariant,
) -> Result<(ComparisonReport, EstimationOutput), RobustnessError> {
    rerun_and_compare(dataset, config, base_out, &variant.apply(config), variant.as_str())
}

/// One control instance for the EU-share analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlObservation {
    pub instance_id: String,
    /// Pre-period share of the website's traffic from EU users.
    pub eu_share: f64,
    /// Mean weekly visits before and after enforcement.
    pub pre_visits: f64,
    pub post_visits: f64,
}

fn period_mean(inst: &WebsiteInstance, calendar: &Calendar, window: WindowLabel) -> Option<(f64, f64)> {
    let s = inst.series(MetricKind::TotalVisits)?;
    let span = calendar.span(s, &calendar.window(window), None).ok()?;
    let at = |idx: &[usize]| stats::mean(&idx.iter().map(|&i| s.values[i]).collect::<Vec<_>>());
    Some((at(&span.pre)?, at(&span.post)?))
}

/// Control instances with their website's EU share and pre/post visits.
pub fn eu_share_observations(dataset: &PanelDataset, calendar: &Calendar, window: WindowLabel) -> Vec<ControlObservation> {
    dataset
        .controls()
        .filter_map(|inst| {
            let (pre, post) = period_mean(inst, calendar, window)?;
            Some(ControlObservation {
                instance_id: inst.instance_id.clone(),
                eu_share: ingest::eu_traffic_share(dataset, &inst.website_id, calendar),
                pre_visits: pre,
                post_visits: post,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuShareDecile {
    /// 0 collects controls with no EU traffic; 1..=10 split the rest.
    pub decile: u8,
    pub n: usize,
    pub eu_share_min: f64,
    pub eu_share_max: f64,
    pub pre_visits: f64,
    pub post_visits: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub t: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuShareReport {
    pub deciles: Vec<EuShareDecile>,
    /// `ln(1+post) = b0 + b1 ln(1+pre) + b2 eu_share`.
    pub regression: Vec<Coefficient>,
    pub n: usize,
}

/// Decile table by EU share and the persistence regression on controls.
pub fn eu_share_analysis(obs: &[ControlObservation]) -> Result<EuShareReport, RobustnessError> {
    if obs.is_empty() {
        return Err(RobustnessError::NoControls);
    }
    let mut groups: BTreeMap<u8, Vec<&ControlObservation>> = BTreeMap::new();
    let mut positive: Vec<&ControlObservation> = Vec::new();
    for o in obs {
        if o.eu_share > 0.0 {
            positive.push(o);
        } else {
            groups.entry(0).or_default().push(o);
        }
    }
    positive.sort_by(|a, b| a.eu_share.total_cmp(&b.eu_share).then(a.instance_id.cmp(&b.instance_id)));
    let n = positive.len();
    for (pos, o) in positive.iter().enumerate() {
        let d = ((pos + 1) * 10).div_ceil(n) as u8;
        groups.entry(d).or_default().push(o);
    }
    let deciles = groups
        .into_iter()
        .map(|(decile, members)| {
            let share: Vec<f64> = members.iter().map(|o| o.eu_share).collect();
            let pre = stats::mean(&members.iter().map(|o| o.pre_visits).collect::<Vec<_>>()).unwrap();
            let post = stats::mean(&members.iter().map(|o| o.post_visits).collect::<Vec<_>>()).unwrap();
            EuShareDecile {
                decile,
                n: members.len(),
                eu_share_min: share.iter().copied().fold(f64::INFINITY, f64::min),
                eu_share_max: share.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                pre_visits: pre,
                post_visits: post,
                difference: post - pre,
            }
        })
        .collect();

    let x: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| vec![1.0, o.pre_visits.ln_1p(), o.eu_share])
        .collect();
    let y: Vec<f64> = obs.iter().map(|o| o.post_visits.ln_1p()).collect();
    let fit = stats::ols(&x, &y, CovarianceKind::Classical)?;
    let regression = ["intercept", "log1p_pre_visits", "eu_share"]
        .iter()
        .enumerate()
        .map(|(i, name)| Coefficient {
            name: name.to_string(),
            estimate: fit.coefficients[i],
            std_err: fit.std_errors[i],
            t: fit.t_values[i],
            p_value: fit.p_values[i],
        })
        .collect();
    Ok(EuShareReport {
        deciles,
        regression,
        n: obs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossedRow {
    pub label: String,
    pub n: usize,
    pub pre: f64,
    pub post: f64,
    /// post − pre
    pub difference: f64,
}

/// Two groups' average weekly visits before and after enforcement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossedTable {
    pub title: String,
    pub first: CrossedRow,
    pub second: CrossedRow,
    /// first.difference − second.difference
    pub did: f64,
}

/// Build a table from per-instance (pre, post) mean weekly visits.
pub fn did_table(title: &str, first: (&str, &[(f64, f64)]), second: (&str, &[(f64, f64)])) -> CrossedTable {
    let row = |(label, items): (&str, &[(f64, f64)])| {
        let pre = stats::mean(&items.iter().map(|p| p.0).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        let post = stats::mean(&items.iter().map(|p| p.1).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        CrossedRow {
            label: label.to_string(),
            n: items.len(),
            pre,
            post,
            difference: post - pre,
        }
    };
    let (a, b) = (row(first), row(second));
    CrossedTable {
        title: title.to_string(),
        did: a.difference - b.difference,
        first: a,
        second: b,
    }
}

/// Non-EU users on EU vs non-EU websites, and EU vs non-EU users on non-EU
/// websites.
pub fn crossed_did_table(dataset: &PanelDataset, calendar: &Calendar, window: WindowLabel) -> Vec<CrossedTable> {
    let cell = |website: Base, user: Base| -> Vec<(f64, f64)> {
        dataset
            .instances
            .values()
            .filter(|i| i.website_base == website && i.user_base == user)
            .filter_map(|i| period_mean(i, calendar, window))
            .collect()
    };
    let nonweb_nonuser = cell(Base::NonEu, Base::NonEu);
    vec![
        did_table(
            "non_eu_users",
            ("eu_websites", &cell(Base::Eu, Base::NonEu)),
            ("non_eu_websites", &nonweb_nonuser),
        ),
        did_table(
            "non_eu_websites",
            ("eu_users", &cell(Base::NonEu, Base::Eu)),
            ("non_eu_users", &nonweb_nonuser),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::OutlierRuleConfig;
    use crate::model::TimeSeries;
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn inst(id: &str, website: &str, wb: Base, ub: Base, visits: Vec<f64>) -> WebsiteInstance {
        let start = NaiveDate::from_ymd_opt(2017, 7, 1).unwrap();
        WebsiteInstance {
            instance_id: id.into(),
            website_id: website.into(),
            user_base: ub,
            website_base: wb,
            industry: "news".into(),
            global_rank: 1,
            country_rank: 1,
            industry_rank: 1,
            user_country: "US".into(),
            series: BTreeMap::from([(
                MetricKind::TotalVisits,
                TimeSeries::new(MetricKind::TotalVisits, start, visits).unwrap(),
            )]),
        }
    }

    fn flat(level: f64) -> Vec<f64> {
        vec![level; 125]
    }

    fn stepped(pre: f64, post: f64) -> Vec<f64> {
        (1..=125).map(|w| if w < 47 { pre } else { post }).collect()
    }

    #[test]
    fn grid_has_fourteen_rows() {
        let g = threshold_grid(700.0, 2000.0, 100.0);
        assert_eq!(g.len(), 14);
        assert_eq!(g[0], 700.0);
        assert_eq!(g[13], 2000.0);
    }

    #[test]
    fn sweep_base_row_and_heavy_tail() {
        let mut insts = Vec::new();
        for i in 0..30 {
            // a cluster of small sites just above the base threshold and a heavy tail
            let level = if i < 15 { 1000.0 + 10.0 * i as f64 } else { 5000.0 * (i - 14) as f64 };
            insts.push(inst(&format!("i{i:02}"), &format!("w{i:02}"), Base::Eu, Base::Eu, flat(level)));
        }
        let ds = PanelDataset::from_instances(insts).unwrap();
        let filters = FilterConfig {
            min_avg_weekly_visits: 1000.0,
            outlier_rule: OutlierRuleConfig::Off,
        };
        let rep = threshold_sweep(&ds, &[1000.0, 1200.0, 2000.0], 1000.0, &filters, &Calendar::default()).unwrap();
        let base = rep.rows.iter().find(|r| r.is_base && r.user_base == Base::Eu).unwrap();
        assert_eq!(base.p_value, 1.0);
        assert_eq!(base.t, 0.0);
        assert_eq!((base.added, base.removed), (0, 0));
        assert!(!base.significant);

        let row = rep
            .rows
            .iter()
            .find(|r| r.threshold == 2000.0 && r.user_base == Base::Eu)
            .unwrap();
        assert_eq!(row.removed, 15);
        // independent Welch statistic
        let all: Vec<f64> = (0..30)
            .map(|i| if i < 15 { 1000.0 + 10.0 * i as f64 } else { 5000.0 * (i - 14) as f64 })
            .collect();
        let kept: Vec<f64> = all[15..].to_vec();
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let mu = m(v);
            v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let t = (m(&kept) - m(&all)) / (var(&kept) / 15.0 + var(&all) / 30.0).sqrt();
        assert!((row.t - t).abs() < 1e-10);
        assert!(row.p_value < 0.05 && row.significant);
    }

    #[test]
    fn did_table_hand_fixture_and_antisymmetry() {
        let a = [(100.0, 90.0), (300.0, 250.0)];
        let b = [(200.0, 220.0), (400.0, 410.0), (600.0, 600.0)];
        let t = did_table("x", ("a", &a), ("b", &b));
        assert_eq!(t.first.pre, 200.0);
        assert_eq!(t.first.post, 170.0);
        assert_eq!(t.first.difference, -30.0);
        assert_eq!(t.second.pre, 400.0);
        assert_eq!(t.second.post, 410.0);
        assert_eq!(t.did, -40.0);
        let s = did_table("x", ("b", &b), ("a", &a));
        assert_eq!(s.did, -t.did);
        let same = did_table("x", ("a", &[(5.0, 5.0)]), ("b", &[(7.0, 7.0)]));
        assert_eq!(same.did, 0.0);
        assert_eq!(same.first.difference, 0.0);
    }

    #[test]
    fn crossed_tables_on_four_cells() {
        let cal = Calendar::default();
        let ds = PanelDataset::from_instances(vec![
            inst("e-n", "e", Base::Eu, Base::NonEu, stepped(1000.0, 800.0)),
            inst("e-e", "e", Base::Eu, Base::Eu, stepped(5000.0, 4000.0)),
            inst("n-e", "n", Base::NonEu, Base::Eu, stepped(3000.0, 2900.0)),
            inst("n-n", "n", Base::NonEu, Base::NonEu, stepped(2000.0, 2500.0)),
        ])
        .unwrap();
        let t = crossed_did_table(&ds, &cal, WindowLabel::M18);
        assert_eq!(t[0].did, (800.0 - 1000.0) - (2500.0 - 2000.0));
        assert_eq!(t[1].did, (2900.0 - 3000.0) - (2500.0 - 2000.0));
    }

    #[test]
    fn perfect_persistence_regression() {
        let obs: Vec<ControlObservation> = (0..40)
            .map(|i| {
                let v = 1000.0 * (1.0 + i as f64);
                ControlObservation {
                    instance_id: format!("c{i:02}"),
                    eu_share: if i % 4 == 0 { 0.0 } else { (i as f64 * 0.37).fract() },
                    pre_visits: v,
                    post_visits: v,
                }
            })
            .collect();
        let r = eu_share_analysis(&obs).unwrap();
        assert!(r.regression[0].estimate.abs() < 1e-8);
        assert!((r.regression[1].estimate - 1.0).abs() < 1e-8);
        assert!(r.regression[2].estimate.abs() < 1e-8);
        assert_eq!(r.deciles[0].decile, 0);
        assert_eq!(r.deciles[0].n, 10);
        assert_eq!(r.deciles.iter().map(|d| d.n).sum::<usize>(), 40);
        assert!(r.deciles.iter().all(|d| d.difference == 0.0));
    }

    #[test]
    fn regression_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let obs: Vec<ControlObservation> = (0..60)
            .map(|i| {
                let pre = 500.0 + 97.0 * i as f64;
                ControlObservation {
                    instance_id: format!("c{i}"),
                    eu_share: (i as f64 * 0.61).fract(),
                    pre_visits: pre,
                    post_visits: pre * (1.1f64 + noise.sample(&mut rng)).exp(),
                }
            })
            .collect();
        let r = eu_share_analysis(&obs).unwrap();
        // oracle: solve (X'X) b = X'y by Gaussian elimination
        let rows: Vec<[f64; 3]> = obs.iter().map(|o| [1.0, o.pre_visits.ln_1p(), o.eu_share]).collect();
        let y: Vec<f64> = obs.iter().map(|o| o.post_visits.ln_1p()).collect();
        let mut a = [[0.0; 4]; 3];
        for (r, yi) in rows.iter().zip(&y) {
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] += r[i] * r[j];
                }
                a[i][3] += r[i] * yi;
            }
        }
        for c in 0..3 {
            for r in 0..3 {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in 0..4 {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        for i in 0..3 {
            let b = a[i][3] / a[i][i];
            assert!((r.regression[i].estimate - b).abs() < 1e-8, "{i}");
        }
    }

    #[test]
    fn config_diff_lists_changed_paths() {
        let base = PipelineConfig::default();
        assert!(config_diff(&base, &base).is_empty());
        assert_eq!(config_diff(&base, &DonorVariant::K10.apply(&base)), vec!["donors.k"]);
        let d = config_diff(&base, &DonorVariant::EuShareMatch.apply(&base));
        assert!(d.iter().all(|p| p.starts_with("donors.matching")));
    }
}
