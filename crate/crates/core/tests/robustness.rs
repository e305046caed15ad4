use panelfx_core::calendar::WindowLabel;
use panelfx_core::pipeline::{self, PipelineConfig};
use panelfx_core::robustness::{self, ControlObservation, DonorVariant};
use panelfx_core::simkit::{generate_panel, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[test]
fn no_industry_on_single_industry_panel_is_identical() {
    let (ds, _) = generate_panel(&SimConfig {
        n_treated: 10,
        n_control: 15,
        industries: vec!["news".into()],
        ..SimConfig::default()
    })
    .unwrap();
    let cfg = PipelineConfig::default();
    let base = pipeline::run_estimation(&ds, &cfg).unwrap();
    let (report, out) = robustness::donor_variant_rerun(&ds, &cfg, &base, DonorVariant::NoIndustry).unwrap();
    assert_eq!(out.website_effects, base.website_effects);
    let pools = |o: &pipeline::EstimationOutput| o.synth_fits.iter().map(|s| s.pool.donor_ids.clone()).collect::<Vec<_>>();
    assert_eq!(pools(&out), pools(&base));
    assert_eq!(report.config_diff, vec!["donors.matching.kind".to_string()]);
    assert!(report.rows.iter().all(|r| r.p_value == 1.0 && !r.significant));
}

#[test]
fn exclusion_rerun_reports_only_the_band() {
    let (ds, _) = generate_panel(&SimConfig {
        n_treated: 6,
        n_control: 10,
        ..SimConfig::default()
    })
    .unwrap();
    let cfg = PipelineConfig {
        windows: vec![WindowLabel::M3],
        ..PipelineConfig::default()
    };
    let base = pipeline::run_estimation(&ds, &cfg).unwrap();
    let (report, _) = robustness::exclusion_window_rerun(&ds, &cfg, &base, 30).unwrap();
    assert_eq!(report.variant, "exclude_30_days");
    assert_eq!(report.config_diff, vec!["exclusion_band".to_string()]);
}

#[test]
fn eu_share_coefficient_is_calibrated_under_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let level = Normal::new(8.0, 1.0).unwrap();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let share = Uniform::new(0.0, 1.0).unwrap();
    let runs = 200;
    let mut rejected = 0;
    for _ in 0..runs {
        let obs: Vec<ControlObservation> = (0..80)
            .map(|i| {
                let pre: f64 = level.sample(&mut rng);
                let post = 0.1 + 0.98 * pre + noise.sample(&mut rng);
                ControlObservation {
                    instance_id: format!("c{i}"),
                    eu_share: share.sample(&mut rng),
                    pre_visits: pre.exp_m1(),
                    post_visits: post.exp_m1(),
                }
            })
            .collect();
        let rep = robustness::eu_share_analysis(&obs).unwrap();
        if rep.regression[2].p_value < 0.05 {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / runs as f64;
    assert!((0.01..=0.10).contains(&rate), "rejection rate {rate}");
}
