use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use panelfx_core::cohorts::{self, CohortSummary, Grouping};
use panelfx_core::effects::{self, GainLoseRow, WebsiteEffectRow};
use panelfx_core::ingest::{self, IngestError, PanelDataset, SchemaConfig, SourceDigest};
use panelfx_core::model::IntensityMetric;
use panelfx_core::output::{write_csv_file, write_json_file};
use panelfx_core::pipeline::{self, EstimationOutput};
use panelfx_core::revenue::revenue_impact;
use panelfx_core::robustness;
use panelfx_core::simkit;
use panelfx_core::stats;
use serde::Serialize;

use crate::config::{DeltaSource, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Ingest,
    Estimate,
    Intensity,
    Cohorts,
    Revenue,
    Simulate,
    Robustness,
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Estimate => "estimate",
            Command::Intensity => "intensity",
            Command::Cohorts => "cohorts",
            Command::Revenue => "revenue",
            Command::Simulate => "simulate",
            Command::Robustness => "robustness",
            Command::Report => "report",
        }
    }
}

pub const ESTIMATION_FILE: &str = "estimation.json";

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: Command,
    created_at: String,
    inputs: &'a [SourceDigest],
    artifacts: Vec<Artifact>,
    config: &'a RunConfig,
}

/// One command invocation: resolved config, output directory and the files
/// written so far.
pub struct Run {
    command: Command,
    config: RunConfig,
    out: PathBuf,
    inputs: Vec<SourceDigest>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    pub fn new(command: Command, config: RunConfig, out: PathBuf) -> Self {
        Self {
            command,
            config,
            out,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        write_csv_file(rows, &self.out.join(name))?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        write_json_file(value, &self.out.join(name))?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(CliError::failed)?;
        }
        std::fs::write(&path, body).map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?;
        self.artifacts.push(name.into());
        Ok(())
    }

    pub fn execute(mut self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::failed(format!("{}: {e}", self.out.display())))?;
        match self.command {
            Command::Ingest => self.ingest()?,
            Command::Estimate => self.estimate()?,
            Command::Intensity => self.intensity()?,
            Command::Cohorts => self.cohorts()?,
            Command::Revenue => self.revenue()?,
            Command::Simulate => self.simulate()?,
            Command::Robustness => self.robustness()?,
            Command::Report => self.report()?,
        }
        self.finish()
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        let echo = toml::to_string_pretty(&self.config).map_err(CliError::failed)?;
        self.text("config.resolved.toml", &echo)?;
        let mut artifacts = Vec::new();
        for rel in &self.artifacts {
            let bytes = std::fs::read(self.out.join(rel)).map_err(CliError::failed)?;
            artifacts.push(Artifact {
                path: rel.display().to_string(),
                sha256: ingest::sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            tool: "panelfx",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            created_at: chrono::Utc::now().to_rfc3339(),
            inputs: &self.inputs,
            artifacts,
            config: &self.config,
        };
        let name = format!("{}.manifest.json", self.command.name());
        write_json_file(&manifest, &self.out.join(&name))?;
        Ok(self.out.join(name))
    }

    fn load_panels(&mut self) -> Result<PanelDataset, CliError> {
        let paths = &self.config.input.panels;
        if paths.is_empty() {
            return Err(CliError::Config {
                field: "input.panels".into(),
                message: "at least one panel file is required for this command".into(),
            });
        }
        let schema = SchemaConfig {
            delimiter: self.config.input.delimiter as u8,
        };
        let mut instances = Vec::new();
        let mut provenance = Vec::new();
        for path in paths {
            let ds = ingest::parse_panel(path, &schema).map_err(|e| match e {
                IngestError::Io { source, .. } => CliError::input(path, source),
                other => CliError::failed(format!("{}: {other}", path.display())),
            })?;
            provenance.extend(ds.provenance);
            instances.extend(ds.instances.into_values());
        }
        let mut ds = PanelDataset::from_instances(instances).map_err(CliError::failed)?;
        ds.provenance = provenance;
        self.inputs = ds.provenance.clone();
        Ok(ds)
    }

    fn load_estimation(&mut self) -> Result<EstimationOutput, CliError> {
        let path = self.out.join(ESTIMATION_FILE);
        let bytes = std::fs::read(&path).map_err(|e| CliError::input(&path, e))?;
        self.inputs.push(SourceDigest {
            source: path.display().to_string(),
            sha256: ingest::sha256_hex(&bytes),
        });
        serde_json::from_slice(&bytes).map_err(|e| CliError::failed(format!("{}: {e}", path.display())))
    }

    fn ingest(&mut self) -> Result<(), CliError> {
        let raw = self.load_panels()?;
        let (filtered, report) = ingest::apply_filters(&raw, &self.config.pipeline.filters, &self.config.pipeline.calendar);
        let mut buf = Vec::new();
        ingest::write_panel(&filtered, &mut buf).map_err(CliError::failed)?;
        let text = String::from_utf8(buf).map_err(CliError::failed)?;
        self.text("panel_filtered.csv", &text)?;
        self.json("filter_report.json", &report)
    }

    fn estimate(&mut self) -> Result<(), CliError> {
        let raw = self.load_panels()?;
        let (out, report) = pipeline::run_pipeline(&raw, &self.config.pipeline).map_err(CliError::failed)?;
        self.json("filter_report.json", &report)?;
        self.csv("instance_effects.csv", &out.instance_effects)?;
        let rows: Vec<WebsiteEffectRow> = out.website_effects.iter().map(WebsiteEffectRow::from).collect();
        self.csv("website_effects.csv", &rows)?;
        self.csv("failures.csv", &out.failures)?;
        self.json("synth_fits.json", &out.synth_fits)?;
        if !out.placebo.is_empty() {
            self.json("placebo.json", &out.placebo)?;
        }
        self.json(ESTIMATION_FILE, &out)
    }

    fn intensity(&mut self) -> Result<(), CliError> {
        let out = self.load_estimation()?;
        let gain_lose = gain_lose_rows(&out);
        self.csv("intensity_effects.csv", &out.intensity_effects)?;
        self.csv("gain_lose.csv", &gain_lose)?;
        self.json("gain_lose.json", &gain_lose)
    }

    fn cohort_rows(&self, out: &EstimationOutput) -> Result<Vec<CohortSummary>, CliError> {
        let mut rows = Vec::new();
        for g in &self.config.cohorts.groupings {
            rows.extend(cohorts::summarize(&out.website_effects, &out.attributes, *g).map_err(CliError::failed)?);
        }
        Ok(rows)
    }

    fn cohorts(&mut self) -> Result<(), CliError> {
        let out = self.load_estimation()?;
        let rows = self.cohort_rows(&out)?;
        self.csv("cohort_summary.csv", &rows)?;
        self.json("cohort_summary.json", &rows)?;
        self.csv("cohort_plot.csv", &cohorts::plot_series(&rows))
    }

    fn revenue(&mut self) -> Result<(), CliError> {
        let needs_estimate = self
            .config
            .revenue
            .iter()
            .any(|r| matches!(r.delta, DeltaSource::Estimate { .. }));
        let out = if needs_estimate {
            Some(self.load_estimation()?)
        } else {
            None
        };
        let mut rows = Vec::new();
        for entry in &self.config.revenue {
            let delta = match (entry.delta, &out) {
                (DeltaSource::Fixed { value }, _) => value,
                (DeltaSource::Estimate { metric, window }, Some(out)) => {
                    let d: Vec<f64> = out
                        .website_effects
                        .iter()
                        .filter(|e| e.metric == metric && e.window == window)
                        .map(|e| e.delta)
                        .collect();
                    stats::mean(&d).ok_or_else(|| {
                        CliError::failed(format!("revenue `{}`: no website effects for {metric} {window}", entry.name))
                    })?
                }
                (DeltaSource::Estimate { .. }, None) => unreachable!("estimation loaded above"),
            };
            let impact = revenue_impact(&entry.model, delta).map_err(CliError::failed)?;
            rows.push(RevenueRow {
                name: entry.name.clone(),
                delta,
                baseline_revenue: impact.baseline_revenue,
                revenue_change: impact.revenue_change,
                baseline: impact.baseline_cents.to_string(),
                change: impact.change_cents.to_string(),
            });
        }
        self.csv("revenue.csv", &rows)?;
        self.json("revenue.json", &rows)
    }

    fn simulate(&mut self) -> Result<(), CliError> {
        let (panel, truth) = simkit::generate_panel(&self.config.simulate).map_err(CliError::failed)?;
        let mut buf = Vec::new();
        ingest::write_panel(&panel, &mut buf).map_err(CliError::failed)?;
        let text = String::from_utf8(buf).map_err(CliError::failed)?;
        self.text("panel.csv", &text)?;
        self.json("ground_truth.json", &truth)
    }

    fn robustness(&mut self) -> Result<(), CliError> {
        let raw = self.load_panels()?;
        let cfg = self.config.pipeline.clone();
        let rb = self.config.robustness.clone();
        let cal = &cfg.calendar;

        let grid = robustness::threshold_grid(rb.threshold_lo, rb.threshold_hi, rb.threshold_step);
        let sweep = robustness::threshold_sweep(&raw, &grid, cfg.filters.min_avg_weekly_visits, &cfg.filters, cal)
            .map_err(CliError::failed)?;
        self.csv("robustness/threshold_sweep.csv", &sweep.rows)?;
        self.json("robustness/threshold_sweep.json", &sweep)?;

        let (ds, _) = ingest::apply_filters(&raw, &cfg.filters, cal);
        let base = pipeline::run_estimation(&ds, &cfg).map_err(CliError::failed)?;
        let mut comparisons = Vec::new();
        let (excl, _) = robustness::exclusion_window_rerun(&ds, &cfg, &base, rb.exclusion_days).map_err(CliError::failed)?;
        comparisons.push(excl);
        for v in &rb.donor_variants {
            let (rep, _) = robustness::donor_variant_rerun(&ds, &cfg, &base, *v).map_err(CliError::failed)?;
            comparisons.push(rep);
        }
        for rep in &comparisons {
            self.csv(&format!("robustness/{}.csv", rep.variant), &rep.rows)?;
        }
        self.json("robustness/comparisons.json", &comparisons)?;

        let obs = robustness::eu_share_observations(&ds, cal, rb.window);
        match robustness::eu_share_analysis(&obs) {
            Ok(eu) => {
                self.csv("robustness/eu_share_deciles.csv", &eu.deciles)?;
                self.csv("robustness/eu_share_regression.csv", &eu.regression)?;
                self.json("robustness/eu_share.json", &eu)?;
            }
            // e.g. no control has EU traffic, so the share column is constant
            Err(e) => self.json(
                "robustness/eu_share_skipped.json",
                &serde_json::json!({ "analysis": "eu_share", "reason": e.to_string() }),
            )?,
        }
        let crossed = robustness::crossed_did_table(&ds, cal, rb.window);
        self.json("robustness/crossed_did.json", &crossed)
    }

    fn report(&mut self) -> Result<(), CliError> {
        let out = self.load_estimation()?;
        let summary = cohorts::summarize(&out.website_effects, &out.attributes, Grouping::All).map_err(CliError::failed)?;
        let gain_lose = gain_lose_rows(&out);
        let mut md = String::from("# panelfx report\n\n");
        let _ = writeln!(
            md,
            "{} instance effects, {} website effects, {} failures.\n",
            out.instance_effects.len(),
            out.website_effects.len(),
            out.failures.len()
        );
        md.push_str("## Website effects\n\n| metric | window | n | mean | median | share negative | share significant |\n|---|---|---|---|---|---|---|\n");
        for r in &summary {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:+.2}% | {:+.2}% | {:.1}% | {:.1}% |",
                r.metric,
                r.window,
                r.n,
                100.0 * r.mean_delta,
                100.0 * r.median_delta,
                100.0 * r.share_negative,
                100.0 * r.share_significant
            );
        }
        md.push_str("\n## Intensity by gain/lose\n\n| intensity | window | gain share | gain mean | lose share | lose mean |\n|---|---|---|---|---|---|\n");
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:+.2}%", 100.0 * x));
        for r in &gain_lose {
            let _ = writeln!(
                md,
                "| {} | {} | {:.1}% | {} | {:.1}% | {} |",
                r.intensity_metric,
                r.window,
                100.0 * r.gain_share,
                pct(r.gain_mean),
                100.0 * r.lose_share,
                pct(r.lose_mean)
            );
        }
        self.json(
            "report.json",
            &serde_json::json!({
                "instance_effects": out.instance_effects.len(),
                "website_effects": out.website_effects.len(),
                "failures": out.failures.len(),
                "summary": summary,
                "gain_lose": gain_lose,
            }),
        )?;
        self.text("report.md", &md)
    }
}

#[derive(Serialize)]
struct RevenueRow {
    name: String,
    delta: f64,
    baseline_revenue: f64,
    revenue_change: f64,
    baseline: String,
    change: String,
}

fn gain_lose_rows(out: &EstimationOutput) -> Vec<GainLoseRow> {
    let mut windows: Vec<_> = out.website_effects.iter().map(|e| e.window).collect();
    windows.sort_unstable();
    windows.dedup();
    let mut rows = Vec::new();
    for m in IntensityMetric::ALL {
        for w in &windows {
            let split = effects::gain_lose_split(&out.website_effects, &out.intensity_effects, m, *w);
            if split.gain.n + split.lose.n > 0 {
                rows.push(GainLoseRow::from(&split));
            }
        }
    }
    rows
}

/// Output directory: flag, then config, then `PANELFX_OUT`, then `panelfx-out`.
pub fn resolve_out(flag: Option<&Path>, config: &RunConfig, env: Option<PathBuf>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone())
        .or(env)
        .unwrap_or_else(|| PathBuf::from("panelfx-out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dir_precedence() {
        let mut cfg = RunConfig::default();
        let env = Some(PathBuf::from("env"));
        assert_eq!(resolve_out(None, &cfg, None), PathBuf::from("panelfx-out"));
        assert_eq!(resolve_out(None, &cfg, env.clone()), PathBuf::from("env"));
        cfg.output.dir = Some("cfg".into());
        assert_eq!(resolve_out(None, &cfg, env.clone()), PathBuf::from("cfg"));
        assert_eq!(resolve_out(Some(Path::new("flag")), &cfg, env), PathBuf::from("flag"));
    }
}
