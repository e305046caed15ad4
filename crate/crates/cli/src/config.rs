//! TOML run configuration.

use std::path::{Path, PathBuf};

use panelfx_core::calendar::WindowLabel;
use panelfx_core::cohorts::{Grouping, RankKind};
use panelfx_core::model::MetricKind;
use panelfx_core::pipeline::PipelineConfig;
use panelfx_core::revenue::RevenueModel;
use panelfx_core::robustness::DonorVariant;
use panelfx_core::simkit::{SimConfig, SimError};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; absent means rayon's default.
    pub threads: Option<usize>,
    pub input: InputConfig,
    pub output: OutputConfig,
    pub pipeline: PipelineConfig,
    pub simulate: SimConfig,
    pub cohorts: CohortConfig,
    pub robustness: RobustnessConfig,
    pub revenue: Vec<RevenueEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threads: None,
            input: InputConfig::default(),
            output: OutputConfig::default(),
            pipeline: PipelineConfig::default(),
            simulate: SimConfig::default(),
            cohorts: CohortConfig::default(),
            robustness: RobustnessConfig::default(),
            revenue: vec![
                RevenueEntry {
                    name: "ecommerce".into(),
                    model: RevenueModel::reference_ecommerce(),
                    delta: DeltaSource::Estimate {
                        metric: MetricKind::TotalVisits,
                        window: WindowLabel::M18,
                    },
                },
                RevenueEntry {
                    name: "adbased".into(),
                    model: RevenueModel::reference_adbased(),
                    delta: DeltaSource::Estimate {
                        metric: MetricKind::PageImpressions,
                        window: WindowLabel::M18,
                    },
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Long-format panel CSV files, relative to the config file.
    pub panels: Vec<PathBuf>,
    pub delimiter: char,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            panels: Vec::new(),
            delimiter: ',',
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub groupings: Vec<Grouping>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let mut groupings = vec![Grouping::All, Grouping::Industry, Grouping::Country];
        groupings.extend(RankKind::ALL.map(Grouping::Decile));
        Self { groupings }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub threshold_lo: f64,
    pub threshold_hi: f64,
    pub threshold_step: f64,
    pub exclusion_days: u32,
    pub donor_variants: Vec<DonorVariant>,
    /// Window for the EU-share and crossed-table analyses.
    pub window: WindowLabel,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            threshold_lo: 700.0,
            threshold_hi: 2000.0,
            threshold_step: 100.0,
            exclusion_days: 30,
            donor_variants: DonorVariant::ALL.to_vec(),
            window: WindowLabel::M18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevenueEntry {
    pub name: String,
    pub model: RevenueModel,
    pub delta: DeltaSource,
}

/// Where a revenue calculation takes its relative change from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum DeltaSource {
    Fixed { value: f64 },
    /// Mean website delta from a prior `estimate` run.
    Estimate { metric: MetricKind, window: WindowLabel },
}

impl RunConfig {
    /// Read and parse `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let de = toml::Deserializer::parse(&text).map_err(|e| CliError::Config {
            field: String::new(),
            message: e.to_string().trim().to_string(),
        })?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            field: e.path().to_string(),
            message: e.inner().to_string().trim().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut cfg.input.panels {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = &mut cfg.output.dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |f: &str, m: &str| CliError::Config {
            field: f.to_string(),
            message: m.to_string(),
        };
        if self.threads == Some(0) {
            return Err(field("threads", "must be at least 1"));
        }
        if !self.input.delimiter.is_ascii() {
            return Err(field("input.delimiter", "must be a single ASCII character"));
        }
        self.pipeline.validate().map_err(|e| {
            let msg = e.to_string();
            let msg = msg.trim_start_matches("invalid configuration: ");
            match msg.split_once(": ") {
                Some((f, m)) => field(&format!("pipeline.{f}"), m),
                None => field("pipeline", msg),
            }
        })?;
        self.simulate.validate().map_err(|e| match e {
            SimError::Invalid(m) => {
                let name = m.split_whitespace().next().unwrap_or_default();
                field(&format!("simulate.{name}"), &m)
            }
            other => field("simulate", &other.to_string()),
        })?;
        for (i, r) in self.revenue.iter().enumerate() {
            r.model
                .validate()
                .map_err(|e| field(&format!("revenue[{i}].model"), &e.to_string()))?;
        }
        let rb = &self.robustness;
        let ordered = rb.threshold_step > 0.0 && rb.threshold_lo >= 0.0 && rb.threshold_lo <= rb.threshold_hi;
        if !ordered {
            return Err(field(
                "robustness.threshold_step",
                "thresholds need 0 <= threshold_lo <= threshold_hi and a positive step",
            ));
        }
        if self.cohorts.groupings.is_empty() {
            return Err(field("cohorts.groupings", "at least one grouping required"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[input]\npanels = [\"a.csv\"]\n[output]\ndir = \"o\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.input.panels, vec![dir.path().join("a.csv")]);
        assert_eq!(cfg.output.dir, Some(dir.path().join("o")));
    }

    #[test]
    fn pipeline_errors_carry_field_path() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.inference.method = panelfx_core::pipeline::InferenceMethod::Placebo;
        cfg.pipeline.inference.n_placebo = 0;
        match cfg.validate() {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "pipeline.inference.n_placebo"),
            other => panic!("{other:?}"),
        }
    }
}
