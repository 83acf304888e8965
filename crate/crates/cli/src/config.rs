//! Run configuration: TOML with nominal defaults for every section.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bmix_core::analysis::Binning;
use bmix_core::fitkit::{BinRule, Constraint, CovarianceMode, FitConfig};
use bmix_core::study::{SmearVariation, StudyConfig};
use bmix_core::toygen::{BackgroundConfig, DetectorConfig, DEFAULT_EVENTS_PER_STREAM};
use bmix_core::unfold::UnfoldConfig;
use bmix_core::{Error, Model, ModelParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed; required by stochastic commands unless given with --seed.
    pub seed: Option<u64>,
    /// Generating model for `generate`.
    pub generator: Model,
    pub n_signal: u64,
    pub events_per_stream: u64,
    pub mc_events: u64,
    /// Pseudo-experiments per model for the bias correction.
    pub replicas: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: None,
            generator: Model::Qm,
            n_signal: 7815,
            events_per_stream: DEFAULT_EVENTS_PER_STREAM,
            mc_events: 500_000,
            replicas: 300,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSection {
    pub edges: Vec<f64>,
}

impl Default for BinningSection {
    fn default() -> Self {
        Self {
            edges: Binning::default().edges().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub mistag_err: f64,
    pub smear_delta_um: f64,
    pub smear_variation: SmearVariation,
    /// Per-bin event-selection systematic; the published column when omitted.
    pub event_selection: Option<Vec<f64>>,
    pub bin_rule: BinRule,
    pub covariance: CovarianceMode,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            mistag_err: 0.005,
            smear_delta_um: 35.0,
            smear_variation: SmearVariation::Linear,
            event_selection: None,
            bin_rule: BinRule::RateWeighted,
            covariance: CovarianceMode::Diagonal,
        }
    }
}

fn nominal_backgrounds() -> BackgroundConfig {
    BackgroundConfig::nominal()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// A present `[backgrounds]` table replaces the nominal defaults entirely.
    #[serde(default = "nominal_backgrounds")]
    pub backgrounds: BackgroundConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub binning: BinningSection,
    #[serde(default)]
    pub unfold: UnfoldConfig,
    #[serde(default)]
    pub constraint: Constraint,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            detector: DetectorConfig::default(),
            backgrounds: nominal_backgrounds(),
            run: RunSection::default(),
            binning: BinningSection::default(),
            unfold: UnfoldConfig::default(),
            constraint: Constraint::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self::from_toml(&text, &path.display().to_string())?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let binning = self.binning()?;
        self.model.validate()?;
        self.detector.validate()?;
        self.backgrounds.validate()?;
        self.unfold.validate(binning.len())?;
        self.constraint.validate()?;
        if self.run.replicas == 0 || self.run.n_signal == 0 || self.run.mc_events == 0 || self.run.events_per_stream == 0 {
            return Err(Error::Config("run.replicas, n_signal, mc_events and events_per_stream must be > 0".into()));
        }
        self.study(0)?.validate()?;
        Ok(())
    }

    pub fn binning(&self) -> Result<Binning, Error> {
        Binning::new(self.binning.edges.clone())
    }

    /// Seed from the command line, else from `[run]`.
    pub fn seed(&self, cli: Option<u64>) -> anyhow::Result<u64> {
        match cli.or(self.run.seed) {
            Some(s) => Ok(s),
            None => bail!(Error::Config("this command is stochastic: pass --seed or set run.seed".into())),
        }
    }

    pub fn study(&self, seed: u64) -> Result<StudyConfig, Error> {
        Ok(StudyConfig {
            params: self.model,
            detector: self.detector,
            backgrounds: self.backgrounds.clone(),
            binning: self.binning()?,
            unfold: self.unfold,
            n_signal: self.run.n_signal,
            mc_events: self.run.mc_events,
            mistag_err: self.analysis.mistag_err,
            smear_delta_um: self.analysis.smear_delta_um,
            smear_variation: self.analysis.smear_variation,
            event_selection: self.analysis.event_selection.clone(),
            replicas: self.run.replicas,
            seed,
        })
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            constraint: self.constraint,
            tau: self.model.tau,
            rule: self.analysis.bin_rule,
            covariance: self.analysis.covariance,
            ..FitConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::from_toml("", "empty").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.backgrounds, BackgroundConfig::nominal());
        assert_eq!(c.constraint.mean, 0.496);
    }

    #[test]
    fn partial_sections() {
        let c = RunConfig::from_toml("[model]\ndm = 0.5\n[run]\nseed = 9\n[backgrounds]\n", "t").unwrap();
        assert_eq!(c.model.dm, 0.5);
        assert_eq!(c.model.tau, 1.53);
        assert_eq!(c.run.seed, Some(9));
        assert_eq!(c.backgrounds.sources().count(), 0);
    }

    #[test]
    fn diagnostics_name_field_and_line() {
        let e = RunConfig::from_toml("[model]\ndm = 0.5\ndmm = 1\n", "cfg.toml").unwrap_err().to_string();
        assert!(e.contains("cfg.toml") && e.contains("dmm") && e.contains("line 3"), "{e}");
        let e = RunConfig::from_toml("[detector]\nmistag_fraction = 0.7\n", "cfg.toml").unwrap_err().to_string();
        assert!(e.contains("mistag_fraction"), "{e}");
        let e = RunConfig::from_toml("[binning]\nedges = [0, 2, 1]\n", "cfg.toml").unwrap_err().to_string();
        assert!(e.contains("strictly increasing"), "{e}");
    }

    #[test]
    fn seed_is_mandatory() {
        let c = RunConfig::default();
        assert!(c.seed(None).is_err());
        assert_eq!(c.seed(Some(3)).unwrap(), 3);
    }
}
