use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use fairdp::{CertificateEvent, CsvSchema, FairnessMetric, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Fairdp,
    Dpsgd,
    Fairfm,
    FairfmSmooth,
    DpsgdSmooth,
}

impl Mechanism {
    pub fn is_sgd(self) -> bool {
        matches!(self, Mechanism::Fairdp | Mechanism::Dpsgd | Mechanism::DpsgdSmooth)
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Mechanism::FairfmSmooth | Mechanism::DpsgdSmooth)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Fairdp => "fairdp",
            Mechanism::Dpsgd => "dpsgd",
            Mechanism::Fairfm => "fairfm",
            Mechanism::FairfmSmooth => "fairfm-smooth",
            Mechanism::DpsgdSmooth => "dpsgd-smooth",
        })
    }
}

impl FromStr for Mechanism {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "fairdp" => Mechanism::Fairdp,
            "dpsgd" => Mechanism::Dpsgd,
            "fairfm" => Mechanism::Fairfm,
            "fairfm-smooth" => Mechanism::FairfmSmooth,
            "dpsgd-smooth" => Mechanism::DpsgdSmooth,
            other => bail!("unknown mechanism `{other}`"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub label: String,
    pub protected: Vec<String>,
    /// Empty selects every remaining column.
    #[serde(default)]
    pub features: Vec<String>,
}

impl DatasetSpec {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            features: self.features.clone(),
            protected: self.protected.clone(),
            label: self.label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairFmSettings {
    pub eta: f64,
    pub steps: usize,
}

impl Default for FairFmSettings {
    fn default() -> Self {
        FairFmSettings { eta: 1.0, steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothSettings {
    pub sigma_bar: f64,
    pub samples: usize,
}

impl Default for SmoothSettings {
    fn default() -> Self {
        SmoothSettings {
            sigma_bar: 0.01,
            samples: 100,
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_event() -> CertificateEvent {
    CertificateEvent::DEMOGRAPHIC_PARITY
}

fn default_metrics() -> Vec<FairnessMetric> {
    FairnessMetric::ALL.to_vec()
}

/// One experiment, as stored in `spec.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub mechanism: Mechanism,
    pub out: PathBuf,
    /// Calibrates the noise multiplier for SGD mechanisms; the privacy
    /// budget itself for the functional mechanism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_epsilon: Option<f64>,
    /// Cap on the largest-to-smallest group size ratio in the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_event")]
    pub event: CertificateEvent,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<FairnessMetric>,
    /// Also write the certificate of every SGD round.
    #[serde(default)]
    pub trajectory: bool,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fairfm: FairFmSettings,
    #[serde(default)]
    pub smoothing: SmoothSettings,
    /// `train` keys given explicitly in the file or on the command line.
    #[serde(skip)]
    pub explicit_train: BTreeSet<String>,
}

impl ExperimentSpec {
    pub fn new(seed: u64, mechanism: Mechanism, dataset: DatasetSpec, out: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            seed,
            mechanism,
            out: out.into(),
            target_epsilon: None,
            rho: None,
            test_fraction: default_test_fraction(),
            event: default_event(),
            metrics: default_metrics(),
            trajectory: false,
            dataset,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            fairfm: FairFmSettings::default(),
            smoothing: SmoothSettings::default(),
            explicit_train: BTreeSet::new(),
        }
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let raw: toml::Table = toml::from_str(text).context("parsing experiment spec")?;
        let explicit_train = raw
            .get("train")
            .and_then(|t| t.as_table())
            .map(|t| t.keys().cloned().collect())
            .unwrap_or_default();
        let mut spec: ExperimentSpec = toml::from_str(text).context("parsing experiment spec")?;
        spec.explicit_train = explicit_train;
        spec.train.seed = spec.seed;
        Ok(spec)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn is_explicit(&self, train_key: &str) -> bool {
        self.explicit_train.contains(train_key)
    }

    pub fn mark_explicit(&mut self, train_key: &str) {
        self.explicit_train.insert(train_key.to_string());
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("test_fraction must be in (0, 1), got {}", self.test_fraction);
        }
        if let Some(e) = self.target_epsilon {
            if e.is_nan() || e <= 0.0 {
                bail!("target_epsilon must be > 0, got {e}");
            }
        }
        if matches!(self.mechanism, Mechanism::Fairfm | Mechanism::FairfmSmooth) && self.target_epsilon.is_none() {
            bail!("mechanism {} needs target_epsilon", self.mechanism);
        }
        if self.dataset.protected.is_empty() {
            bail!("dataset.protected must name at least one column");
        }
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
mechanism = "fairdp"
out = "runs/a"

[dataset]
path = "data.csv"
label = "y"
protected = ["g"]
"#;

    #[test]
    fn minimal_spec_takes_defaults() {
        let s = ExperimentSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(s.train.seed, 7);
        assert_eq!(s.train.switch_fraction, 0.9);
        assert_eq!(s.event, CertificateEvent::DEMOGRAPHIC_PARITY);
        assert!(!s.is_explicit("clip_m"));
        s.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut s = ExperimentSpec::from_toml(MINIMAL).unwrap();
        s.target_epsilon = Some(1.5);
        s.train.clip_m = 0.3;
        let back = ExperimentSpec::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.target_epsilon, Some(1.5));
        assert!(back.is_explicit("clip_m"));
    }

    #[test]
    fn infinite_clip_is_omitted() {
        let mut s = ExperimentSpec::from_toml(MINIMAL).unwrap();
        s.train.clip_m = f64::INFINITY;
        let text = s.to_toml().unwrap();
        assert!(!text.contains("clip_m"));
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 7", "");
        assert!(ExperimentSpec::from_toml(&text).is_err());
    }

    #[test]
    fn fairfm_needs_epsilon() {
        let text = MINIMAL.replace("\"fairdp\"", "\"fairfm\"");
        let s = ExperimentSpec::from_toml(&text).unwrap();
        assert!(s.validate().is_err());
    }
}
