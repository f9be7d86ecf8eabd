//! Run configuration: every module's settings in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BaseConfig;
use crate::par::Exec;
use crate::pretrain::PretrainConfig;
use crate::synthetic::SyntheticDatasetSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Network preset: `toy` (32x32) or `micro` (8x8).
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "toy".into() }
    }
}

impl ModelSection {
    pub fn base_config(&self) -> Result<BaseConfig> {
        match self.preset.as_str() {
            "toy" => Ok(BaseConfig::toy()),
            "micro" => Ok(BaseConfig::micro()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreSection {
    /// First row blended when mixing styles; absent means the last 40% of rows.
    pub mix_start_row: Option<usize>,
    pub samples: usize,
}

impl Default for ExploreSection {
    fn default() -> Self {
        Self {
            mix_start_row: None,
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub styles: Vec<usize>,
    /// Iterations per timed run; the same for single- and multi-style runs.
    pub iterations: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            styles: vec![4, 8],
            iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every seeded section when resolved.
    pub seed: u64,
    /// Run everything sequentially for bit-reproducible output.
    pub deterministic: bool,
    pub model: ModelSection,
    pub dataset: SyntheticDatasetSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub explore: ExploreSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies overrides, propagates the master seed and checks every section.
    pub fn resolve(mut self, seed: Option<u64>, deterministic: bool) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.deterministic |= deterministic;
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        if self.deterministic {
            self.train.exec = Exec::Sequential;
        }
        let base = self.model.base_config()?;
        self.dataset.resolution = base.generator.resolution();
        self.dataset.validate()?;
        self.pretrain.validate()?;
        self.train.validate(base.discriminator.channels.len())?;
        if self.bench.styles.is_empty() || self.bench.styles.contains(&0) {
            return Err(Error::Config("bench.styles must list positive style counts".into()));
        }
        Ok(self)
    }

    pub fn exec(&self) -> Exec {
        if self.deterministic {
            Exec::Sequential
        } else {
            self.train.exec
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[train]\niterations = 12\n[train.loss]\ncontextual_weight = 0.0\n")
            .unwrap();
        assert_eq!(c.train.iterations, 12);
        assert_eq!(c.train.generator_lr, 2e-3);
        assert_eq!(c.train.loss.contextual_weight, 0.0);
        assert_eq!(c.train.loss.contextual_bandwidth, 0.5);
        let r = c.resolve(None, true).unwrap();
        assert_eq!(r.train.seed, 7);
        assert_eq!(r.exec(), Exec::Sequential);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default().resolve(Some(3), false).unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_fail_resolution() {
        let c = RunConfig::from_toml("[model]\npreset = \"huge\"").unwrap();
        assert!(c.resolve(None, false).is_err());
        let c = RunConfig::from_toml("[train]\nmicro_batch = 0").unwrap();
        assert!(c.resolve(None, false).is_err());
    }
}
