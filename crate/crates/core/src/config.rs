//! Run configuration read from TOML.
//!
//! Every section is optional and every key falls back to its default, so an
//! empty file is a valid configuration. Defaults for the model
//! hyperparameters (alpha, tau1, tau2, gamma, k, batch size, learning rate)
//! are the usual AAPD settings; `configs/toy.toml` holds the preset used
//! for the synthetic benchmark.
//!
//! ```toml
//! [data]
//! num_classes = 12
//! seed = 3
//!
//! [train]
//! learning_rate = 0.01
//! variant = "dcl"
//!
//! [inference]
//! k = 30
//! mode = "denn"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{DennError, Result};
use crate::gradcheck::GradcheckConfig;
use crate::inference::InferenceConfig;
use crate::loss::ContrastiveVariant;
use crate::trainer::TrainConfig;

/// Sweep values for the `ablate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<ContrastiveVariant>,
    pub ks: Vec<usize>,
    pub gammas: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Frequency groups for the per-group report; 0 disables it.
    pub num_groups: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: ContrastiveVariant::ALL.to_vec(),
            ks: vec![1, 5, 10, 30, 50],
            gammas: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            num_groups: 4,
        }
    }
}

impl AblateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.contains(&0) {
            return Err(DennError::config("ablate: every k must be >= 1"));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(DennError::config("ablate: every gamma must lie in (0, 1)"));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(DennError::config("ablate: every fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DennConfig {
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

impl DennConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: DennConfig = toml::from_str(text).map_err(|e| DennError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DennError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            DennError::Config(m) => DennError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DennError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.ablate.validate()
    }

    /// Sets the seed of every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceMode;

    #[test]
    fn empty_file_gives_aapd_defaults() {
        let cfg = DennConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train.alpha, 0.1);
        assert_eq!(cfg.train.tau1, 0.05);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 5e-5);
        assert_eq!(cfg.inference.tau2, 0.05);
        assert_eq!(cfg.inference.gamma, 0.7);
        assert_eq!(cfg.inference.k, 30);
    }

    #[test]
    fn partial_sections_override() {
        let cfg = DennConfig::from_toml_str(
            "[train]\nvariant = \"wscl\"\nlearning_rate = 0.01\n[inference]\nmode = \"knn_only\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.variant, ContrastiveVariant::Wscl);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.inference.mode, InferenceMode::KnnOnly);
        assert_eq!(cfg.train.alpha, 0.1);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            DennConfig::from_toml_str("[train]\nlearnig_rate = 1.0\n"),
            Err(DennError::Config(_))
        ));
        assert!(DennConfig::from_toml_str("[inference]\ngamma = 1.5\n").is_err());
        assert!(DennConfig::from_toml_str("[train\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = DennConfig::default().with_seed(9);
        let back = DennConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
