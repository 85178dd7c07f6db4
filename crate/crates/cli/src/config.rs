//! Run configuration: one TOML file with optional `[dataset]` and `[train]`
//! tables, both falling back to their defaults field by field.

use std::path::Path;

use anyhow::Context;
use odontic::{DatasetSpec, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs: what data to synthesize and how to train on it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl AppConfig {
    /// Reads a config file, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("malformed config {}", path.display()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg: AppConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, AppConfig::default());
    }

    #[test]
    fn partial_tables_override_only_named_fields() {
        let cfg: AppConfig = toml::from_str(
            "[dataset]\nnum_images = 7\n\n[train]\nsteps = 3\n\n[train.loss]\nalpha = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset.num_images, 7);
        assert_eq!(cfg.dataset.feature_dim, DatasetSpec::default().feature_dim);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.loss.alpha, 0.5);
        assert_eq!(cfg.train.loss.gamma, TrainConfig::default().loss.gamma);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<AppConfig>("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(toml::from_str::<AppConfig>("[trian]\nsteps = 3\n").is_err());
    }
}
