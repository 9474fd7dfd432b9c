use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surge_core::model::ModelConfig;
use surge_core::training::TrainConfig;

use crate::error::{CliError, CliResult};

/// Directory searched for `surge.toml` when `--config` is not given.
pub const CONFIG_DIR_ENV: &str = "SURGE_CONFIG_DIR";
pub const CONFIG_FILE: &str = "surge.toml";

/// Contents of a config file: `[model]` and `[train]` tables, both optional.
///
/// Station count and window lengths in `[model]` are taken from the prepared data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::bad_input(format!("{}: {e}", origin.display())))
    }

    /// Reads `explicit`, else `$SURGE_CONFIG_DIR/surge.toml` if it exists, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> CliResult<(Self, Option<PathBuf>)> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_DIR_ENV)
                .map(|d| PathBuf::from(d).join(CONFIG_FILE))
                .filter(|p| p.is_file()),
        };
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::bad_input(format!("cannot read config {}: {e}", path.display()))
        })?;
        Ok((Self::parse(&text, &path)?, Some(path)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use surge_core::model::Variant;

    #[test]
    fn partial_tables_keep_defaults() {
        let cfg = RunConfig::parse(
            "[train]\nepochs = 5\nlearning_rate = 1e-3\n[model]\nvariant = \"gcn_lstm\"\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 20);
        assert_eq!(cfg.model.variant, Variant::GcnLstm);
        assert_eq!(cfg.model.lstm_layers, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nepoch = 5\n", Path::new("x.toml")).unwrap_err();
        assert_eq!(err.code(), 2);
    }
}
