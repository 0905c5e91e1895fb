use std::path::{Path, PathBuf};

use defilter_core::trainer::TrainConfig;
use defilter_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Run configuration file. Every field has a default; command-line flags
/// take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Corpus root for `gen-data` output and `train`/`eval` input.
    pub corpus: Option<PathBuf>,
    /// Run directory for `train` and `eval`.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sources: Option<PathBuf>,
    pub count: usize,
    pub image_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub bank: Option<PathBuf>,
    pub bank_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sources: None, count: 10, image_size: 64, train_fraction: 0.8, seed: 0, bank: None, bank_seed: 0 }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        toml::from_str(&text).map_err(|e| Error::Format { what: "config file", reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = toml::from_str("corpus = \"c\"\n[train]\ntotal_steps = 5\n[data]\ncount = 3\n").unwrap();
        assert_eq!(cfg.corpus.as_deref(), Some(Path::new("c")));
        assert_eq!(cfg.train.total_steps, 5);
        assert_eq!(cfg.train.lr_generator, 2e-4);
        assert_eq!(cfg.data.count, 3);
        assert!(toml::from_str::<FileConfig>("[train]\nunknown = 1\n").is_err());
    }
}
