//! Single-file pipeline configuration with flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::ProviderConfig;
use crate::error::{Error, Result};
use crate::kvmap::KvConfig;
use crate::llm::StageConfig;
use crate::tiler::TilingConfig;

/// Everything a pipeline run needs, mirrored one-to-one by the JSON config
/// file. Secrets (the API key) come from the environment, never from the
/// file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tiling: TilingConfig,
    pub kv: KvConfig,
    pub detector: ProviderConfig,
    pub stages: StageConfig,
    /// Path to a keyword-spec JSON file; the built-in spec when unset.
    pub keywords: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tiling: TilingConfig::default(),
            kv: KvConfig::default(),
            detector: ProviderConfig::default(),
            stages: StageConfig::default(),
            keywords: None,
            output_dir: PathBuf::from("out"),
            parallelism: 1,
        }
    }
}

/// Environment variable carrying the chat endpoint API key.
pub const API_KEY_ENV: &str = "BLADESCAN_API_KEY";

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        self.kv.validate()?;
        self.detector.validate()?;
        self.stages.validate()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn api_key() -> Option<String> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
    }
}
