//! Settings file and precedence.
//!
//! Each setting is taken from the command-line flag, else its environment
//! variable, else the config file, else the default:
//!
//! | key          | flag           | environment        | default             |
//! |--------------|----------------|--------------------|---------------------|
//! | db_dir       | `--db-dir`     | `SQLFIX_DB_DIR`    | next to the tasks   |
//! | workers      | `--workers`    | `SQLFIX_WORKERS`   | available cores     |
//! | out          | `--out`        | `SQLFIX_OUT`       | `out`               |
//! | isolation    | `--isolation`  | `SQLFIX_ISOLATION` | per dialect         |
//! | prompts      | `--prompts`    | `SQLFIX_PROMPTS`   | built-in bundle     |
//! | seed         | `--seed`       | `SQLFIX_SEED`      | 0                   |
//! | remote.endpoint | -           | `SQLFIX_ENDPOINT`  | local server        |
//! | remote.model | -              | `SQLFIX_MODEL`     | `default`           |
//!
//! The config file itself comes from `--config` or `SQLFIX_CONFIG`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sqlfix_core::factory::CostModel;
use sqlfix_core::gateway::RemoteConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub db_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub isolation: Option<String>,
    pub prompts: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub remote: RemoteSection,
    #[serde(default)]
    pub cost: CostModel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub max_attempts: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub max_backoff_ms: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub timeout_ms: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Remote settings with environment overrides applied.
    pub fn remote_config(&self, model_override: Option<&str>) -> RemoteConfig {
        let mut c = RemoteConfig::default();
        let r = &self.remote;
        if let Some(v) = std::env::var("SQLFIX_ENDPOINT")
            .ok()
            .or_else(|| r.endpoint.clone())
        {
            c.endpoint = v;
        }
        if let Some(v) = model_override
            .map(str::to_string)
            .or_else(|| std::env::var("SQLFIX_MODEL").ok())
            .or_else(|| r.model.clone())
        {
            c.model = v;
        }
        if let Some(v) = &r.api_key_env {
            c.api_key_env = Some(v.clone());
        }
        c.max_attempts = r.max_attempts.unwrap_or(c.max_attempts);
        c.backoff_ms = r.backoff_ms.unwrap_or(c.backoff_ms);
        c.max_backoff_ms = r.max_backoff_ms.unwrap_or(c.max_backoff_ms);
        c.max_in_flight = r.max_in_flight.unwrap_or(c.max_in_flight);
        c.timeout_ms = r.timeout_ms.unwrap_or(c.timeout_ms);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c: ConfigFile = toml::from_str(
            "workers = 2\nisolation = \"rollback\"\n[remote]\nmodel = \"m\"\nmax_attempts = 5\n[cost]\ninput_per_mtok = 1.5\noutput_per_mtok = 3.0\n",
        )
        .unwrap();
        assert_eq!(c.workers, Some(2));
        assert_eq!(c.cost.output_per_mtok, 3.0);
        let r = c.remote_config(Some("flag-model"));
        assert_eq!((r.model.as_str(), r.max_attempts), ("flag-model", 5));
        assert!(toml::from_str::<ConfigFile>("wrkers = 2").is_err());
    }
}
