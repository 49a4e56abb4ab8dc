//! Server configuration.
//!
//! TOML file, every key optional:
//!
//! ```toml
//! listen = "127.0.0.1:8000"
//!
//! [pool]
//! transient = 12
//! session = 4
//! acquire_timeout_ms = 30000
//!
//! [kv]
//! capacity_cells = 131072
//!
//! [features]
//! radix = true
//! speculation = true
//! response_cache = true
//! grouping = true
//! early_stop = true
//! ```
//!
//! Further sections: `[model]`, `[scheduler]`, `[speculation]`,
//! `[validator]`, `[cache]`, `[cost]`. `DELTASERVE_CONFIG` names the file
//! and `DELTASERVE_LISTEN` overrides the listen address.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;

pub const ENV_CONFIG: &str = "DELTASERVE_CONFIG";
pub const ENV_LISTEN: &str = "DELTASERVE_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8000";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: String,
    #[serde(flatten)]
    pub engine: EngineConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.to_string(),
            engine: EngineConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// File named by `path` or `DELTASERVE_CONFIG` (defaults otherwise),
    /// then the `DELTASERVE_LISTEN` override.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let env_path = std::env::var_os(ENV_CONFIG);
        let path = path.or(env_path.as_deref().map(Path::new));
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Ok(listen) = std::env::var(ENV_LISTEN) {
            cfg.listen = listen;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(ServerConfig::from_toml("").unwrap(), ServerConfig::default());
    }

    #[test]
    fn sections_override_fields() {
        let cfg = ServerConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            [pool]
            transient = 6
            acquire_timeout_ms = 50
            [features]
            radix = false
            [cost]
            t_decode_ms = 10.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.engine.pool.transient, 6);
        assert_eq!(cfg.engine.pool.session, 4);
        assert_eq!(cfg.engine.pool.acquire_timeout.as_millis(), 50);
        assert!(!cfg.engine.features.radix);
        assert!(cfg.engine.features.speculation);
        assert_eq!(cfg.engine.cost.t_decode_ms, 10.0);
    }

    #[test]
    fn bad_toml_is_an_error() {
        assert!(ServerConfig::from_toml("listen = [").is_err());
    }
}
