use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use ssc_core::identity::HashParams;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Paths of bulk files loaded once at startup.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedFiles {
    pub catalog: Option<PathBuf>,
    pub users: Option<PathBuf>,
    pub models: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: String,
    pub storage: PathBuf,
    /// Hex-encoded 32-byte Ed25519 seed. When absent the key is generated
    /// on first start and kept in the storage directory.
    pub framework_key: Option<String>,
    /// JSON key directory document merged into the directory at startup.
    pub key_directory: Option<PathBuf>,
    pub sync_timeout_ms: u64,
    pub task_lease_secs: u64,
    pub token_ttl_secs: u64,
    pub retention_cap: usize,
    pub password_hash: HashParams,
    pub seed: SeedFiles,
    /// Scenario whose administrations are spawned in-process (harness mode).
    pub scenario: Option<PathBuf>,
    pub cors_origins: Vec<String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: "127.0.0.1:8080".into(),
            storage: PathBuf::from("ssc-data"),
            framework_key: None,
            key_directory: None,
            sync_timeout_ms: 5_000,
            task_lease_secs: 15 * 60,
            token_ttl_secs: 8 * 3600,
            retention_cap: ssc_core::eventbus::DEFAULT_RETENTION_CAP,
            password_hash: HashParams::default(),
            seed: SeedFiles::default(),
            scenario: None,
            cors_origins: Vec::new(),
        }
    }
}

impl GatewayConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: GatewayConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.storage);
        for p in [
            &mut cfg.key_directory,
            &mut cfg.seed.catalog,
            &mut cfg.seed.users,
            &mut cfg.seed.models,
            &mut cfg.scenario,
        ]
        .into_iter()
        .flatten()
        {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.sync_timeout_ms, "sync_timeout_ms"),
            (self.task_lease_secs, "task_lease_secs"),
            (self.token_ttl_secs, "token_ttl_secs"),
            (self.retention_cap as u64, "retention_cap"),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.listen.trim().is_empty() {
            return Err(ConfigError::Invalid("listen address is empty".into()));
        }
        if let Some(k) = &self.framework_key {
            framework_seed(k)?;
        }
        Ok(())
    }

    pub fn sync_timeout(&self) -> Duration {
        Duration::from_millis(self.sync_timeout_ms)
    }
}

pub fn framework_seed(hex_seed: &str) -> Result<[u8; 32], ConfigError> {
    let bytes = hex::decode(hex_seed.trim()).map_err(|e| ConfigError::Invalid(format!("framework_key: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| ConfigError::Invalid("framework_key must be 32 bytes".into()))
}
