//! Runtime configuration and the token signing secret.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::auth::{TokenKey, MIN_KEY_LEN};
use crate::domain::DEFAULT_ASSET_LIMIT;
use crate::id::Entropy;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_TOKEN_TTL: i64 = 8 * 3600;
pub const DEFAULT_SECRET_FILE: &str = "wms.secret";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub secret_file: PathBuf,
    pub asset_size_limit_bytes: u64,
    pub token_ttl_seconds: i64,
    pub allowed_origins: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            data_dir: PathBuf::from("./data"),
            secret_file: PathBuf::from(DEFAULT_SECRET_FILE),
            asset_size_limit_bytes: DEFAULT_ASSET_LIMIT,
            token_ttl_seconds: DEFAULT_TOKEN_TTL,
            allowed_origins: crate::api::DEFAULT_ORIGINS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("secret file {path} not found (create one with `wms serve --generate-secret`)")]
    MissingSecret { path: PathBuf },
    #[error("secret file {path} holds {len} bytes, at least {MIN_KEY_LEN} are required")]
    WeakSecret { path: PathBuf, len: usize },
    #[error("token ttl must be positive")]
    BadTtl,
    #[error("asset limit must be positive")]
    BadAssetLimit,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.token_ttl_seconds <= 0 {
            return Err(ConfigError::BadTtl);
        }
        if self.asset_size_limit_bytes == 0 {
            return Err(ConfigError::BadAssetLimit);
        }
        Ok(())
    }
}

/// Reads the signing key. Surrounding whitespace is ignored so the file can
/// be edited by hand.
pub fn load_secret(path: &Path) -> Result<TokenKey, ConfigError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ConfigError::MissingSecret { path: path.to_path_buf() })
        }
        Err(source) => return Err(ConfigError::Io { path: path.to_path_buf(), source }),
    };
    let trimmed = bytes.trim_ascii();
    TokenKey::new(trimmed.to_vec()).map_err(|_| ConfigError::WeakSecret { path: path.to_path_buf(), len: trimmed.len() })
}

/// Writes a fresh 256-bit secret as hex, readable by the owner only.
/// An existing file is left alone.
pub fn generate_secret(path: &Path, entropy: &Entropy) -> Result<bool, ConfigError> {
    if path.exists() {
        return Ok(false);
    }
    let io_err = |source| ConfigError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut raw = [0u8; 32];
    entropy.fill(&mut raw);
    let hex: String = raw.iter().map(|b| format!("{b:02x}")).collect();
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(io_err)?;
    f.write_all(format!("{hex}\n").as_bytes()).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    Ok(true)
}
