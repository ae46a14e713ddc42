use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DaemonError;
use crate::authenticator::RpId;
use crate::crypto::DEFAULT_ENVELOPE_TTL;

/// Where the daemon gets its user identity from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdentityConfig {
    /// Always the same fixed user.
    Mock { user_id: String },
    /// Read from a JSON file written by some interactive sign-in step.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaemonConfig {
    pub relay_url: String,
    pub rp_url: String,
    /// Seconds between mailbox polls.
    #[serde(default = "default_poll_interval")]
    pub poll_interval: u64,
    /// Maximum envelope age accepted, in seconds.
    #[serde(default = "default_token_ttl")]
    pub token_ttl: u64,
    pub state_path: PathBuf,
    /// Per-request timeout, in seconds.
    #[serde(default = "default_network_timeout")]
    pub network_timeout: u64,
    pub identity: IdentityConfig,
    /// Defaults to the host of `rp_url`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rp_id: Option<String>,
}

fn default_poll_interval() -> u64 {
    2
}

fn default_token_ttl() -> u64 {
    DEFAULT_ENVELOPE_TTL
}

fn default_network_timeout() -> u64 {
    5
}

impl DaemonConfig {
    /// Config with defaults and a mock identity, mostly for tests.
    pub fn new(relay_url: &str, rp_url: &str, state_path: impl Into<PathBuf>, user_id: &str) -> Self {
        DaemonConfig {
            relay_url: relay_url.to_owned(),
            rp_url: rp_url.to_owned(),
            poll_interval: default_poll_interval(),
            token_ttl: default_token_ttl(),
            state_path: state_path.into(),
            network_timeout: default_network_timeout(),
            identity: IdentityConfig::Mock { user_id: user_id.to_owned() },
            rp_id: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DaemonError> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| DaemonError::Config(format!("{}: {e}", path.display())))?;
        let cfg: DaemonConfig =
            serde_json::from_slice(&text).map_err(|e| DaemonError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DaemonError> {
        if self.poll_interval < 1 {
            return Err(DaemonError::Config("poll_interval must be at least 1 second".into()));
        }
        if self.network_timeout < 1 {
            return Err(DaemonError::Config("network_timeout must be at least 1 second".into()));
        }
        for (name, u) in [("relay_url", &self.relay_url), ("rp_url", &self.rp_url)] {
            let parsed = url::Url::parse(u).map_err(|e| DaemonError::Config(format!("{name}: {e}")))?;
            if !matches!(parsed.scheme(), "http" | "https") {
                return Err(DaemonError::Config(format!("{name}: unsupported scheme")));
            }
        }
        self.rp_id()?;
        Ok(())
    }

    pub fn rp_id(&self) -> Result<RpId, DaemonError> {
        let raw = match &self.rp_id {
            Some(id) => id.clone(),
            None => url::Url::parse(&self.rp_url)
                .ok()
                .and_then(|u| u.host_str().map(str::to_owned))
                .ok_or_else(|| DaemonError::Config("rp_url has no host".into()))?,
        };
        RpId::new(raw.to_ascii_lowercase()).map_err(|_| DaemonError::Config("invalid rp id".into()))
    }

    pub fn credential_store_path(&self) -> PathBuf {
        let mut p = self.state_path.as_os_str().to_owned();
        p.push(".credentials");
        PathBuf::from(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg: DaemonConfig = serde_json::from_str(
            r#"{"relay_url":"http://127.0.0.1:1","rp_url":"http://RP.example:8080",
                "state_path":"/tmp/x","identity":{"kind":"mock","user_id":"alice@example.com"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.poll_interval, 2);
        assert_eq!(cfg.token_ttl, 600);
        assert_eq!(cfg.network_timeout, 5);
        assert_eq!(cfg.rp_id().unwrap().as_str(), "rp.example");
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_poll_interval_is_rejected() {
        let mut cfg = DaemonConfig::new("http://a", "http://b", "/tmp/s", "alice@example.com");
        cfg.poll_interval = 0;
        assert!(matches!(cfg.validate(), Err(DaemonError::Config(_))));
    }

    #[test]
    fn bad_urls_are_rejected() {
        let cfg = DaemonConfig::new("relay", "http://b", "/tmp/s", "alice@example.com");
        assert!(matches!(cfg.validate(), Err(DaemonError::Config(_))));
        let cfg = DaemonConfig::new("http://a", "ftp://b", "/tmp/s", "alice@example.com");
        assert!(matches!(cfg.validate(), Err(DaemonError::Config(_))));
    }
}
