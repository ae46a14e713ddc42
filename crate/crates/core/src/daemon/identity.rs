use std::path::PathBuf;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("identity provider: {0}")]
pub struct IdentityError(pub String);

/// Who the device belongs to, as vouched for by an identity provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    /// The user's email address.
    pub user_id: String,
    /// Opaque proof from the provider, forwarded to the relay.
    pub assertion: Option<String>,
}

pub trait IdentityProvider: Send + Sync {
    fn authenticate(&self) -> Result<Identity, IdentityError>;
}

fn check_email(user_id: &str) -> Result<(), IdentityError> {
    match user_id.split_once('@') {
        Some((local, domain)) if !local.is_empty() && !domain.is_empty() && !user_id.contains(char::is_whitespace) => {
            Ok(())
        }
        _ => Err(IdentityError(format!("{user_id:?} is not an email address"))),
    }
}

/// Returns a fixed user, or a fixed failure.
#[derive(Debug, Clone)]
pub struct MockIdentityProvider {
    outcome: Result<String, String>,
}

impl MockIdentityProvider {
    pub fn new(user_id: impl Into<String>) -> Self {
        MockIdentityProvider { outcome: Ok(user_id.into()) }
    }

    pub fn failing(reason: impl Into<String>) -> Self {
        MockIdentityProvider { outcome: Err(reason.into()) }
    }
}

impl IdentityProvider for MockIdentityProvider {
    fn authenticate(&self) -> Result<Identity, IdentityError> {
        let user_id = self.outcome.clone().map_err(IdentityError)?;
        check_email(&user_id)?;
        Ok(Identity { assertion: Some(format!("mock:{user_id}")), user_id })
    }
}

/// Reads `{"user_id": ..., "assertion": ...}` from a file, standing in for
/// an interactive sign-in that leaves its result on disk.
#[derive(Debug, Clone)]
pub struct FileIdentityProvider {
    path: PathBuf,
}

impl FileIdentityProvider {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileIdentityProvider { path: path.into() }
    }
}

#[derive(Deserialize)]
struct IdentityFile {
    user_id: String,
    #[serde(default)]
    assertion: Option<String>,
}

impl IdentityProvider for FileIdentityProvider {
    fn authenticate(&self) -> Result<Identity, IdentityError> {
        let bytes = std::fs::read(&self.path).map_err(|e| IdentityError(format!("{}: {e}", self.path.display())))?;
        let f: IdentityFile = serde_json::from_slice(&bytes).map_err(|e| IdentityError(e.to_string()))?;
        check_email(&f.user_id)?;
        Ok(Identity { user_id: f.user_id, assertion: f.assertion })
    }
}
