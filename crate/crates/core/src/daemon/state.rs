use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::DaemonError;
use crate::b64;
use crate::crypto::{DhKeyPair, RequestSigningKey, TokenKey};
use crate::sealed::{atomic_write, key_path_for, open_blob, seal_blob};

/// A device's long-lived identity. The DH and request-signing secrets are
/// sealed in the state file under a key kept next to it.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: String,
    pub user_id: String,
    pub dh: DhKeyPair,
    pub signer: RequestSigningKey,
    pub credential_store_path: PathBuf,
    pub registered_with_relay: bool,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    device_id: String,
    user_id: String,
    credential_store_path: PathBuf,
    registered_with_relay: bool,
    #[serde(with = "b64")]
    dh_public: Vec<u8>,
    #[serde(with = "b64")]
    request_verify_key: Vec<u8>,
    #[serde(with = "b64")]
    sealed_keys: Vec<u8>,
}

fn corrupt(why: impl std::fmt::Display) -> DaemonError {
    DaemonError::State(format!("state corrupt: {why}"))
}

impl DeviceState {
    pub fn generate(user_id: &str, credential_store_path: PathBuf) -> Self {
        DeviceState {
            device_id: uuid::Uuid::new_v4().to_string(),
            user_id: user_id.to_owned(),
            dh: DhKeyPair::generate(),
            signer: RequestSigningKey::generate(),
            credential_store_path,
            registered_with_relay: false,
        }
    }

    pub fn exists(path: &Path) -> bool {
        path.exists()
    }

    /// Writes the key file (if new) and then the state file, each through a
    /// temporary and a rename.
    pub fn save(&self, path: &Path) -> Result<(), DaemonError> {
        let key_path = key_path_for(path);
        let key = match fs::read(&key_path) {
            Ok(bytes) => TokenKey::from_bytes(bytes.try_into().map_err(|_| corrupt("key file length"))?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let key = TokenKey::generate();
                atomic_write(&key_path, key.as_bytes()).map_err(io_err)?;
                key
            }
            Err(e) => return Err(io_err(e)),
        };
        let mut secrets = Zeroizing::new(Vec::with_capacity(64));
        secrets.extend_from_slice(&*self.dh.secret_bytes());
        secrets.extend_from_slice(&*self.signer.secret_bytes());
        let file = StateFile {
            version: 1,
            device_id: self.device_id.clone(),
            user_id: self.user_id.clone(),
            credential_store_path: self.credential_store_path.clone(),
            registered_with_relay: self.registered_with_relay,
            dh_public: self.dh.public().as_bytes().to_vec(),
            request_verify_key: self.signer.verify_key().as_bytes().to_vec(),
            sealed_keys: seal_blob(&key, &secrets),
        };
        let json = serde_json::to_vec_pretty(&file).expect("state serializes");
        atomic_write(path, &json).map_err(io_err)
    }

    /// `Ok(None)` when there is no state file.
    pub fn load(path: &Path) -> Result<Option<Self>, DaemonError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(e)),
        };
        let file: StateFile = serde_json::from_slice(&bytes).map_err(corrupt)?;
        if file.version != 1 {
            return Err(corrupt("unknown version"));
        }
        let key_bytes = fs::read(key_path_for(path)).map_err(|e| corrupt(format!("key file: {e}")))?;
        let key = TokenKey::from_bytes(key_bytes.try_into().map_err(|_| corrupt("key file length"))?);
        let secrets = Zeroizing::new(open_blob(&key, &file.sealed_keys).map_err(|_| corrupt("sealed keys"))?);
        if secrets.len() != 64 {
            return Err(corrupt("sealed keys length"));
        }
        let mut dh_secret = Zeroizing::new([0u8; 32]);
        dh_secret.copy_from_slice(&secrets[..32]);
        let mut sig_secret = Zeroizing::new([0u8; 32]);
        sig_secret.copy_from_slice(&secrets[32..]);
        let state = DeviceState {
            device_id: file.device_id,
            user_id: file.user_id,
            dh: DhKeyPair::from_secret_bytes(*dh_secret),
            signer: RequestSigningKey::from_secret_bytes(&sig_secret),
            credential_store_path: file.credential_store_path,
            registered_with_relay: file.registered_with_relay,
        };
        if state.dh.public().as_bytes()[..] != file.dh_public[..]
            || state.signer.verify_key().as_bytes()[..] != file.request_verify_key[..]
        {
            return Err(corrupt("public keys do not match sealed secrets"));
        }
        if !crate::relay::is_valid_device_id(&state.device_id) {
            return Err(corrupt("device id"));
        }
        Ok(Some(state))
    }

    /// Removes the state file and its key file.
    pub fn remove(path: &Path) -> Result<(), DaemonError> {
        for p in [path.to_path_buf(), key_path_for(path)] {
            match fs::remove_file(&p) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(io_err(e)),
                _ => {}
            }
        }
        Ok(())
    }
}

fn io_err(e: io::Error) -> DaemonError {
    DaemonError::State(format!("state io: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        assert!(DeviceState::load(&path).unwrap().is_none());
        let mut s = DeviceState::generate("alice@example.com", dir.path().join("creds"));
        s.registered_with_relay = true;
        s.save(&path).unwrap();
        let back = DeviceState::load(&path).unwrap().unwrap();
        assert_eq!(back.device_id, s.device_id);
        assert_eq!(back.dh.public(), s.dh.public());
        assert_eq!(back.signer.verify_key(), s.signer.verify_key());
        assert!(back.registered_with_relay);
    }

    #[test]
    fn secrets_are_not_in_the_clear() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let s = DeviceState::generate("alice@example.com", dir.path().join("creds"));
        s.save(&path).unwrap();
        let text = fs::read(&path).unwrap();
        let dh = s.dh.secret_bytes();
        let sk = s.signer.secret_bytes();
        for secret in [&dh[..], &sk[..]] {
            assert!(!text.windows(32).any(|w| w == secret));
            assert!(!String::from_utf8_lossy(&text).contains(&b64::encode(secret)));
        }
    }

    #[test]
    fn tampered_state_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        DeviceState::generate("alice@example.com", dir.path().join("creds")).save(&path).unwrap();
        let mut other = DeviceState::load(&path).unwrap().unwrap();
        other.dh = DhKeyPair::generate();
        // Swap in a foreign public key while keeping the sealed secrets.
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v["dh_public"] = b64::encode(other.dh.public().as_bytes()).into();
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(DeviceState::load(&path), Err(DaemonError::State(_))));
        fs::write(&path, b"{not json").unwrap();
        assert!(matches!(DeviceState::load(&path), Err(DaemonError::State(_))));
    }
}
