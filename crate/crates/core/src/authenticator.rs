//! Software stand-in for a platform authenticator.
//!
//! Credential private keys are created here and never leave: the only
//! thing done with them is signing a challenge for the RP they were made
//! for. On disk the store is sealed under a store-local key.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::b64;
use crate::clock::{Clock, SystemClock};
use crate::crypto::{
    sign_challenge, Challenge, CredentialKeyPair, CredentialPublicKey, CryptoError,
};
use crate::sealed::{SealedError, SealedFile};

pub const STORE_MAGIC: &[u8] = b"TUSHAUTH1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthenticatorError {
    #[error("no such credential")]
    NoSuchCredential,
    #[error("rp mismatch")]
    RpMismatch,
    #[error("store corrupt")]
    StoreCorrupt,
    #[error("invalid rp id")]
    InvalidRpId,
    #[error("user verification denied")]
    UserVerificationDenied,
    #[error("store io failure: {0}")]
    Io(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl From<SealedError> for AuthenticatorError {
    fn from(e: SealedError) -> Self {
        match e {
            SealedError::Corrupt => AuthenticatorError::StoreCorrupt,
            SealedError::Io(e) => AuthenticatorError::Io(e.to_string()),
        }
    }
}

/// Lowercase domain-style relying party identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RpId(String);

impl RpId {
    pub fn new(id: impl Into<String>) -> Result<Self, AuthenticatorError> {
        let id = id.into();
        let ok = (1..=253).contains(&id.len())
            && id.chars().all(|c| !c.is_whitespace() && !c.is_uppercase() && !c.is_control());
        if ok {
            Ok(RpId(id))
        } else {
            Err(AuthenticatorError::InvalidRpId)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for RpId {
    type Error = AuthenticatorError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        RpId::new(s)
    }
}

impl From<RpId> for String {
    fn from(r: RpId) -> String {
        r.0
    }
}

impl fmt::Display for RpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CredentialId(#[serde(with = "b64::array")] [u8; 16]);

impl CredentialId {
    pub fn random() -> Self {
        let mut b = [0u8; 16];
        OsRng.fill_bytes(&mut b);
        CredentialId(b)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(CredentialId)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for CredentialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CredentialId({})", b64::encode(self.0))
    }
}

impl fmt::Display for CredentialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&b64::encode(self.0))
    }
}

struct CredentialRecord {
    credential_id: CredentialId,
    rp_id: RpId,
    user_id: String,
    keypair: Arc<CredentialKeyPair>,
    created_at: u64,
}

/// Everything about a credential except its private key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialDescriptor {
    pub credential_id: CredentialId,
    pub rp_id: RpId,
    pub user_id: String,
    pub public_key: CredentialPublicKey,
    pub created_at: u64,
}

impl Serialize for CredentialDescriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire<'a> {
            credential_id: &'a CredentialId,
            rp_id: &'a str,
            user_id: &'a str,
            #[serde(with = "b64")]
            public_key: &'a [u8],
            created_at: u64,
        }
        Wire {
            credential_id: &self.credential_id,
            rp_id: self.rp_id.as_str(),
            user_id: &self.user_id,
            public_key: self.public_key.to_der(),
            created_at: self.created_at,
        }
        .serialize(s)
    }
}

/// Result of a registration: what the RP needs to store the credential.
#[derive(Debug, Clone)]
pub struct Attestation {
    pub credential_id: CredentialId,
    pub public_key: CredentialPublicKey,
    pub signature: Vec<u8>,
}

/// Stand-in for a user presence/verification gesture.
pub trait UserVerification: Send + Sync {
    fn approve(&self, rp_id: &RpId, user_id: &str) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AlwaysApprove;

impl UserVerification for AlwaysApprove {
    fn approve(&self, _: &RpId, _: &str) -> bool {
        true
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AlwaysDeny;

impl UserVerification for AlwaysDeny {
    fn approve(&self, _: &RpId, _: &str) -> bool {
        false
    }
}

#[derive(Serialize, Deserialize)]
struct PersistedRecord {
    credential_id: CredentialId,
    rp_id: RpId,
    user_id: String,
    #[serde(with = "b64")]
    private_key: Vec<u8>,
    created_at: u64,
}

#[derive(Serialize, Deserialize)]
struct PersistedStore {
    version: u32,
    records: Vec<PersistedRecord>,
}

/// Credential store with single-writer semantics: assertions run
/// concurrently, registrations are serialized.
pub struct CredentialStore {
    records: RwLock<Vec<CredentialRecord>>,
    writer: Mutex<()>,
    backing: Option<SealedFile>,
    verifier: Box<dyn UserVerification>,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for CredentialStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CredentialStore")
            .field("credentials", &self.records.read().unwrap().len())
            .field("backing", &self.backing.as_ref().map(|b| b.path().to_owned()))
            .finish()
    }
}

impl CredentialStore {
    pub fn in_memory() -> Self {
        Self::build(Vec::new(), None)
    }

    /// Opens the sealed store at `path`, starting empty if it does not exist.
    /// Anything unreadable is reported as [`AuthenticatorError::StoreCorrupt`];
    /// no partial load happens.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuthenticatorError> {
        let backing = SealedFile::new(path.as_ref(), STORE_MAGIC);
        let records = match backing.load()? {
            None => Vec::new(),
            Some(plain) => decode_records(&plain)?,
        };
        Ok(Self::build(records, Some(backing)))
    }

    fn build(records: Vec<CredentialRecord>, backing: Option<SealedFile>) -> Self {
        CredentialStore {
            records: RwLock::new(records),
            writer: Mutex::new(()),
            backing,
            verifier: Box::new(AlwaysApprove),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_verifier(mut self, verifier: impl UserVerification + 'static) -> Self {
        self.verifier = Box::new(verifier);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Creates a fresh credential for `(rp_id, user_id)` and signs `challenge`
    /// with it. Any existing credential for that pair is replaced.
    pub fn make_credential(
        &self,
        rp_id: &RpId,
        user_id: &str,
        challenge: &Challenge,
    ) -> Result<Attestation, AuthenticatorError> {
        if !self.verifier.approve(rp_id, user_id) {
            return Err(AuthenticatorError::UserVerificationDenied);
        }
        let keypair = CredentialKeyPair::generate()?;
        let signature = sign_challenge(&keypair, challenge)?;
        let public_key = keypair.public_key().clone();

        let _writer = self.writer.lock().unwrap();
        let mut records = self.records.write().unwrap();
        let credential_id = loop {
            let id = CredentialId::random();
            if records.iter().all(|r| r.credential_id != id) {
                break id;
            }
        };
        let previous = records
            .iter()
            .position(|r| &r.rp_id == rp_id && r.user_id == user_id)
            .map(|i| records.remove(i));
        records.push(CredentialRecord {
            credential_id,
            rp_id: rp_id.clone(),
            user_id: user_id.to_owned(),
            keypair: Arc::new(keypair),
            created_at: self.clock.now_secs(),
        });
        if let Err(e) = self.persist_locked(&records) {
            records.pop();
            records.extend(previous);
            return Err(e);
        }
        Ok(Attestation { credential_id, public_key, signature })
    }

    /// Signs `challenge` with the stored credential. Refuses to sign, with a
    /// distinct error, when the credential belongs to another RP.
    pub fn get_assertion(
        &self,
        rp_id: &RpId,
        credential_id: &CredentialId,
        challenge: &Challenge,
    ) -> Result<Vec<u8>, AuthenticatorError> {
        let keypair = {
            let records = self.records.read().unwrap();
            let rec = records
                .iter()
                .find(|r| &r.credential_id == credential_id)
                .ok_or(AuthenticatorError::NoSuchCredential)?;
            if &rec.rp_id != rp_id {
                return Err(AuthenticatorError::RpMismatch);
            }
            if !self.verifier.approve(rp_id, &rec.user_id) {
                return Err(AuthenticatorError::UserVerificationDenied);
            }
            Arc::clone(&rec.keypair)
        };
        Ok(sign_challenge(&keypair, challenge)?)
    }

    pub fn list_credentials(&self) -> Vec<CredentialDescriptor> {
        self.records.read().unwrap().iter().map(describe).collect()
    }

    pub fn find(&self, rp_id: &RpId, user_id: &str) -> Option<CredentialDescriptor> {
        self.records
            .read()
            .unwrap()
            .iter()
            .find(|r| &r.rp_id == rp_id && r.user_id == user_id)
            .map(describe)
    }

    /// Drops a credential, e.g. after the RP refused to register it.
    pub fn delete_credential(&self, credential_id: &CredentialId) -> Result<bool, AuthenticatorError> {
        let _writer = self.writer.lock().unwrap();
        let mut records = self.records.write().unwrap();
        let Some(i) = records.iter().position(|r| &r.credential_id == credential_id) else {
            return Ok(false);
        };
        let removed = records.remove(i);
        if let Err(e) = self.persist_locked(&records) {
            records.insert(i, removed);
            return Err(e);
        }
        Ok(true)
    }

    /// Writes the sealed store to its backing file. A no-op for in-memory stores.
    pub fn persist(&self) -> Result<(), AuthenticatorError> {
        let _writer = self.writer.lock().unwrap();
        let records = self.records.read().unwrap();
        self.persist_locked(&records)
    }

    fn persist_locked(&self, records: &[CredentialRecord]) -> Result<(), AuthenticatorError> {
        let Some(backing) = &self.backing else {
            return Ok(());
        };
        let plain = encode_records(records)?;
        backing.store(&plain)?;
        Ok(())
    }

    /// Private key DER of every credential, for leak-scanning tests only.
    #[cfg(any(test, feature = "audit"))]
    pub fn audit_private_keys(&self) -> Vec<zeroize::Zeroizing<Vec<u8>>> {
        self.records
            .read()
            .unwrap()
            .iter()
            .map(|r| r.keypair.to_pkcs8_der().expect("stored keys encode"))
            .collect()
    }
}

fn describe(r: &CredentialRecord) -> CredentialDescriptor {
    CredentialDescriptor {
        credential_id: r.credential_id,
        rp_id: r.rp_id.clone(),
        user_id: r.user_id.clone(),
        public_key: r.keypair.public_key().clone(),
        created_at: r.created_at,
    }
}

fn encode_records(records: &[CredentialRecord]) -> Result<zeroize::Zeroizing<Vec<u8>>, AuthenticatorError> {
    let records = records
        .iter()
        .map(|r| {
            Ok(PersistedRecord {
                credential_id: r.credential_id,
                rp_id: r.rp_id.clone(),
                user_id: r.user_id.clone(),
                private_key: r.keypair.to_pkcs8_der()?.to_vec(),
                created_at: r.created_at,
            })
        })
        .collect::<Result<Vec<_>, CryptoError>>()?;
    let out = serde_json::to_vec(&PersistedStore { version: 1, records })
        .map_err(|e| AuthenticatorError::Io(e.to_string()))?;
    Ok(zeroize::Zeroizing::new(out))
}

fn decode_records(plain: &[u8]) -> Result<Vec<CredentialRecord>, AuthenticatorError> {
    let stored: PersistedStore =
        serde_json::from_slice(plain).map_err(|_| AuthenticatorError::StoreCorrupt)?;
    if stored.version != 1 {
        return Err(AuthenticatorError::StoreCorrupt);
    }
    let mut ids = HashSet::new();
    let mut pairs = HashSet::new();
    stored
        .records
        .into_iter()
        .map(|p| {
            if !ids.insert(p.credential_id) || !pairs.insert((p.rp_id.clone(), p.user_id.clone())) {
                return Err(AuthenticatorError::StoreCorrupt);
            }
            let keypair = CredentialKeyPair::from_pkcs8_der(&p.private_key)
                .map_err(|_| AuthenticatorError::StoreCorrupt)?;
            Ok(CredentialRecord {
                credential_id: p.credential_id,
                rp_id: p.rp_id,
                user_id: p.user_id,
                keypair: Arc::new(keypair),
                created_at: p.created_at,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;
    use crate::crypto::verify_signature;

    fn rp(s: &str) -> RpId {
        RpId::new(s).unwrap()
    }

    fn contains(hay: &[u8], needle: &[u8]) -> bool {
        hay.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn rp_id_validation() {
        assert!(RpId::new("rp.example").is_ok());
        assert!(RpId::new("").is_err());
        assert!(RpId::new("Rp.example").is_err());
        assert!(RpId::new("rp example").is_err());
        assert!(RpId::new("a".repeat(253)).is_ok());
        assert!(RpId::new("a".repeat(254)).is_err());
    }

    #[test]
    fn make_credential_signature_verifies() {
        let store = CredentialStore::in_memory();
        let c = Challenge::generate();
        let att = store.make_credential(&rp("rp.example"), "alice", &c).unwrap();
        assert!(verify_signature(&att.public_key, c.as_bytes(), &att.signature));
    }

    #[test]
    fn re_enrolment_replaces_the_record() {
        let store = CredentialStore::in_memory();
        let r = rp("rp.example");
        let first = store.make_credential(&r, "alice", &Challenge::generate()).unwrap();
        let second = store.make_credential(&r, "alice", &Challenge::generate()).unwrap();
        assert_ne!(first.credential_id, second.credential_id);
        let listed = store.list_credentials();
        assert_eq!(listed.len(), 1);
        assert_eq!(listed[0].credential_id, second.credential_id);
        assert_eq!(
            store.get_assertion(&r, &first.credential_id, &Challenge::generate()),
            Err(AuthenticatorError::NoSuchCredential)
        );
    }

    #[test]
    fn separate_stores_never_share_keys() {
        let r = rp("rp.example");
        let a = CredentialStore::in_memory().make_credential(&r, "alice", &Challenge::generate()).unwrap();
        let b = CredentialStore::in_memory().make_credential(&r, "alice", &Challenge::generate()).unwrap();
        assert_ne!(a.public_key, b.public_key);
    }

    #[test]
    fn assertion_checks() {
        let store = CredentialStore::in_memory();
        let r = rp("rp.example");
        let att = store.make_credential(&r, "alice", &Challenge::generate()).unwrap();
        let c = Challenge::generate();
        let sig = store.get_assertion(&r, &att.credential_id, &c).unwrap();
        assert!(verify_signature(&att.public_key, c.as_bytes(), &sig));
        assert_eq!(
            store.get_assertion(&rp("evil.example"), &att.credential_id, &c),
            Err(AuthenticatorError::RpMismatch)
        );
        assert_eq!(
            store.get_assertion(&r, &CredentialId::random(), &c),
            Err(AuthenticatorError::NoSuchCredential)
        );
    }

    #[test]
    fn rp_binding_is_exhaustive_over_records() {
        let store = CredentialStore::in_memory();
        let rps = [rp("a.example"), rp("b.example"), rp("c.example")];
        let ids: Vec<_> = rps
            .iter()
            .map(|r| store.make_credential(r, "u", &Challenge::generate()).unwrap().credential_id)
            .collect();
        for (i, id) in ids.iter().enumerate() {
            for (j, r) in rps.iter().enumerate() {
                let res = store.get_assertion(r, id, &Challenge::generate());
                if i == j {
                    assert!(res.is_ok());
                } else {
                    assert_eq!(res, Err(AuthenticatorError::RpMismatch));
                }
            }
        }
    }

    #[test]
    fn denied_verification_blocks_both_ceremonies() {
        let r = rp("rp.example");
        let store = CredentialStore::in_memory().with_verifier(AlwaysDeny);
        assert_eq!(
            store.make_credential(&r, "alice", &Challenge::generate()).unwrap_err(),
            AuthenticatorError::UserVerificationDenied
        );
    }

    #[test]
    fn list_credentials_exposes_public_data_only() {
        let store = CredentialStore::in_memory();
        assert!(store.list_credentials().is_empty());
        let att = store.make_credential(&rp("rp.example"), "alice", &Challenge::generate()).unwrap();
        let listed = store.list_credentials();
        assert_eq!(listed.len(), 1);
        assert_eq!(listed[0].public_key, att.public_key);

        let json = serde_json::to_vec(&listed).unwrap();
        let der = store.audit_private_keys().pop().unwrap();
        assert!(!contains(&json, &der));
        assert!(!contains(&json, b64::encode(&*der).as_bytes()));
        assert!(!contains(&json, &der[der.len() - 64..]));
        assert!(!contains(&json, b64::encode(&der[der.len() - 64..]).as_bytes()));
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("creds.bin");
        let r = rp("rp.example");
        let att = {
            let store = CredentialStore::open(&path).unwrap();
            store.make_credential(&r, "alice", &Challenge::generate()).unwrap()
        };
        let store = CredentialStore::open(&path).unwrap();
        let c = Challenge::generate();
        let sig = store.get_assertion(&r, &att.credential_id, &c).unwrap();
        assert!(verify_signature(&att.public_key, c.as_bytes(), &sig));
        assert_eq!(store.list_credentials().len(), 1);
    }

    #[test]
    fn on_disk_bytes_hold_no_private_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("creds.bin");
        let store = CredentialStore::open(&path).unwrap();
        store.make_credential(&rp("rp.example"), "alice", &Challenge::generate()).unwrap();
        let der = store.audit_private_keys().pop().unwrap();
        let disk = fs::read(&path).unwrap();
        assert!(disk.starts_with(STORE_MAGIC));
        for window in der.chunks_exact(32) {
            assert!(!contains(&disk, window));
            assert!(!contains(&disk, b64::encode(window).as_bytes()));
        }
    }

    #[test]
    fn truncated_store_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("creds.bin");
        CredentialStore::open(&path)
            .unwrap()
            .make_credential(&rp("rp.example"), "alice", &Challenge::generate())
            .unwrap();
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() / 2]).unwrap();
        assert_eq!(CredentialStore::open(&path).unwrap_err(), AuthenticatorError::StoreCorrupt);
        fs::write(&path, b"TUSHAUTH").unwrap();
        assert_eq!(CredentialStore::open(&path).unwrap_err(), AuthenticatorError::StoreCorrupt);
    }

    #[test]
    fn delete_credential() {
        let store = CredentialStore::in_memory();
        let att = store.make_credential(&rp("rp.example"), "alice", &Challenge::generate()).unwrap();
        assert!(store.delete_credential(&att.credential_id).unwrap());
        assert!(!store.delete_credential(&att.credential_id).unwrap());
        assert!(store.list_credentials().is_empty());
    }

    #[test]
    fn concurrent_assertions() {
        let store = Arc::new(CredentialStore::in_memory());
        let r = rp("rp.example");
        let att = store.make_credential(&r, "alice", &Challenge::generate()).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let store = Arc::clone(&store);
                let r = r.clone();
                let (id, public_key) = (att.credential_id, att.public_key.clone());
                std::thread::spawn(move || {
                    let c = Challenge::generate();
                    let sig = store.get_assertion(&r, &id, &c).unwrap();
                    verify_signature(&public_key, c.as_bytes(), &sig)
                })
            })
            .collect();
        assert!(handles.into_iter().all(|h| h.join().unwrap()));
    }
}
