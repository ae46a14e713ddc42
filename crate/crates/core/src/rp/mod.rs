//! The relying party: registration and authentication ceremonies, access
//! token issue, and automatic enrolment of devices that redeem a token.

mod service;
mod storage;

pub use service::RpService;
pub use storage::{RpEvent, RpStorage};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::authenticator::CredentialId;
use crate::b64;
use crate::clock::Clock;
use crate::crypto::{verify_signature, Challenge, CredentialPublicKey};

pub const SESSION_TTL: u64 = 120;
pub const TOKEN_TTL: u64 = 600;
pub const TOKEN_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RpError {
    #[error("verification failed")]
    VerificationFailed,
    #[error("session invalid")]
    SessionInvalid,
    #[error("no such user")]
    NoSuchUser,
    #[error("no enrolled devices")]
    NoEnrolledDevices,
    #[error("unknown credential")]
    UnknownCredential,
    #[error("authentication required")]
    AuthenticationRequired,
    #[error("token expired")]
    TokenExpired,
    #[error("token already redeemed")]
    TokenAlreadyRedeemed,
    #[error("token invalid")]
    TokenInvalid,
    #[error("invalid user id")]
    InvalidUserId,
    #[error("duplicate credential")]
    DuplicateCredential,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl RpError {
    /// Stable error code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            RpError::VerificationFailed => "verification failed",
            RpError::SessionInvalid => "session invalid",
            RpError::NoSuchUser => "no such user",
            RpError::NoEnrolledDevices => "no enrolled devices",
            RpError::UnknownCredential => "unknown credential",
            RpError::AuthenticationRequired => "authentication required",
            RpError::TokenExpired => "token expired",
            RpError::TokenAlreadyRedeemed => "token already redeemed",
            RpError::TokenInvalid => "token invalid",
            RpError::InvalidUserId => "invalid user id",
            RpError::DuplicateCredential => "duplicate credential",
            RpError::BadRequest(_) => "bad request",
            RpError::Storage(_) => "storage failure",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            RpError::VerificationFailed | RpError::AuthenticationRequired => 401,
            RpError::NoSuchUser | RpError::UnknownCredential => 404,
            RpError::TokenAlreadyRedeemed | RpError::DuplicateCredential => 409,
            RpError::TokenExpired => 410,
            RpError::Storage(_) => 500,
            _ => 400,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionId(#[serde(with = "b64::array")] [u8; 16]);

impl SessionId {
    fn random() -> Self {
        let mut b = [0u8; 16];
        OsRng.fill_bytes(&mut b);
        SessionId(b)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(SessionId)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({})", b64::encode(self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Register,
    Authenticate,
    Redeem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeSession {
    pub session_id: SessionId,
    pub user_id: String,
    #[serde(with = "b64::array")]
    pub challenge: [u8; 16],
    pub purpose: Purpose,
    pub issued_at: u64,
    pub consumed: bool,
    /// Device the ceremony is for, when the client named one.
    pub device_id: Option<String>,
    /// Redemption sessions only.
    pub token_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrolledVia {
    Ceremony,
    TokenRedemption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisteredDevice {
    pub credential_id: CredentialId,
    #[serde(with = "public_key_der")]
    pub public_key: CredentialPublicKey,
    pub enrolled_at: u64,
    pub enrolled_via: EnrolledVia,
    pub device_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: String,
    pub devices: Vec<RegisteredDevice>,
}

/// Stored form of an access token: a salted hash, never the token itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessTokenRecord {
    pub token_id: u64,
    #[serde(with = "b64::array")]
    pub salt: [u8; 16],
    #[serde(with = "b64::array")]
    pub token_hash: [u8; 32],
    pub user_id: String,
    pub issued_at: u64,
    pub ttl: u64,
    pub redeemed_by: BTreeSet<String>,
    /// Devices with a redemption in flight, and when they claimed it.
    pub pending: BTreeMap<String, u64>,
}

/// Proof that a caller just completed an authentication ceremony.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthProofRecord {
    #[serde(with = "b64::array")]
    pub proof_hash: [u8; 32],
    pub user_id: String,
    pub issued_at: u64,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthOutcome {
    pub user_id: String,
    /// Bearer proof accepted once by [`RelyingParty::issue_access_token`].
    pub session_proof: [u8; 32],
}

mod public_key_der {
    use serde::{Deserializer, Serializer};

    use crate::crypto::CredentialPublicKey;

    pub fn serialize<S: Serializer>(k: &CredentialPublicKey, s: S) -> Result<S::Ok, S::Error> {
        crate::b64::serialize(k.to_der(), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CredentialPublicKey, D::Error> {
        let der = crate::b64::deserialize(d)?;
        CredentialPublicKey::from_der(&der).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpConfig {
    pub session_ttl: u64,
    pub token_ttl: u64,
    pub proof_ttl: u64,
}

impl Default for RpConfig {
    fn default() -> Self {
        RpConfig { session_ttl: SESSION_TTL, token_ttl: TOKEN_TTL, proof_ttl: SESSION_TTL }
    }
}

fn random_bytes<const N: usize>() -> [u8; N] {
    let mut b = [0u8; N];
    OsRng.fill_bytes(&mut b);
    b
}

fn token_hash(salt: &[u8; 16], token: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(token);
    h.finalize().into()
}

fn proof_hash(proof: &[u8]) -> [u8; 32] {
    Sha256::digest(proof).into()
}

fn valid_user_id(user_id: &str) -> bool {
    !user_id.is_empty() && user_id.len() <= 320 && !user_id.chars().any(char::is_whitespace)
}

pub struct RelyingParty {
    storage: RpStorage,
    clock: Arc<dyn Clock>,
    config: RpConfig,
}

impl fmt::Debug for RelyingParty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelyingParty").field("config", &self.config).finish_non_exhaustive()
    }
}

type Claim = (Vec<RpEvent>, Result<ChallengeSession, RpError>);

impl RelyingParty {
    pub fn new(storage: RpStorage, clock: Arc<dyn Clock>) -> Self {
        Self::with_config(storage, clock, RpConfig::default())
    }

    pub fn with_config(storage: RpStorage, clock: Arc<dyn Clock>, config: RpConfig) -> Self {
        RelyingParty { storage, clock, config }
    }

    pub fn config(&self) -> RpConfig {
        self.config
    }

    pub fn storage(&self) -> &RpStorage {
        &self.storage
    }

    fn new_session(
        &self,
        user_id: &str,
        purpose: Purpose,
        device_id: Option<String>,
        token_id: Option<u64>,
    ) -> ChallengeSession {
        ChallengeSession {
            session_id: SessionId::random(),
            user_id: user_id.to_owned(),
            challenge: *Challenge::generate().as_bytes(),
            purpose,
            issued_at: self.clock.now_secs(),
            consumed: false,
            device_id,
            token_id,
        }
    }

    /// Consumes `session_id` if it exists and is unconsumed. Expired or
    /// wrong-purpose sessions are consumed too but reported invalid.
    fn claim(&self, st: &storage::RpState, id: &SessionId, purpose: Purpose, now: u64) -> Claim {
        let Some(s) = st.sessions.get(id).filter(|s| !s.consumed) else {
            return (Vec::new(), Err(RpError::SessionInvalid));
        };
        let events = vec![RpEvent::SessionConsumed { session_id: *id }];
        if s.purpose != purpose || now > s.issued_at + self.config.session_ttl {
            return (events, Err(RpError::SessionInvalid));
        }
        (events, Ok(s.clone()))
    }

    /// Starts a registration ceremony. `device_id` lets a device re-enrol
    /// in place of its earlier credential.
    pub fn begin_registration(
        &self,
        user_id: &str,
        device_id: Option<&str>,
    ) -> Result<(SessionId, Challenge), RpError> {
        if !valid_user_id(user_id) {
            return Err(RpError::InvalidUserId);
        }
        let session = self.new_session(user_id, Purpose::Register, device_id.map(str::to_owned), None);
        let out = (session.session_id, Challenge::from_slice(&session.challenge).unwrap());
        self.storage.transact(|_| (vec![RpEvent::SessionIssued(session)], Ok(())))?;
        Ok(out)
    }

    pub fn finish_registration(
        &self,
        session_id: &SessionId,
        credential_id: CredentialId,
        public_key: &[u8],
        signature: &[u8],
    ) -> Result<RegisteredDevice, RpError> {
        let now = self.clock.now_secs();
        self.storage.transact(|st| {
            let (mut events, claim) = self.claim(st, session_id, Purpose::Register, now);
            let session = match claim {
                Ok(s) => s,
                Err(e) => return (events, Err(e)),
            };
            let device = match check_new_device(st, &session, credential_id, public_key, signature, now, EnrolledVia::Ceremony) {
                Ok(d) => d,
                Err(e) => return (events, Err(e)),
            };
            events.push(RpEvent::DeviceEnrolled { user_id: session.user_id, device: device.clone() });
            (events, Ok(device))
        })
    }

    pub fn begin_authentication(
        &self,
        user_id: &str,
    ) -> Result<(SessionId, Challenge, Vec<CredentialId>), RpError> {
        let session = self.new_session(user_id, Purpose::Authenticate, None, None);
        let (sid, challenge) = (session.session_id, Challenge::from_slice(&session.challenge).unwrap());
        self.storage.transact(|st| {
            let Some(account) = st.users.get(user_id) else {
                return (Vec::new(), Err(RpError::NoSuchUser));
            };
            if account.devices.is_empty() {
                return (Vec::new(), Err(RpError::NoEnrolledDevices));
            }
            let ids = account.devices.iter().map(|d| d.credential_id).collect();
            (vec![RpEvent::SessionIssued(session)], Ok((sid, challenge, ids)))
        })
    }

    pub fn finish_authentication(
        &self,
        session_id: &SessionId,
        credential_id: &CredentialId,
        signature: &[u8],
    ) -> Result<AuthOutcome, RpError> {
        let now = self.clock.now_secs();
        let proof: [u8; 32] = random_bytes();
        self.storage.transact(|st| {
            let (mut events, claim) = self.claim(st, session_id, Purpose::Authenticate, now);
            let session = match claim {
                Ok(s) => s,
                Err(e) => return (events, Err(e)),
            };
            let device = st
                .users
                .get(&session.user_id)
                .and_then(|a| a.devices.iter().find(|d| &d.credential_id == credential_id));
            let Some(device) = device else {
                return (events, Err(RpError::UnknownCredential));
            };
            if !verify_signature(&device.public_key, &session.challenge, signature) {
                return (events, Err(RpError::VerificationFailed));
            }
            events.push(RpEvent::ProofIssued(AuthProofRecord {
                proof_hash: proof_hash(&proof),
                user_id: session.user_id.clone(),
                issued_at: now,
                used: false,
            }));
            (events, Ok(AuthOutcome { user_id: session.user_id, session_proof: proof }))
        })
    }

    /// Issues a fresh access token for the user behind `session_proof`.
    /// The raw token is returned here and nowhere else.
    pub fn issue_access_token(&self, session_proof: &[u8]) -> Result<[u8; TOKEN_LEN], RpError> {
        let now = self.clock.now_secs();
        let hash = proof_hash(session_proof);
        let token: [u8; TOKEN_LEN] = random_bytes();
        let salt: [u8; 16] = random_bytes();
        self.storage.transact(|st| {
            let Some(p) = st
                .proofs
                .get(&hash)
                .filter(|p| !p.used && now <= p.issued_at + self.config.proof_ttl)
            else {
                return (Vec::new(), Err(RpError::AuthenticationRequired));
            };
            let record = AccessTokenRecord {
                token_id: st.next_token_id(),
                salt,
                token_hash: token_hash(&salt, &token),
                user_id: p.user_id.clone(),
                issued_at: now,
                ttl: self.config.token_ttl,
                redeemed_by: BTreeSet::new(),
                pending: BTreeMap::new(),
            };
            (
                vec![RpEvent::ProofUsed { proof_hash: hash }, RpEvent::TokenIssued(record)],
                Ok(token),
            )
        })
    }

    /// First half of token redemption. The claim on `(token, device_id)` is
    /// a compare-and-set: of concurrent attempts by one device, one wins.
    pub fn redeem_token_begin(
        &self,
        token: &[u8],
        device_id: &str,
    ) -> Result<(SessionId, Challenge), RpError> {
        if device_id.is_empty() {
            return Err(RpError::BadRequest("empty device id".into()));
        }
        let now = self.clock.now_secs();
        self.storage.transact(|st| {
            let Some(rec) = st.tokens.values().find(|r| token_hash(&r.salt, token) == r.token_hash) else {
                return (Vec::new(), Err(RpError::TokenInvalid));
            };
            if now > rec.issued_at + rec.ttl {
                return (Vec::new(), Err(RpError::TokenExpired));
            }
            if rec.is_claimed_by(device_id, now, self.config.session_ttl) {
                return (Vec::new(), Err(RpError::TokenAlreadyRedeemed));
            }
            let session = self.new_session(&rec.user_id, Purpose::Redeem, Some(device_id.to_owned()), Some(rec.token_id));
            let out = (session.session_id, Challenge::from_slice(&session.challenge).unwrap());
            (
                vec![
                    RpEvent::RedemptionClaimed { token_id: rec.token_id, device_id: device_id.to_owned(), at: now },
                    RpEvent::SessionIssued(session),
                ],
                Ok(out),
            )
        })
    }

    /// Completes redemption: the device joins the token owner's account and
    /// is marked as having redeemed, in one atomic step.
    pub fn redeem_token_finish(
        &self,
        session_id: &SessionId,
        credential_id: CredentialId,
        public_key: &[u8],
        signature: &[u8],
    ) -> Result<RegisteredDevice, RpError> {
        let now = self.clock.now_secs();
        self.storage.transact(|st| {
            let (mut events, claim) = self.claim(st, session_id, Purpose::Redeem, now);
            let release = |session: &ChallengeSession| RpEvent::RedemptionReleased {
                token_id: session.token_id.unwrap_or_default(),
                device_id: session.device_id.clone().unwrap_or_default(),
            };
            let session = match claim {
                Ok(s) => s,
                Err(e) => {
                    if let Some(s) = st.sessions.get(session_id).filter(|s| s.purpose == Purpose::Redeem && !events.is_empty()) {
                        events.push(release(s));
                    }
                    return (events, Err(e));
                }
            };
            let (Some(token_id), Some(device_id)) = (session.token_id, session.device_id.clone()) else {
                return (events, Err(RpError::SessionInvalid));
            };
            match check_new_device(st, &session, credential_id, public_key, signature, now, EnrolledVia::TokenRedemption) {
                Ok(device) => {
                    events.push(RpEvent::RedemptionCompleted {
                        token_id,
                        device_id,
                        user_id: session.user_id,
                        device: device.clone(),
                    });
                    (events, Ok(device))
                }
                Err(e) => {
                    events.push(release(&session));
                    (events, Err(e))
                }
            }
        })
    }

    pub fn remove_device(&self, user_id: &str, credential_id: &CredentialId) -> Result<bool, RpError> {
        self.storage.transact(|st| {
            let present = st
                .users
                .get(user_id)
                .is_some_and(|a| a.devices.iter().any(|d| &d.credential_id == credential_id));
            if !present {
                return (Vec::new(), Ok(false));
            }
            (
                vec![RpEvent::DeviceRemoved { user_id: user_id.to_owned(), credential_id: *credential_id }],
                Ok(true),
            )
        })
    }

    pub fn account(&self, user_id: &str) -> Option<UserAccount> {
        self.storage.read(|st| st.users.get(user_id).cloned())
    }

    pub fn accounts(&self) -> Vec<UserAccount> {
        self.storage.read(|st| st.users.values().cloned().collect())
    }

    pub fn token_records(&self) -> Vec<AccessTokenRecord> {
        self.storage.read(|st| st.tokens.values().cloned().collect())
    }
}

/// Builds the device record for a registration or redemption, checking
/// the signature over the session's live challenge. The only path to a
/// stored device goes through here.
fn check_new_device(
    st: &storage::RpState,
    session: &ChallengeSession,
    credential_id: CredentialId,
    public_key: &[u8],
    signature: &[u8],
    now: u64,
    via: EnrolledVia,
) -> Result<RegisteredDevice, RpError> {
    let key = CredentialPublicKey::from_der(public_key).map_err(|_| RpError::VerificationFailed)?;
    if !verify_signature(&key, &session.challenge, signature) {
        return Err(RpError::VerificationFailed);
    }
    if let Some(account) = st.users.get(&session.user_id) {
        let clash = account.devices.iter().any(|d| {
            d.credential_id == credential_id
                && (session.device_id.is_none() || d.device_id != session.device_id)
        });
        if clash {
            return Err(RpError::DuplicateCredential);
        }
    }
    Ok(RegisteredDevice {
        credential_id,
        public_key: key,
        enrolled_at: now,
        enrolled_via: via,
        device_id: session.device_id.clone(),
    })
}

#[cfg(test)]
mod tests;
