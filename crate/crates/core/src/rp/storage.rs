//! Event-sourced RP state. Every mutation is a [`RpEvent`] appended to a
//! [`Journal`] and then applied; replaying the journal rebuilds the state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    AccessTokenRecord, AuthProofRecord, ChallengeSession, RegisteredDevice, RpError, SessionId,
    UserAccount,
};
use crate::authenticator::CredentialId;
use crate::journal::{FileJournal, Journal, MemoryJournal};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RpEvent {
    SessionIssued(ChallengeSession),
    SessionConsumed { session_id: SessionId },
    DeviceEnrolled { user_id: String, device: RegisteredDevice },
    DeviceRemoved { user_id: String, credential_id: CredentialId },
    ProofIssued(AuthProofRecord),
    ProofUsed {
        #[serde(with = "crate::b64::array")]
        proof_hash: [u8; 32],
    },
    TokenIssued(AccessTokenRecord),
    RedemptionClaimed { token_id: u64, device_id: String, at: u64 },
    RedemptionReleased { token_id: u64, device_id: String },
    RedemptionCompleted {
        token_id: u64,
        device_id: String,
        user_id: String,
        device: RegisteredDevice,
    },
}

#[derive(Debug, Default)]
pub struct RpState {
    pub(super) users: BTreeMap<String, UserAccount>,
    pub(super) sessions: HashMap<SessionId, ChallengeSession>,
    pub(super) tokens: BTreeMap<u64, AccessTokenRecord>,
    pub(super) proofs: HashMap<[u8; 32], AuthProofRecord>,
}

impl RpState {
    pub(super) fn next_token_id(&self) -> u64 {
        self.tokens.keys().next_back().map_or(1, |k| k + 1)
    }

    fn enroll(&mut self, user_id: &str, device: RegisteredDevice) {
        let account = self
            .users
            .entry(user_id.to_owned())
            .or_insert_with(|| UserAccount { user_id: user_id.to_owned(), devices: Vec::new() });
        let same_device = device.device_id.as_ref().and_then(|id| {
            account.devices.iter().position(|d| d.device_id.as_ref() == Some(id))
        });
        match same_device {
            Some(i) => account.devices[i] = device,
            None => account.devices.push(device),
        }
    }

    fn apply(&mut self, event: RpEvent) {
        match event {
            RpEvent::SessionIssued(s) => {
                self.sessions.insert(s.session_id, s);
            }
            RpEvent::SessionConsumed { session_id } => {
                if let Some(s) = self.sessions.get_mut(&session_id) {
                    s.consumed = true;
                }
            }
            RpEvent::DeviceEnrolled { user_id, device } => self.enroll(&user_id, device),
            RpEvent::DeviceRemoved { user_id, credential_id } => {
                if let Some(a) = self.users.get_mut(&user_id) {
                    a.devices.retain(|d| d.credential_id != credential_id);
                }
            }
            RpEvent::ProofIssued(p) => {
                self.proofs.insert(p.proof_hash, p);
            }
            RpEvent::ProofUsed { proof_hash } => {
                if let Some(p) = self.proofs.get_mut(&proof_hash) {
                    p.used = true;
                }
            }
            RpEvent::TokenIssued(t) => {
                self.tokens.insert(t.token_id, t);
            }
            RpEvent::RedemptionClaimed { token_id, device_id, at } => {
                if let Some(t) = self.tokens.get_mut(&token_id) {
                    t.pending.insert(device_id, at);
                }
            }
            RpEvent::RedemptionReleased { token_id, device_id } => {
                if let Some(t) = self.tokens.get_mut(&token_id) {
                    t.pending.remove(&device_id);
                }
            }
            RpEvent::RedemptionCompleted { token_id, device_id, user_id, device } => {
                if let Some(t) = self.tokens.get_mut(&token_id) {
                    t.pending.remove(&device_id);
                    t.redeemed_by.insert(device_id);
                }
                self.enroll(&user_id, device);
            }
        }
    }
}

struct Inner {
    state: RpState,
    journal: Box<dyn Journal>,
}

/// Internally synchronized RP storage. All reads and writes take one lock,
/// so a transaction's check-then-write is atomic.
pub struct RpStorage {
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for RpStorage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RpStorage").finish_non_exhaustive()
    }
}

impl RpStorage {
    pub fn in_memory() -> Self {
        Self::with_journal(Box::<MemoryJournal>::default(), Vec::new())
            .expect("empty journal replays")
    }

    pub fn open_file(path: impl AsRef<Path>) -> Result<Self, RpError> {
        let (journal, lines) =
            FileJournal::open(path).map_err(|e| RpError::Storage(e.to_string()))?;
        Self::with_journal(Box::new(journal), lines)
    }

    /// Builds storage over any journal, replaying `existing` records first.
    pub fn with_journal(journal: Box<dyn Journal>, existing: Vec<Vec<u8>>) -> Result<Self, RpError> {
        let mut state = RpState::default();
        for line in existing {
            let ev: RpEvent = serde_json::from_slice(&line)
                .map_err(|e| RpError::Storage(format!("journal replay: {e}")))?;
            state.apply(ev);
        }
        Ok(RpStorage { inner: Mutex::new(Inner { state, journal }) })
    }

    /// Runs `f` against the current state and commits the events it returns.
    /// Events are committed even when `f` reports a domain error, so a
    /// failed ceremony still consumes its session.
    pub(super) fn transact<R>(
        &self,
        f: impl FnOnce(&RpState) -> (Vec<RpEvent>, Result<R, RpError>),
    ) -> Result<R, RpError> {
        let mut inner = self.inner.lock().unwrap();
        let (events, result) = f(&inner.state);
        for ev in events {
            let line = serde_json::to_vec(&ev).map_err(|e| RpError::Storage(e.to_string()))?;
            inner.journal.append(&line).map_err(|e| RpError::Storage(e.to_string()))?;
            inner.state.apply(ev);
        }
        result
    }

    pub(super) fn read<R>(&self, f: impl FnOnce(&RpState) -> R) -> R {
        f(&self.inner.lock().unwrap().state)
    }

    /// The bytes this storage has persisted.
    pub fn persistent_bytes(&self) -> Vec<u8> {
        self.inner.lock().unwrap().journal.contents().unwrap_or_default()
    }
}

impl AccessTokenRecord {
    pub(super) fn is_claimed_by(&self, device_id: &str, now: u64, claim_ttl: u64) -> bool {
        self.redeemed_by.contains(device_id)
            || self.pending.get(device_id).is_some_and(|at| now <= at + claim_ttl)
    }
}
