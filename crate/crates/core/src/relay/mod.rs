//! The relay: a directory of each user's devices and their DH public keys,
//! plus a mailbox of sealed envelopes. It holds no key that opens an
//! envelope.
//!
//! Every call after registration must carry a request signature from the
//! calling device's registered Ed25519 key, over [`canonical_request_bytes`]
//! with a millisecond timestamp. Timestamps outside +/-60 s are refused and
//! each `(device, timestamp)` pair is accepted once.

mod service;

pub use service::RelayService;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;
use uuid::{Uuid, Variant};

use crate::b64;
use crate::clock::Clock;
use crate::crypto::{canonical_request_bytes, DhPublicKey, RequestVerifyKey};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("device exists")]
    DeviceExists,
    #[error("bad device id")]
    BadDeviceId,
    #[error("unauthorized")]
    Unauthorized,
    #[error("unknown device")]
    UnknownDevice,
    #[error("not peer devices")]
    NotPeerDevices,
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl RelayError {
    pub fn code(&self) -> &'static str {
        match self {
            RelayError::DeviceExists => "device exists",
            RelayError::BadDeviceId => "bad device id",
            RelayError::Unauthorized => "unauthorized",
            RelayError::UnknownDevice => "unknown device",
            RelayError::NotPeerDevices => "not peer devices",
            RelayError::BadRequest(_) => "bad request",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            RelayError::DeviceExists => 409,
            RelayError::Unauthorized => 401,
            RelayError::UnknownDevice => 404,
            RelayError::NotPeerDevices => 403,
            RelayError::BadDeviceId | RelayError::BadRequest(_) => 400,
        }
    }
}

/// Accepts only canonical lowercase hyphenated RFC 4122 version-4 UUIDs.
pub fn is_valid_device_id(id: &str) -> bool {
    match Uuid::parse_str(id) {
        Ok(u) => {
            u.get_version_num() == 4
                && u.get_variant() == Variant::RFC4122
                && u.hyphenated().to_string() == id
        }
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceRegistration {
    pub device_id: String,
    pub user_id: String,
    #[serde(serialize_with = "ser_dh")]
    pub dh_public: DhPublicKey,
    #[serde(serialize_with = "ser_vk")]
    pub request_verify_key: RequestVerifyKey,
    pub registered_at: u64,
}

fn ser_dh<S: serde::Serializer>(k: &DhPublicKey, s: S) -> Result<S::Ok, S::Error> {
    b64::serialize(k.as_bytes(), s)
}

fn ser_vk<S: serde::Serializer>(k: &RequestVerifyKey, s: S) -> Result<S::Ok, S::Error> {
    b64::serialize(k.as_bytes(), s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnvelopeRecord {
    pub index: u64,
    #[serde(with = "b64")]
    pub envelope: Vec<u8>,
    pub sender_device_id: String,
    pub receiver_device_id: String,
    pub rp_origin: String,
    pub deposited_at: u64,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingEnvelope {
    pub index: u64,
    pub envelope: Vec<u8>,
    pub sender_device_id: String,
    pub sender_dh_public: DhPublicKey,
    pub rp_origin: String,
}

/// The signature material a caller presents with a request.
#[derive(Debug, Clone, Copy)]
pub struct SignedRequest<'a> {
    pub device_id: &'a str,
    pub timestamp_ms: u64,
    pub signature: &'a [u8],
    pub method: &'a str,
    pub path: &'a str,
    pub body: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayConfig {
    pub max_skew_ms: u64,
    /// Undelivered envelopes older than this are dropped, in seconds.
    pub envelope_retention: u64,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig { max_skew_ms: 60_000, envelope_retention: 900 }
    }
}

#[derive(Debug, Default, Serialize)]
struct RelayState {
    devices: BTreeMap<String, DeviceRegistration>,
    envelopes: Vec<EnvelopeRecord>,
    next_index: u64,
    #[serde(skip)]
    seen: HashSet<(String, u64)>,
}

pub struct Relay {
    state: Mutex<RelayState>,
    clock: Arc<dyn Clock>,
    config: RelayConfig,
}

impl fmt::Debug for Relay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Relay").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Relay {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_config(clock, RelayConfig::default())
    }

    pub fn with_config(clock: Arc<dyn Clock>, config: RelayConfig) -> Self {
        Relay { state: Mutex::new(RelayState { next_index: 1, ..Default::default() }), clock, config }
    }

    pub fn register_device(
        &self,
        user_id: &str,
        device_id: &str,
        dh_public: DhPublicKey,
        request_verify_key: RequestVerifyKey,
    ) -> Result<(), RelayError> {
        if !is_valid_device_id(device_id) {
            return Err(RelayError::BadDeviceId);
        }
        if user_id.is_empty() {
            return Err(RelayError::BadRequest("empty user id".into()));
        }
        let mut st = self.state.lock().unwrap();
        if st.devices.contains_key(device_id) {
            return Err(RelayError::DeviceExists);
        }
        st.devices.insert(
            device_id.to_owned(),
            DeviceRegistration {
                device_id: device_id.to_owned(),
                user_id: user_id.to_owned(),
                dh_public,
                request_verify_key,
                registered_at: self.clock.now_secs(),
            },
        );
        Ok(())
    }

    /// Checks the request signature and burns its timestamp. Returns the
    /// caller's registration.
    fn authenticate(
        &self,
        st: &mut RelayState,
        req: &SignedRequest<'_>,
        claimed: &str,
    ) -> Result<DeviceRegistration, RelayError> {
        if req.device_id != claimed {
            return Err(RelayError::Unauthorized);
        }
        let reg = st.devices.get(req.device_id).ok_or(RelayError::UnknownDevice)?.clone();
        let now = self.clock.now_millis();
        if now.abs_diff(req.timestamp_ms) > self.config.max_skew_ms {
            return Err(RelayError::Unauthorized);
        }
        let msg = canonical_request_bytes(req.method, req.path, req.body, req.timestamp_ms);
        if !reg.request_verify_key.verify(&msg, req.signature) {
            return Err(RelayError::Unauthorized);
        }
        let horizon = now.saturating_sub(self.config.max_skew_ms);
        st.seen.retain(|(_, ts)| *ts >= horizon);
        if !st.seen.insert((req.device_id.to_owned(), req.timestamp_ms)) {
            return Err(RelayError::Unauthorized);
        }
        Ok(reg)
    }

    fn expire(&self, st: &mut RelayState) {
        let now = self.clock.now_secs();
        let keep = self.config.envelope_retention;
        st.envelopes.retain(|e| !e.delivered && now <= e.deposited_at + keep);
    }

    /// Other devices of the caller's user, with their DH public keys.
    pub fn list_peers(
        &self,
        req: &SignedRequest<'_>,
        device_id: &str,
    ) -> Result<Vec<(String, DhPublicKey)>, RelayError> {
        let mut st = self.state.lock().unwrap();
        let me = self.authenticate(&mut st, req, device_id)?;
        Ok(st
            .devices
            .values()
            .filter(|d| d.user_id == me.user_id && d.device_id != me.device_id)
            .map(|d| (d.device_id.clone(), d.dh_public))
            .collect())
    }

    pub fn deposit_envelope(
        &self,
        req: &SignedRequest<'_>,
        sender_id: &str,
        receiver_id: &str,
        envelope: Vec<u8>,
        rp_origin: &str,
    ) -> Result<u64, RelayError> {
        let mut st = self.state.lock().unwrap();
        let sender = self.authenticate(&mut st, req, sender_id)?;
        let peer = st
            .devices
            .get(receiver_id)
            .is_some_and(|r| r.user_id == sender.user_id && r.device_id != sender.device_id);
        if !peer {
            return Err(RelayError::NotPeerDevices);
        }
        if envelope.is_empty() {
            return Err(RelayError::BadRequest("empty envelope".into()));
        }
        self.expire(&mut st);
        let index = st.next_index;
        st.next_index += 1;
        st.envelopes.push(EnvelopeRecord {
            index,
            envelope,
            sender_device_id: sender.device_id,
            receiver_device_id: receiver_id.to_owned(),
            rp_origin: rp_origin.to_owned(),
            deposited_at: self.clock.now_secs(),
            delivered: false,
        });
        Ok(index)
    }

    /// Undelivered envelopes for the caller, oldest first. Polling does not
    /// mark anything delivered.
    pub fn poll_envelopes(
        &self,
        req: &SignedRequest<'_>,
        receiver_id: &str,
    ) -> Result<Vec<PendingEnvelope>, RelayError> {
        let mut st = self.state.lock().unwrap();
        self.authenticate(&mut st, req, receiver_id)?;
        self.expire(&mut st);
        let mut out: Vec<_> = st
            .envelopes
            .iter()
            .filter(|e| e.receiver_device_id == receiver_id && !e.delivered)
            .filter_map(|e| {
                // A sender is never unregistered, but don't trust that here.
                let sender = st.devices.get(&e.sender_device_id)?;
                Some((e.deposited_at, PendingEnvelope {
                    index: e.index,
                    envelope: e.envelope.clone(),
                    sender_device_id: e.sender_device_id.clone(),
                    sender_dh_public: sender.dh_public,
                    rp_origin: e.rp_origin.clone(),
                }))
            })
            .collect();
        out.sort_by_key(|(at, p)| (*at, p.index));
        Ok(out.into_iter().map(|(_, p)| p).collect())
    }

    /// Marks an envelope delivered. Idempotent for its receiver.
    pub fn ack_envelope(
        &self,
        req: &SignedRequest<'_>,
        receiver_id: &str,
        index: u64,
    ) -> Result<(), RelayError> {
        let mut st = self.state.lock().unwrap();
        self.authenticate(&mut st, req, receiver_id)?;
        let issued = index < st.next_index;
        match st.envelopes.iter_mut().find(|e| e.index == index) {
            Some(e) if e.receiver_device_id == receiver_id => {
                e.delivered = true;
                Ok(())
            }
            Some(_) => Err(RelayError::Unauthorized),
            // Already acked and collected, or never existed.
            None if issued => Ok(()),
            None => Err(RelayError::Unauthorized),
        }
    }

    pub fn device(&self, device_id: &str) -> Option<DeviceRegistration> {
        self.state.lock().unwrap().devices.get(device_id).cloned()
    }

    pub fn devices(&self) -> Vec<DeviceRegistration> {
        self.state.lock().unwrap().devices.values().cloned().collect()
    }

    pub fn envelope_records(&self) -> Vec<EnvelopeRecord> {
        self.state.lock().unwrap().envelopes.clone()
    }

    /// Serialized form of everything the relay keeps.
    pub fn persistent_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&*self.state.lock().unwrap()).expect("relay state serializes")
    }
}
