//! JSON bodies for the RP and relay endpoints. Binary fields are
//! base64url without padding.

use serde::{Deserialize, Serialize};

use crate::b64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OkBody {
    pub ok: bool,
}

impl OkBody {
    pub const OK: OkBody = OkBody { ok: true };
}

// Relying party.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterBegin {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeIssued {
    #[serde(with = "b64")]
    pub session_id: Vec<u8>,
    #[serde(with = "b64")]
    pub challenge: Vec<u8>,
}

/// Body of `/register/finish` and `/token/redeem/finish`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CredentialFinish {
    #[serde(with = "b64")]
    pub session_id: Vec<u8>,
    #[serde(with = "b64")]
    pub credential_id: Vec<u8>,
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CredentialIdBody {
    #[serde(with = "b64")]
    pub credential_id: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthBegin {
    pub user_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthChallenge {
    #[serde(with = "b64")]
    pub session_id: Vec<u8>,
    #[serde(with = "b64")]
    pub challenge: Vec<u8>,
    #[serde(with = "b64::seq")]
    pub credential_ids: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthFinish {
    #[serde(with = "b64")]
    pub session_id: Vec<u8>,
    #[serde(with = "b64")]
    pub credential_id: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthFinished {
    pub ok: bool,
    #[serde(with = "b64")]
    pub session_proof: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenIssue {
    #[serde(with = "b64")]
    pub session_proof: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenBody {
    #[serde(with = "b64")]
    pub token: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedeemBegin {
    #[serde(with = "b64")]
    pub token: Vec<u8>,
    pub device_id: String,
}

// Relay.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterDevice {
    pub user_id: String,
    pub device_id: String,
    #[serde(with = "b64")]
    pub dh_public: Vec<u8>,
    #[serde(with = "b64")]
    pub request_verify_key: Vec<u8>,
    /// Identity-provider assertion. Carried but not yet checked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assertion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub device_id: String,
    #[serde(with = "b64")]
    pub dh_public: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Peers {
    pub peers: Vec<Peer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Deposit {
    pub sender_id: String,
    pub receiver_id: String,
    #[serde(with = "b64")]
    pub envelope: Vec<u8>,
    #[serde(default)]
    pub rp_origin: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxItem {
    pub index: u64,
    #[serde(with = "b64")]
    pub envelope: Vec<u8>,
    pub sender_device_id: String,
    #[serde(with = "b64")]
    pub sender_dh_public: Vec<u8>,
    #[serde(default)]
    pub rp_origin: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mailbox {
    pub items: Vec<MailboxItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ack {
    pub receiver_id: String,
    pub index: u64,
}

pub const HEADER_DEVICE: &str = "X-TUSH-Device";
pub const HEADER_TIMESTAMP: &str = "X-TUSH-Timestamp";
pub const HEADER_SIGNATURE: &str = "X-TUSH-Signature";
