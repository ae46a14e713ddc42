//! Typed clients for the RP and relay APIs over any [`Transport`].

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::api::*;
use crate::authenticator::{Attestation, CredentialId};
use crate::b64;
use crate::clock::Clock;
use crate::crypto::{canonical_request_bytes, Challenge, DhPublicKey, RequestSigningKey, RequestVerifyKey};
use crate::relay::PendingEnvelope;
use crate::rp::SessionId;
use crate::wire::{Transport, TransportError, WireRequest, WireResponse};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    /// The server answered with an error body; `code` is its `error` field.
    #[error("{code} (status {status})")]
    Remote { status: u16, code: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl ClientError {
    /// The server's error phrase, if the server answered.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}

fn decode<T: DeserializeOwned>(resp: WireResponse) -> Result<T, ClientError> {
    if !resp.is_success() {
        let code = serde_json::from_slice::<ErrorBody>(&resp.body)
            .map(|b| b.error)
            .unwrap_or_else(|_| format!("http {}", resp.status));
        return Err(ClientError::Remote { status: resp.status, code });
    }
    serde_json::from_slice(&resp.body).map_err(|e| ClientError::Protocol(e.to_string()))
}

fn session(bytes: &[u8]) -> Result<SessionId, ClientError> {
    SessionId::from_slice(bytes).ok_or_else(|| ClientError::Protocol("session id".into()))
}

fn challenge(bytes: &[u8]) -> Result<Challenge, ClientError> {
    Challenge::from_slice(bytes).map_err(|_| ClientError::Protocol("challenge".into()))
}

fn credential(bytes: &[u8]) -> Result<CredentialId, ClientError> {
    CredentialId::from_slice(bytes).ok_or_else(|| ClientError::Protocol("credential id".into()))
}

#[derive(Clone)]
pub struct RpClient {
    transport: Arc<dyn Transport>,
}

impl fmt::Debug for RpClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RpClient")
    }
}

impl RpClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        RpClient { transport }
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        decode(self.transport.send(WireRequest::post_json(path, body))?)
    }

    pub fn begin_registration(
        &self,
        user_id: &str,
        device_id: Option<&str>,
    ) -> Result<(SessionId, Challenge), ClientError> {
        let r: ChallengeIssued = self.post(
            "/register/begin",
            &RegisterBegin { user_id: user_id.to_owned(), device_id: device_id.map(str::to_owned) },
        )?;
        Ok((session(&r.session_id)?, challenge(&r.challenge)?))
    }

    pub fn finish_registration(&self, sid: &SessionId, att: &Attestation) -> Result<CredentialId, ClientError> {
        let r: CredentialIdBody = self.post("/register/finish", &finish_body(sid, att))?;
        credential(&r.credential_id)
    }

    pub fn begin_authentication(
        &self,
        user_id: &str,
    ) -> Result<(SessionId, Challenge, Vec<CredentialId>), ClientError> {
        let r: AuthChallenge = self.post("/auth/begin", &AuthBegin { user_id: user_id.to_owned() })?;
        let ids = r.credential_ids.iter().map(|c| credential(c)).collect::<Result<_, _>>()?;
        Ok((session(&r.session_id)?, challenge(&r.challenge)?, ids))
    }

    /// Returns the session proof that authorizes one token issue.
    pub fn finish_authentication(
        &self,
        sid: &SessionId,
        credential_id: &CredentialId,
        signature: &[u8],
    ) -> Result<Vec<u8>, ClientError> {
        let r: AuthFinished = self.post(
            "/auth/finish",
            &AuthFinish {
                session_id: sid.as_bytes().to_vec(),
                credential_id: credential_id.as_bytes().to_vec(),
                signature: signature.to_vec(),
            },
        )?;
        Ok(r.session_proof)
    }

    pub fn issue_access_token(&self, session_proof: &[u8]) -> Result<Vec<u8>, ClientError> {
        let r: TokenBody = self.post("/token/issue", &TokenIssue { session_proof: session_proof.to_vec() })?;
        Ok(r.token)
    }

    pub fn redeem_token_begin(&self, token: &[u8], device_id: &str) -> Result<(SessionId, Challenge), ClientError> {
        let r: ChallengeIssued = self.post(
            "/token/redeem/begin",
            &RedeemBegin { token: token.to_vec(), device_id: device_id.to_owned() },
        )?;
        Ok((session(&r.session_id)?, challenge(&r.challenge)?))
    }

    pub fn redeem_token_finish(&self, sid: &SessionId, att: &Attestation) -> Result<CredentialId, ClientError> {
        let r: CredentialIdBody = self.post("/token/redeem/finish", &finish_body(sid, att))?;
        credential(&r.credential_id)
    }
}

fn finish_body(sid: &SessionId, att: &Attestation) -> CredentialFinish {
    CredentialFinish {
        session_id: sid.as_bytes().to_vec(),
        credential_id: att.credential_id.as_bytes().to_vec(),
        public_key: att.public_key.to_der().to_vec(),
        signature: att.signature.clone(),
    }
}

/// Relay client for one device. Every call after registration carries the
/// device's request signature; timestamps are strictly increasing per client
/// so back-to-back calls never collide in the relay's replay cache.
pub struct RelayClient {
    transport: Arc<dyn Transport>,
    device_id: String,
    signer: RequestSigningKey,
    clock: Arc<dyn Clock>,
    last_ts: Mutex<u64>,
}

impl fmt::Debug for RelayClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelayClient").field("device_id", &self.device_id).finish()
    }
}

impl RelayClient {
    pub fn new(
        transport: Arc<dyn Transport>,
        device_id: impl Into<String>,
        signer: RequestSigningKey,
        clock: Arc<dyn Clock>,
    ) -> Self {
        RelayClient { transport, device_id: device_id.into(), signer, clock, last_ts: Mutex::new(0) }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    fn next_timestamp(&self) -> u64 {
        let mut last = self.last_ts.lock().unwrap();
        *last = self.clock.now_millis().max(*last + 1);
        *last
    }

    fn signed(&self, mut req: WireRequest) -> Result<WireResponse, ClientError> {
        let ts = self.next_timestamp();
        let sig = self.signer.sign(&canonical_request_bytes(&req.method, &req.path, &req.body, ts));
        req.set_header(HEADER_DEVICE, self.device_id.clone());
        req.set_header(HEADER_TIMESTAMP, ts.to_string());
        req.set_header(HEADER_SIGNATURE, b64::encode(sig));
        Ok(self.transport.send(req)?)
    }

    fn query(path: &str, key: &str, value: &str) -> String {
        let q: String = url::form_urlencoded::Serializer::new(String::new()).append_pair(key, value).finish();
        format!("{path}?{q}")
    }

    pub fn register(
        &self,
        user_id: &str,
        dh_public: &DhPublicKey,
        assertion: Option<String>,
    ) -> Result<(), ClientError> {
        let vk: RequestVerifyKey = self.signer.verify_key();
        let body = RegisterDevice {
            user_id: user_id.to_owned(),
            device_id: self.device_id.clone(),
            dh_public: dh_public.as_bytes().to_vec(),
            request_verify_key: vk.as_bytes().to_vec(),
            assertion,
        };
        let _: OkBody = decode(self.transport.send(WireRequest::post_json("/devices", &body))?)?;
        Ok(())
    }

    pub fn peers(&self) -> Result<Vec<(String, DhPublicKey)>, ClientError> {
        let r: Peers = decode(self.signed(WireRequest::get(Self::query("/devices/peers", "device_id", &self.device_id)))?)?;
        r.peers
            .into_iter()
            .map(|p| {
                let dh = DhPublicKey::from_slice(&p.dh_public).map_err(|_| ClientError::Protocol("dh_public".into()))?;
                Ok((p.device_id, dh))
            })
            .collect()
    }

    pub fn deposit(&self, receiver_id: &str, envelope: &[u8], rp_origin: &str) -> Result<(), ClientError> {
        let body = Deposit {
            sender_id: self.device_id.clone(),
            receiver_id: receiver_id.to_owned(),
            envelope: envelope.to_vec(),
            rp_origin: rp_origin.to_owned(),
        };
        let _: OkBody = decode(self.signed(WireRequest::post_json("/envelopes", &body))?)?;
        Ok(())
    }

    pub fn poll(&self) -> Result<Vec<PendingEnvelope>, ClientError> {
        let r: Mailbox = decode(self.signed(WireRequest::get(Self::query("/envelopes", "receiver_id", &self.device_id)))?)?;
        r.items
            .into_iter()
            .map(|i| {
                let dh = DhPublicKey::from_slice(&i.sender_dh_public)
                    .map_err(|_| ClientError::Protocol("sender_dh_public".into()))?;
                Ok(PendingEnvelope {
                    index: i.index,
                    envelope: i.envelope,
                    sender_device_id: i.sender_device_id,
                    sender_dh_public: dh,
                    rp_origin: i.rp_origin,
                })
            })
            .collect()
    }

    pub fn ack(&self, index: u64) -> Result<(), ClientError> {
        let body = Ack { receiver_id: self.device_id.clone(), index };
        let _: OkBody = decode(self.signed(WireRequest::post_json("/envelopes/ack", &body))?)?;
        Ok(())
    }
}
