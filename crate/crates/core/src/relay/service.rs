use std::sync::Arc;

use serde::de::DeserializeOwned;

use super::{Relay, RelayError, SignedRequest};
use crate::api::*;
use crate::b64;
use crate::crypto::{DhPublicKey, RequestVerifyKey};
use crate::wire::{Handler, WireRequest, WireResponse};

/// HTTP routing for a [`Relay`].
#[derive(Debug, Clone)]
pub struct RelayService {
    relay: Arc<Relay>,
}

impl RelayService {
    pub fn new(relay: Arc<Relay>) -> Self {
        RelayService { relay }
    }
}

fn body<T: DeserializeOwned>(req: &WireRequest) -> Result<T, RelayError> {
    req.json().map_err(|e| RelayError::BadRequest(e.to_string()))
}

/// Pulls the `X-TUSH-*` headers out of a request. Missing or unparsable
/// headers are an authentication failure.
fn with_signature<R>(
    req: &WireRequest,
    f: impl FnOnce(&SignedRequest<'_>) -> Result<R, RelayError>,
) -> Result<R, RelayError> {
    let device_id = req.header(HEADER_DEVICE).ok_or(RelayError::Unauthorized)?;
    let timestamp_ms = req
        .header(HEADER_TIMESTAMP)
        .and_then(|t| t.parse().ok())
        .ok_or(RelayError::Unauthorized)?;
    let signature = req
        .header(HEADER_SIGNATURE)
        .and_then(|s| b64::decode(s).ok())
        .ok_or(RelayError::Unauthorized)?;
    f(&SignedRequest {
        device_id,
        timestamp_ms,
        signature: &signature,
        method: &req.method,
        path: &req.path,
        body: &req.body,
    })
}

fn json<T: serde::Serialize>(v: &T) -> Result<WireResponse, RelayError> {
    Ok(WireResponse::json(200, v))
}

impl RelayService {
    fn route(&self, req: &WireRequest) -> Result<WireResponse, RelayError> {
        let relay = &self.relay;
        match (req.method.as_str(), req.route()) {
            ("POST", "/devices") => {
                let b: RegisterDevice = body(req)?;
                let dh = DhPublicKey::from_slice(&b.dh_public)
                    .map_err(|_| RelayError::BadRequest("dh_public".into()))?;
                let vk = RequestVerifyKey::from_slice(&b.request_verify_key)
                    .map_err(|_| RelayError::BadRequest("request_verify_key".into()))?;
                relay.register_device(&b.user_id, &b.device_id, dh, vk)?;
                json(&OkBody::OK)
            }
            ("GET", "/devices/peers") => {
                let me = req.query_param("device_id").ok_or(RelayError::BadRequest("device_id".into()))?;
                let peers = with_signature(req, |s| relay.list_peers(s, &me))?;
                json(&Peers {
                    peers: peers
                        .into_iter()
                        .map(|(device_id, dh)| Peer { device_id, dh_public: dh.as_bytes().to_vec() })
                        .collect(),
                })
            }
            ("POST", "/envelopes") => {
                let b: Deposit = body(req)?;
                with_signature(req, |s| {
                    relay.deposit_envelope(s, &b.sender_id, &b.receiver_id, b.envelope.clone(), &b.rp_origin)
                })?;
                json(&OkBody::OK)
            }
            ("GET", "/envelopes") => {
                let me = req.query_param("receiver_id").ok_or(RelayError::BadRequest("receiver_id".into()))?;
                let items = with_signature(req, |s| relay.poll_envelopes(s, &me))?;
                json(&Mailbox {
                    items: items
                        .into_iter()
                        .map(|p| MailboxItem {
                            index: p.index,
                            envelope: p.envelope,
                            sender_device_id: p.sender_device_id,
                            sender_dh_public: p.sender_dh_public.as_bytes().to_vec(),
                            rp_origin: p.rp_origin,
                        })
                        .collect(),
                })
            }
            ("POST", "/envelopes/ack") => {
                let b: Ack = body(req)?;
                with_signature(req, |s| relay.ack_envelope(s, &b.receiver_id, b.index))?;
                json(&OkBody::OK)
            }
            _ => Ok(WireResponse::error(404, "not found")),
        }
    }
}

impl Handler for RelayService {
    fn handle(&self, req: &WireRequest) -> WireResponse {
        self.route(req).unwrap_or_else(|e| {
            log::debug!("relay {} {}: {e}", req.method, req.route());
            WireResponse::error(e.status(), e.code())
        })
    }
}
