use std::sync::Arc;

use serde::de::DeserializeOwned;

use super::{RelyingParty, RpError, SessionId};
use crate::api::*;
use crate::authenticator::CredentialId;
use crate::wire::{Handler, WireRequest, WireResponse};

/// HTTP routing for a [`RelyingParty`].
#[derive(Debug, Clone)]
pub struct RpService {
    rp: Arc<RelyingParty>,
}

impl RpService {
    pub fn new(rp: Arc<RelyingParty>) -> Self {
        RpService { rp }
    }
}

fn body<T: DeserializeOwned>(req: &WireRequest) -> Result<T, RpError> {
    req.json().map_err(|e| RpError::BadRequest(e.to_string()))
}

fn session_id(bytes: &[u8]) -> Result<SessionId, RpError> {
    SessionId::from_slice(bytes).ok_or(RpError::SessionInvalid)
}

fn credential_id(bytes: &[u8]) -> Result<CredentialId, RpError> {
    CredentialId::from_slice(bytes).ok_or_else(|| RpError::BadRequest("credential id length".into()))
}

impl RpService {
    fn route(&self, req: &WireRequest) -> Result<WireResponse, RpError> {
        let rp = &self.rp;
        let ok = |v: &dyn erased::Json| Ok(WireResponse { status: 200, body: v.to_json() });
        match (req.method.as_str(), req.route()) {
            ("POST", "/register/begin") => {
                let b: RegisterBegin = body(req)?;
                let (sid, ch) = rp.begin_registration(&b.user_id, b.device_id.as_deref())?;
                ok(&ChallengeIssued { session_id: sid.as_bytes().to_vec(), challenge: ch.as_bytes().to_vec() })
            }
            ("POST", "/register/finish") => {
                let b: CredentialFinish = body(req)?;
                let dev = rp.finish_registration(
                    &session_id(&b.session_id)?,
                    credential_id(&b.credential_id)?,
                    &b.public_key,
                    &b.signature,
                )?;
                ok(&CredentialIdBody { credential_id: dev.credential_id.as_bytes().to_vec() })
            }
            ("POST", "/auth/begin") => {
                let b: AuthBegin = body(req)?;
                let (sid, ch, ids) = rp.begin_authentication(&b.user_id)?;
                ok(&AuthChallenge {
                    session_id: sid.as_bytes().to_vec(),
                    challenge: ch.as_bytes().to_vec(),
                    credential_ids: ids.iter().map(|c| c.as_bytes().to_vec()).collect(),
                })
            }
            ("POST", "/auth/finish") => {
                let b: AuthFinish = body(req)?;
                let out = rp.finish_authentication(
                    &session_id(&b.session_id)?,
                    &credential_id(&b.credential_id).map_err(|_| RpError::UnknownCredential)?,
                    &b.signature,
                )?;
                ok(&AuthFinished { ok: true, session_proof: out.session_proof.to_vec() })
            }
            ("POST", "/token/issue") => {
                let b: TokenIssue = body(req)?;
                let token = rp.issue_access_token(&b.session_proof)?;
                ok(&TokenBody { token: token.to_vec() })
            }
            ("POST", "/token/redeem/begin") => {
                let b: RedeemBegin = body(req)?;
                let (sid, ch) = rp.redeem_token_begin(&b.token, &b.device_id)?;
                ok(&ChallengeIssued { session_id: sid.as_bytes().to_vec(), challenge: ch.as_bytes().to_vec() })
            }
            ("POST", "/token/redeem/finish") => {
                let b: CredentialFinish = body(req)?;
                let dev = rp.redeem_token_finish(
                    &session_id(&b.session_id)?,
                    credential_id(&b.credential_id)?,
                    &b.public_key,
                    &b.signature,
                )?;
                ok(&CredentialIdBody { credential_id: dev.credential_id.as_bytes().to_vec() })
            }
            _ => Ok(WireResponse::error(404, "not found")),
        }
    }
}

impl Handler for RpService {
    fn handle(&self, req: &WireRequest) -> WireResponse {
        self.route(req).unwrap_or_else(|e| {
            log::debug!("rp {} {}: {e}", req.method, req.route());
            WireResponse::error(e.status(), e.code())
        })
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("responses serialize")
        }
    }
}
