use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;

use super::CryptoError;

/// Ed25519 key a device uses to authenticate its own requests to the relay.
#[derive(Clone)]
pub struct RequestSigningKey(SigningKey);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct RequestVerifyKey(VerifyingKey);

impl RequestSigningKey {
    pub fn generate() -> Self {
        RequestSigningKey(SigningKey::generate(&mut OsRng))
    }

    pub(crate) fn from_secret_bytes(bytes: &[u8; 32]) -> Self {
        RequestSigningKey(SigningKey::from_bytes(bytes))
    }

    pub(crate) fn secret_bytes(&self) -> zeroize::Zeroizing<[u8; 32]> {
        zeroize::Zeroizing::new(self.0.to_bytes())
    }

    pub fn verify_key(&self) -> RequestVerifyKey {
        RequestVerifyKey(self.0.verifying_key())
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.0.sign(message).to_bytes()
    }
}

impl fmt::Debug for RequestSigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RequestSigningKey").field(&self.verify_key()).finish()
    }
}

impl RequestVerifyKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidLength { expected: 32, actual: bytes.len() })?;
        VerifyingKey::from_bytes(&arr)
            .map(RequestVerifyKey)
            .map_err(|_| CryptoError::MalformedKey)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        let Ok(sig) = Signature::from_slice(signature) else {
            return false;
        };
        self.0.verify_strict(message, &sig).is_ok()
    }
}

impl fmt::Debug for RequestVerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RequestVerifyKey({})", crate::b64::encode(self.as_bytes()))
    }
}

/// The bytes a device signs for one relay request: method, path (with
/// query), body and timestamp, each length-prefixed.
pub fn canonical_request_bytes(method: &str, path: &str, body: &[u8], timestamp_ms: u64) -> Vec<u8> {
    let ts = timestamp_ms.to_string();
    let mut out = Vec::with_capacity(32 + method.len() + path.len() + body.len());
    out.extend_from_slice(b"TUSH-REQ-1");
    for part in [method.as_bytes(), path.as_bytes(), body, ts.as_bytes()] {
        out.extend_from_slice(&(part.len() as u32).to_be_bytes());
        out.extend_from_slice(part);
    }
    out
}
