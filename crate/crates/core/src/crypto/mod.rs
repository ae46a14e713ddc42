//! Cryptographic primitives shared by every component.
//!
//! * [`Challenge`]: 16 random octets from the OS CSPRNG.
//! * [`CredentialKeyPair`]: RSA-2048 credential keys, RSA-PSS/SHA-256 signatures.
//! * [`DhKeyPair`]: X25519 agreement, expanded into a [`TokenKey`] with HKDF-SHA-256.
//! * [`EncryptedEnvelope`]: the Fernet token layout (AES-128-CBC + HMAC-SHA-256).
//! * [`RequestSigningKey`]: Ed25519 keys that authenticate device requests to the relay.

mod challenge;
mod credential;
mod dh;
mod envelope;
mod request;

pub use challenge::{generate_challenge, Challenge};
pub use credential::{
    generate_credential_keypair, sign_challenge, verify_signature, CredentialKeyPair,
    CredentialPublicKey, CREDENTIAL_KEY_BITS,
};
pub use dh::{derive_token_key, generate_dh_keypair, DhKeyPair, DhPublicKey, TokenKey, KDF_CONTEXT};
pub use envelope::{
    open_token, seal_token, EncryptedEnvelope, DEFAULT_ENVELOPE_TTL, ENVELOPE_OVERHEAD,
    ENVELOPE_VERSION,
};
pub use request::{canonical_request_bytes, RequestSigningKey, RequestVerifyKey};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid length: expected {expected}, got {actual}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("degenerate peer key")]
    DegeneratePeerKey,
    #[error("integrity failure")]
    IntegrityFailure,
    #[error("envelope expired")]
    EnvelopeExpired,
    #[error("empty plaintext")]
    EmptyPlaintext,
    #[error("malformed key material")]
    MalformedKey,
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
}
