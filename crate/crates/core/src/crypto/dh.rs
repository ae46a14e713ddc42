use std::fmt;

use hkdf::Hkdf;
use rand::rngs::OsRng;
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::{Zeroize, ZeroizeOnDrop};

use super::CryptoError;

/// Info string for the HKDF expand step.
pub const KDF_CONTEXT: &[u8] = b"tush-key-v1";

/// A device's long-lived X25519 key pair.
#[derive(Clone)]
pub struct DhKeyPair {
    secret: StaticSecret,
    public: DhPublicKey,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct DhPublicKey([u8; 32]);

/// 32 octets: HMAC subkey (first 16) followed by the AES-128 subkey (last 16).
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct TokenKey([u8; 32]);

impl DhKeyPair {
    pub fn generate() -> Self {
        Self::from_secret_bytes(StaticSecret::random_from_rng(OsRng).to_bytes())
    }

    /// Rebuilds a key pair from a stored scalar. The public element is
    /// recomputed, so the same scalar always yields the same public key.
    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = DhPublicKey(PublicKey::from(&secret).to_bytes());
        DhKeyPair { secret, public }
    }

    pub fn public(&self) -> DhPublicKey {
        self.public
    }

    pub(crate) fn secret_bytes(&self) -> zeroize::Zeroizing<[u8; 32]> {
        zeroize::Zeroizing::new(self.secret.to_bytes())
    }
}

impl fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl DhPublicKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        DhPublicKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidLength { expected: 32, actual: bytes.len() })?;
        Ok(DhPublicKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for DhPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DhPublicKey({})", crate::b64::encode(self.0))
    }
}

impl TokenKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        TokenKey(bytes)
    }

    pub fn generate() -> Self {
        let mut bytes = [0u8; 32];
        rand::RngCore::fill_bytes(&mut OsRng, &mut bytes);
        TokenKey(bytes)
    }

    pub(crate) fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub(crate) fn mac_key(&self) -> &[u8] {
        &self.0[..16]
    }

    pub(crate) fn cipher_key(&self) -> &[u8] {
        &self.0[16..]
    }
}

impl fmt::Debug for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TokenKey(..)")
    }
}

pub fn generate_dh_keypair() -> DhKeyPair {
    DhKeyPair::generate()
}

/// X25519 followed by HKDF-SHA-256 (empty salt, info [`KDF_CONTEXT`]).
///
/// A peer element of small order collapses the shared point to zero; that
/// is rejected rather than producing a key every observer can compute.
pub fn derive_token_key(own: &DhKeyPair, peer: &DhPublicKey) -> Result<TokenKey, CryptoError> {
    let shared = own.secret.diffie_hellman(&PublicKey::from(peer.0));
    if !shared.was_contributory() {
        return Err(CryptoError::DegeneratePeerKey);
    }
    let hk = Hkdf::<Sha256>::new(Some(&[]), shared.as_bytes());
    let mut okm = [0u8; 32];
    hk.expand(KDF_CONTEXT, &mut okm).expect("32 octets is a valid HKDF length");
    Ok(TokenKey(okm))
}
