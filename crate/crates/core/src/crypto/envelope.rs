//! Fernet token layout, as raw octets:
//!
//! ```text
//! version (1) | timestamp (8, big-endian seconds) | iv (16) | ciphertext (16n) | hmac (32)
//! ```
//!
//! The HMAC-SHA-256 covers everything before it and is checked before any
//! decryption is attempted.

use aes::cipher::block_padding::Pkcs7;
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::Sha256;

use super::{CryptoError, TokenKey};

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

pub const ENVELOPE_VERSION: u8 = 0x80;
/// Seconds an envelope stays openable after it was sealed.
pub const DEFAULT_ENVELOPE_TTL: u64 = 600;

const HEADER_LEN: usize = 1 + 8 + 16;
const MAC_LEN: usize = 32;
const BLOCK: usize = 16;
/// Bytes added around the ciphertext.
pub const ENVELOPE_OVERHEAD: usize = HEADER_LEN + MAC_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedEnvelope {
    pub version: u8,
    pub timestamp: u64,
    pub iv: [u8; 16],
    pub ciphertext: Vec<u8>,
    pub mac: [u8; 32],
}

impl EncryptedEnvelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_part();
        out.extend_from_slice(&self.mac);
        out
    }

    /// Parses the layout without authenticating it. Structural problems
    /// are reported as [`CryptoError::IntegrityFailure`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < ENVELOPE_OVERHEAD + BLOCK || (bytes.len() - ENVELOPE_OVERHEAD) % BLOCK != 0
        {
            return Err(CryptoError::IntegrityFailure);
        }
        let (head, rest) = bytes.split_at(HEADER_LEN);
        let (ciphertext, mac) = rest.split_at(rest.len() - MAC_LEN);
        Ok(EncryptedEnvelope {
            version: head[0],
            timestamp: u64::from_be_bytes(head[1..9].try_into().unwrap()),
            iv: head[9..25].try_into().unwrap(),
            ciphertext: ciphertext.to_vec(),
            mac: mac.try_into().unwrap(),
        })
    }

    fn signed_part(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len() + MAC_LEN);
        out.push(self.version);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out
    }
}

fn mac_for(key: &TokenKey, data: &[u8]) -> HmacSha256 {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key.mac_key()).expect("hmac takes any key");
    mac.update(data);
    mac
}

/// Encrypts `plaintext` under `key` with a fresh random IV, stamped with `now`.
pub fn seal_token(
    key: &TokenKey,
    plaintext: &[u8],
    now: u64,
) -> Result<EncryptedEnvelope, CryptoError> {
    if plaintext.is_empty() {
        return Err(CryptoError::EmptyPlaintext);
    }
    let mut iv = [0u8; 16];
    OsRng.fill_bytes(&mut iv);
    let ciphertext = Aes128CbcEnc::new(key.cipher_key().into(), &iv.into())
        .encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mut envelope = EncryptedEnvelope {
        version: ENVELOPE_VERSION,
        timestamp: now,
        iv,
        ciphertext,
        mac: [0u8; 32],
    };
    envelope.mac = mac_for(key, &envelope.signed_part()).finalize().into_bytes().into();
    Ok(envelope)
}

/// Authenticates, checks age, then decrypts.
///
/// An envelope is accepted while `now - timestamp <= ttl`.
pub fn open_token(
    key: &TokenKey,
    envelope: &EncryptedEnvelope,
    now: u64,
    ttl: u64,
) -> Result<Vec<u8>, CryptoError> {
    if envelope.version != ENVELOPE_VERSION
        || envelope.ciphertext.is_empty()
        || envelope.ciphertext.len() % BLOCK != 0
    {
        return Err(CryptoError::IntegrityFailure);
    }
    mac_for(key, &envelope.signed_part())
        .verify_slice(&envelope.mac)
        .map_err(|_| CryptoError::IntegrityFailure)?;
    if now.saturating_sub(envelope.timestamp) > ttl {
        return Err(CryptoError::EnvelopeExpired);
    }
    Aes128CbcDec::new(key.cipher_key().into(), &envelope.iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(&envelope.ciphertext)
        .map_err(|_| CryptoError::IntegrityFailure)
}
