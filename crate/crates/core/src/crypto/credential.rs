use std::fmt;

use rand::rngs::OsRng;
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::pss::{BlindedSigningKey, Signature, VerifyingKey};
use rsa::signature::{RandomizedSigner, SignatureEncoding, Verifier};
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::{Challenge, CryptoError};

pub const CREDENTIAL_KEY_BITS: usize = 2048;

/// An RSA-2048 credential key pair.
///
/// The private half has no public accessor. It is only usable through
/// [`sign_challenge`]; serialization for sealed storage is crate-private.
pub struct CredentialKeyPair {
    private: RsaPrivateKey,
    public: CredentialPublicKey,
}

/// The exportable half of a credential, carried on the wire as SPKI DER.
#[derive(Clone, PartialEq, Eq)]
pub struct CredentialPublicKey {
    key: RsaPublicKey,
    der: Vec<u8>,
}

impl CredentialKeyPair {
    pub fn generate() -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::new(&mut OsRng, CREDENTIAL_KEY_BITS)
            .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
        Self::from_private(private)
    }

    fn from_private(private: RsaPrivateKey) -> Result<Self, CryptoError> {
        let public = CredentialPublicKey::from_key(private.to_public_key())?;
        Ok(CredentialKeyPair { private, public })
    }

    pub fn public_key(&self) -> &CredentialPublicKey {
        &self.public
    }

    pub fn modulus_bits(&self) -> usize {
        self.public.modulus_bits()
    }

    pub(crate) fn to_pkcs8_der(&self) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
        let doc = self.private.to_pkcs8_der().map_err(|_| CryptoError::MalformedKey)?;
        Ok(Zeroizing::new(doc.as_bytes().to_vec()))
    }

    pub(crate) fn from_pkcs8_der(der: &[u8]) -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::from_pkcs8_der(der).map_err(|_| CryptoError::MalformedKey)?;
        Self::from_private(private)
    }
}

impl fmt::Debug for CredentialKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CredentialKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl CredentialPublicKey {
    fn from_key(key: RsaPublicKey) -> Result<Self, CryptoError> {
        let der = key
            .to_public_key_der()
            .map_err(|_| CryptoError::MalformedKey)?
            .as_bytes()
            .to_vec();
        Ok(CredentialPublicKey { key, der })
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        let key = RsaPublicKey::from_public_key_der(der).map_err(|_| CryptoError::MalformedKey)?;
        Self::from_key(key)
    }

    pub fn to_der(&self) -> &[u8] {
        &self.der
    }

    pub fn modulus_bits(&self) -> usize {
        self.key.n().bits()
    }
}

impl fmt::Debug for CredentialPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digest = <Sha256 as sha2::Digest>::digest(&self.der);
        write!(f, "CredentialPublicKey(sha256:{})", crate::b64::encode(&digest[..8]))
    }
}

pub fn generate_credential_keypair() -> Result<CredentialKeyPair, CryptoError> {
    CredentialKeyPair::generate()
}

/// RSA-PSS/SHA-256 over the raw challenge octets. Signatures are randomized.
pub fn sign_challenge(
    keypair: &CredentialKeyPair,
    challenge: &Challenge,
) -> Result<Vec<u8>, CryptoError> {
    let signer = BlindedSigningKey::<Sha256>::new(keypair.private.clone());
    let signature = signer
        .try_sign_with_rng(&mut OsRng, challenge.as_bytes())
        .map_err(|_| CryptoError::MalformedKey)?;
    Ok(signature.to_vec())
}

/// Never fails: anything that is not a valid signature yields `false`.
pub fn verify_signature(public: &CredentialPublicKey, challenge: &[u8], signature: &[u8]) -> bool {
    if challenge.len() != Challenge::LEN || signature.len() != public.key.size() {
        return false;
    }
    let Ok(signature) = Signature::try_from(signature) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(public.key.clone())
        .verify(challenge, &signature)
        .is_ok()
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;

    fn pair() -> &'static CredentialKeyPair {
        static PAIR: OnceLock<CredentialKeyPair> = OnceLock::new();
        PAIR.get_or_init(|| generate_credential_keypair().unwrap())
    }

    fn other_pair() -> &'static CredentialKeyPair {
        static PAIR: OnceLock<CredentialKeyPair> = OnceLock::new();
        PAIR.get_or_init(|| generate_credential_keypair().unwrap())
    }

    #[test]
    fn modulus_is_2048_bits() {
        assert_eq!(pair().modulus_bits(), 2048);
        assert_eq!(pair().public_key().modulus_bits(), 2048);
    }

    #[test]
    fn sign_verify_round_trip() {
        let c = Challenge::generate();
        let sig = sign_challenge(pair(), &c).unwrap();
        assert!(verify_signature(pair().public_key(), c.as_bytes(), &sig));
    }

    #[test]
    fn signatures_are_randomized_and_both_verify() {
        let c = Challenge::generate();
        let a = sign_challenge(pair(), &c).unwrap();
        let b = sign_challenge(pair(), &c).unwrap();
        assert_ne!(a, b);
        assert!(verify_signature(pair().public_key(), c.as_bytes(), &a));
        assert!(verify_signature(pair().public_key(), c.as_bytes(), &b));
    }

    #[test]
    fn wrong_key_or_wrong_challenge_fails() {
        let c1 = Challenge::generate();
        let c2 = Challenge::generate();
        let sig = sign_challenge(pair(), &c1).unwrap();
        assert!(!verify_signature(other_pair().public_key(), c1.as_bytes(), &sig));
        assert!(!verify_signature(pair().public_key(), c2.as_bytes(), &sig));
    }

    #[test]
    fn malformed_signatures_return_false() {
        let c = Challenge::generate();
        let mut sig = sign_challenge(pair(), &c).unwrap();
        assert!(!verify_signature(pair().public_key(), c.as_bytes(), &[]));
        assert!(!verify_signature(pair().public_key(), c.as_bytes(), &sig[..100]));
        assert!(!verify_signature(pair().public_key(), c.as_bytes(), &[0xff; 256]));
        assert!(!verify_signature(pair().public_key(), &c.as_bytes()[..8], &sig));
        sig[17] ^= 0x01;
        assert!(!verify_signature(pair().public_key(), c.as_bytes(), &sig));
    }

    #[test]
    fn public_der_round_trip() {
        let der = pair().public_key().to_der().to_vec();
        let back = CredentialPublicKey::from_der(&der).unwrap();
        assert_eq!(&back, pair().public_key());
        assert_eq!(CredentialPublicKey::from_der(&der[1..]), Err(CryptoError::MalformedKey));
    }

    #[test]
    fn private_der_round_trip_keeps_signing_key() {
        let der = pair().to_pkcs8_der().unwrap();
        let back = CredentialKeyPair::from_pkcs8_der(&der).unwrap();
        let c = Challenge::generate();
        let sig = sign_challenge(&back, &c).unwrap();
        assert!(verify_signature(pair().public_key(), c.as_bytes(), &sig));
    }

    #[test]
    fn debug_output_hides_private_material() {
        let dbg = format!("{:?}", pair());
        assert!(dbg.starts_with("CredentialKeyPair"));
        assert!(!dbg.contains("private"));
    }
}
