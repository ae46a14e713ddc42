use std::fmt;

use rand::rngs::OsRng;
use rand::RngCore;

use super::CryptoError;

/// A 16-octet challenge for one challenge-response exchange.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Challenge([u8; Challenge::LEN]);

impl Challenge {
    pub const LEN: usize = 16;

    /// Draws a fresh challenge from the operating system CSPRNG.
    ///
    /// There is no seeded variant. If the OS entropy source fails this panics.
    pub fn generate() -> Self {
        let mut bytes = [0u8; Self::LEN];
        OsRng.fill_bytes(&mut bytes);
        Challenge(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; Self::LEN] = bytes.try_into().map_err(|_| CryptoError::InvalidLength {
            expected: Self::LEN,
            actual: bytes.len(),
        })?;
        Ok(Challenge(arr))
    }

    pub fn as_bytes(&self) -> &[u8; Self::LEN] {
        &self.0
    }
}

impl fmt::Debug for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Challenge({})", crate::b64::encode(self.0))
    }
}

pub fn generate_challenge() -> Challenge {
    Challenge::generate()
}
