//! Emulated sealed storage: a file encrypted under a random 32-octet key
//! kept in a sibling `.key` file readable only by the owner.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::clock::{Clock, SystemClock};
use crate::crypto::{open_token, seal_token, EncryptedEnvelope, TokenKey};

#[derive(Debug, thiserror::Error)]
pub enum SealedError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt")]
    Corrupt,
}

#[derive(Debug, Clone)]
pub struct SealedFile {
    path: PathBuf,
    magic: &'static [u8],
}

pub fn key_path_for(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".key");
    PathBuf::from(name)
}

/// Writes through a temporary file and renames over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = create_private(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn create_private(path: &Path) -> io::Result<fs::File> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)
}

impl SealedFile {
    pub fn new(path: impl Into<PathBuf>, magic: &'static [u8]) -> Self {
        SealedFile { path: path.into(), magic }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn key_path(&self) -> PathBuf {
        key_path_for(&self.path)
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    fn load_key(&self) -> Result<Option<TokenKey>, SealedError> {
        match fs::read(self.key_path()) {
            Ok(bytes) => {
                let arr: [u8; 32] = bytes.try_into().map_err(|_| SealedError::Corrupt)?;
                Ok(Some(TokenKey::from_bytes(arr)))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn key_or_create(&self) -> Result<TokenKey, SealedError> {
        if let Some(k) = self.load_key()? {
            return Ok(k);
        }
        let key = TokenKey::generate();
        atomic_write(&self.key_path(), key.as_bytes())?;
        Ok(key)
    }

    /// `Ok(None)` when nothing has been stored yet.
    pub fn load(&self) -> Result<Option<Vec<u8>>, SealedError> {
        let bytes = match fs::read(&self.path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let key = self.load_key()?.ok_or(SealedError::Corrupt)?;
        let body = bytes.strip_prefix(self.magic).ok_or(SealedError::Corrupt)?;
        Ok(Some(open_blob(&key, body)?))
    }

    pub fn store(&self, plaintext: &[u8]) -> Result<(), SealedError> {
        let key = self.key_or_create()?;
        let mut out = self.magic.to_vec();
        out.extend_from_slice(&seal_blob(&key, plaintext));
        atomic_write(&self.path, &out)?;
        Ok(())
    }

    pub fn remove(&self) -> io::Result<()> {
        for p in [self.path.clone(), self.key_path()] {
            match fs::remove_file(&p) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                _ => {}
            }
        }
        Ok(())
    }
}

pub(crate) fn seal_blob(key: &TokenKey, plaintext: &[u8]) -> Vec<u8> {
    // A zero-length plaintext still gets one block of padding.
    let mut framed = Vec::with_capacity(plaintext.len() + 1);
    framed.push(0u8);
    framed.extend_from_slice(plaintext);
    seal_token(key, &framed, SystemClock.now_secs())
        .expect("framed plaintext is never empty")
        .to_bytes()
}

pub(crate) fn open_blob(key: &TokenKey, bytes: &[u8]) -> Result<Vec<u8>, SealedError> {
    let env = EncryptedEnvelope::from_bytes(bytes).map_err(|_| SealedError::Corrupt)?;
    let mut framed = open_token(key, &env, env.timestamp, u64::MAX).map_err(|_| SealedError::Corrupt)?;
    if framed.first() != Some(&0) {
        return Err(SealedError::Corrupt);
    }
    framed.remove(0);
    Ok(framed)
}
