//! Append-only line journals backing server state.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub trait Journal: Send {
    /// Appends one record. `line` must not contain a newline.
    fn append(&mut self, line: &[u8]) -> io::Result<()>;

    /// Everything persisted so far, as stored.
    fn contents(&self) -> io::Result<Vec<u8>>;
}

#[derive(Debug, Default)]
pub struct MemoryJournal {
    bytes: Vec<u8>,
}

impl Journal for MemoryJournal {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        self.bytes.extend_from_slice(line);
        self.bytes.push(b'\n');
        Ok(())
    }

    fn contents(&self) -> io::Result<Vec<u8>> {
        Ok(self.bytes.clone())
    }
}

#[derive(Debug)]
pub struct FileJournal {
    path: PathBuf,
    file: File,
}

impl FileJournal {
    /// Opens (or creates) the journal and returns the records already in it.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(Self, Vec<Vec<u8>>)> {
        let path = path.as_ref().to_owned();
        let existing = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        if !existing.is_empty() && !existing.ends_with(b"\n") {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "journal ends mid-record"));
        }
        let lines = existing
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(<[u8]>::to_vec)
            .collect();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((FileJournal { path, file }, lines))
    }
}

impl Journal for FileJournal {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line);
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        self.file.sync_data()
    }

    fn contents(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.path)
    }
}
