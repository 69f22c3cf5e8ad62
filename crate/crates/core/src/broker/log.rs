//! Append-only topic log file: a sequence of `[u32 big-endian length][payload]`
//! records. Offsets are implicit in record order.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("corrupt log frame at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parses a whole log image. Every frame must be complete.
pub fn parse_log(bytes: &[u8]) -> Result<Vec<Vec<u8>>, LogError> {
    let (records, consumed) = parse_prefix(bytes);
    if consumed != bytes.len() {
        return Err(LogError::Corrupt {
            offset: consumed as u64,
            reason: format!("truncated frame ({} trailing bytes)", bytes.len() - consumed),
        });
    }
    Ok(records)
}

/// Reads a log file strictly, failing on any torn or corrupt frame.
pub fn read_log_file(path: &Path) -> Result<Vec<Vec<u8>>, LogError> {
    parse_log(&std::fs::read(path)?)
}

/// Longest run of complete frames, and the byte length it spans.
fn parse_prefix(bytes: &[u8]) -> (Vec<Vec<u8>>, usize) {
    let mut records = Vec::new();
    let mut pos = 0;
    while let Some(prefix) = bytes.get(pos..pos + 4) {
        let len = u32::from_be_bytes(prefix.try_into().expect("4-byte slice")) as usize;
        match bytes.get(pos + 4..pos + 4 + len) {
            Some(payload) => {
                records.push(payload.to_vec());
                pos += 4 + len;
            }
            None => break,
        }
    }
    (records, pos)
}

/// Writer side of one topic's log.
#[derive(Debug)]
pub struct LogFile {
    path: PathBuf,
    file: File,
    len: u64,
}

impl LogFile {
    /// Opens (creating if needed) and replays the log. A torn final frame is
    /// cut off; it cannot have been acknowledged because appends sync first.
    pub fn open(path: &Path) -> Result<(Self, Vec<Vec<u8>>), LogError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, consumed) = parse_prefix(&bytes);
        if consumed != bytes.len() {
            tracing::warn!(
                "{}: dropping {} bytes of torn tail at byte {consumed}",
                path.display(),
                bytes.len() - consumed
            );
            file.set_len(consumed as u64)?;
            file.sync_all()?;
        }
        Ok((LogFile { path: path.to_path_buf(), file, len: consumed as u64 }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and syncs it. On failure the file is cut back to its
    /// previous length so the log is unchanged.
    pub fn append(&mut self, payload: &[u8]) -> Result<(), LogError> {
        let len = u32::try_from(payload.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "payload exceeds 4 GiB"))?;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&len.to_be_bytes());
        frame.extend_from_slice(payload);
        let written = self.file.write_all(&frame).and_then(|()| self.file.sync_data());
        if let Err(e) = written {
            let _ = self.file.set_len(self.len);
            let _ = self.file.seek(SeekFrom::End(0));
            return Err(e.into());
        }
        self.len += frame.len() as u64;
        Ok(())
    }
}
