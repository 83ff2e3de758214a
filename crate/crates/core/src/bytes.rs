//! Little-endian reading with truncation errors that name the file.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    path: PathBuf,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &Path, data: &'a [u8]) -> Self {
        Self {
            path: path.to_path_buf(),
            data,
            pos: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                detail: format!(
                    "{what}: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.remaining()
                ),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<()> {
        let found = self.take(expected.len(), "magic").map_err(|_| Error::BadMagic {
            path: self.path.clone(),
            expected,
        })?;
        if found != expected.as_bytes() {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected,
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("format version")?;
        if found != expected {
            return Err(Error::Version {
                path: self.path.clone(),
                found,
                expected,
            });
        }
        Ok(())
    }

    /// `rank` u32 dimensions whose product fits `max_rank` and `usize`.
    pub fn dims(&mut self, max_rank: u32) -> Result<Vec<usize>> {
        let rank = self.u32("rank")?;
        if rank > max_rank {
            return Err(Error::DimOverflow {
                path: self.path.clone(),
                detail: format!("rank {rank} exceeds {max_rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.u32("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| Error::DimOverflow {
                path: self.path.clone(),
                detail: "element count overflows".into(),
            })?;
            dims.push(d);
        }
        Ok(dims)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}
