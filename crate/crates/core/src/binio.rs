//! Little-endian readers and writers shared by the on-disk formats.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Errors with the byte count the file would need to satisfy this read.
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `n` values stored with dtype tag `dtype`, converted to `T`.
    pub(crate) fn reals<T: Real>(&mut self, dtype: u8, n: usize) -> Result<Vec<T>> {
        match dtype {
            1 => Ok(self
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect()),
            2 => Ok(self
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect()),
            other => Err(Error::format(&self.path, format!("unknown dtype tag {other}"))),
        }
    }
}

/// Appends values in `T`'s own width.
pub(crate) fn put_reals<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    match T::DTYPE {
        1 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes())),
        _ => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_f64().unwrap().to_le_bytes())),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
