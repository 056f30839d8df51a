//! Little-endian primitives shared by the binary file formats.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&(v as f32).to_le_bytes())
}

pub(crate) fn read_f32(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads `magic.len()` bytes and checks them.
pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8]) -> io::Result<bool> {
    let mut b = vec![0u8; magic.len()];
    r.read_exact(&mut b)?;
    Ok(b == magic)
}

pub(crate) fn count(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("{what} {n} exceeds u32")))
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

/// Attaches a path to errors from an in-memory reader/writer.
pub(crate) fn at_path(err: Error, kind: &'static str, path: &Path) -> Error {
    match err {
        Error::Format { reason, .. } => Error::Format {
            kind,
            path: path.to_path_buf(),
            reason,
        },
        Error::Io { source, .. } => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    }
}

/// Format error without a path yet; [`at_path`] fills it in.
pub(crate) fn malformed(kind: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: Default::default(),
        reason: reason.into(),
    }
}

/// Maps a read failure: truncation becomes a format error.
pub(crate) fn read_err(kind: &'static str) -> impl Fn(io::Error) -> Error {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            malformed(kind, "unexpected end of file")
        } else {
            Error::Io {
                path: Default::default(),
                source: e,
            }
        }
    }
}
