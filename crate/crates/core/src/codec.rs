//! Little-endian helpers shared by the versioned binary formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// `read_exact` reporting a short read as a truncated record.
fn fill(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => truncated(),
        _ => e.into(),
    })
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated() -> Error {
    Error::Format {
        what: "binary record",
        msg: "truncated".into(),
    }
}

/// Reads `n` bytes; memory grows with the bytes actually present, so a
/// corrupt length cannot trigger a huge allocation.
pub(crate) fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(truncated());
    }
    Ok(buf)
}

pub(crate) fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let buf = get_bytes(r, n.checked_mul(8).ok_or_else(truncated)?)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 8], what: &'static str) -> Result<()> {
    let mut b = [0u8; 8];
    fill(r, &mut b)?;
    if &b != magic {
        return Err(Error::Format {
            what,
            msg: format!("bad magic {:?}", String::from_utf8_lossy(&b)),
        });
    }
    Ok(())
}

pub(crate) fn expect_version(r: &mut impl Read, version: u32, what: &'static str) -> Result<()> {
    let v = get_u32(r)?;
    if v != version {
        return Err(Error::Format {
            what,
            msg: format!("unsupported version {v}"),
        });
    }
    Ok(())
}

/// Errors if the reader has bytes left after a complete record.
pub(crate) fn expect_eof(r: &mut impl Read, what: &'static str) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(Error::Format {
            what,
            msg: "trailing bytes".into(),
        });
    }
    Ok(())
}
