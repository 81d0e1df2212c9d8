//! Little-endian binary helpers shared by the file formats.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&(v as f32).to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
    Ok(buf)
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_array::<1>(r)?[0])
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_f32(r: &mut impl Read) -> Result<f64> {
    Ok(f32::from_le_bytes(read_array(r)?) as f64)
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let got: [u8; 4] = read_array(r)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    Ok(())
}

pub(crate) fn expect_version(r: &mut impl Read, what: &str) -> Result<()> {
    let v = read_u32(r)?;
    if v != 1 {
        return Err(Error::Format(format!("unsupported {what} version {v}")));
    }
    Ok(())
}

/// Guards allocation sizes read from untrusted headers.
pub(crate) fn checked_len(parts: &[u32], limit: usize) -> Result<usize> {
    let mut n: usize = 1;
    for &p in parts {
        n = n
            .checked_mul(p as usize)
            .filter(|n| *n <= limit)
            .ok_or_else(|| Error::Format(format!("header dimensions {parts:?} too large")))?;
    }
    Ok(n)
}
