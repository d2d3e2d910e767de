//! Small shared helpers: seed derivation and little-endian binary I/O.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// SplitMix64 output function. Used to derive independent substream seeds
/// from a master seed so that parallel work items stay decoupled.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the seed for substream `index` of a master seed. Deterministic and
/// collision-resistant enough that adjacent indices give unrelated streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x51ed_2701)))
}

// --- little-endian primitive I/O -------------------------------------------
//
// All on-disk artifacts use fixed little-endian layouts documented in
// docs/FORMATS.md. These helpers keep the read/write sites terse and make the
// byte order explicit in exactly one place.

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

/// Reads and checks a 4-byte magic tag, returning a format error naming the
/// artifact kind when it does not match.
pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], kind: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic for {kind}: expected {:?}, found {:?}",
            magic, buf
        )));
    }
    Ok(())
}

/// Reads and checks a format version written as a little-endian u32.
pub fn expect_version<R: Read>(r: &mut R, supported: u32, kind: &str) -> Result<()> {
    let v = read_u32(r)?;
    if v != supported {
        return Err(Error::Format(format!(
            "unsupported {kind} version {v} (supported: {supported})"
        )));
    }
    Ok(())
}
