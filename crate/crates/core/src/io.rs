//! Little-endian binary format helpers shared by the asset files.

use crate::error::{CoreError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::format(path.display().to_string(), "file too short for magic"))?;
    if &buf != magic {
        return Err(CoreError::format(
            path.display().to_string(),
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    Ok(())
}

pub fn check_version<R: Read>(
    r: &mut R,
    kind: &'static str,
    supported: u16,
    path: &Path,
) -> Result<()> {
    let got = r
        .read_u16::<LittleEndian>()
        .map_err(|_| CoreError::format(path.display().to_string(), "file too short for version"))?;
    if got != supported {
        return Err(CoreError::UnsupportedVersion {
            kind,
            got,
            supported,
        });
    }
    Ok(())
}

pub fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_f64_vec<R: Read>(r: &mut R, len: usize, path: &Path) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut out)
        .map_err(|_| CoreError::format(path.display().to_string(), "truncated f64 payload"))?;
    Ok(out)
}

pub fn write_f32_slice<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_f32_vec<R: Read>(r: &mut R, len: usize, path: &Path) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; len];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|_| CoreError::format(path.display().to_string(), "truncated f32 payload"))?;
    Ok(out)
}

/// First 8 bytes of the SHA-256 of a byte stream, as the content hash
/// carried in asset headers and manifests.
pub fn content_hash_bytes(data: &[u8]) -> u64 {
    let digest = Sha256::digest(data);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn file_content_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    Ok(content_hash_bytes(&bytes))
}
