//! The `LFV1` binary volume format.
//!
//! Layout: magic bytes `LFV1`; five little-endian u32 values (version = 1,
//! C, H, W, D); two little-endian f64 values (value range low, high); then
//! C*H*W*D little-endian f32 intensities in row-major (c, h, w, d) order.
//! Intensities are stored at f32 precision; reading widens back to f64.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{ValueRange, Volume};

pub const MAGIC: &[u8; 4] = b"LFV1";
pub const VERSION: u32 = 1;

/// Upper bound on voxel count per file, to reject corrupt headers before
/// allocating.
const MAX_VOXELS: u64 = 1 << 31;

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + v.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    for x in [
        VERSION,
        v.channels() as u32,
        v.height() as u32,
        v.width() as u32,
        v.depth() as u32,
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&v.value_range().lo.to_le_bytes());
    buf.extend_from_slice(&v.value_range().hi.to_le_bytes());
    for &x in v.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let display = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let display = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(&display, e))?;
    decode(&bytes, &display)
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Volume> {
    let need_header = 4 + 5 * 4 + 2 * 8;
    if bytes.len() < need_header {
        return Err(Error::Truncated {
            path: origin.to_string(),
            what: "LFV1 header",
            needed: need_header,
            had: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_string(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let u32_at = |i: usize| {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[i..i + 4]);
        u32::from_le_bytes(b)
    };
    let f64_at = |i: usize| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[i..i + 8]);
        f64::from_le_bytes(b)
    };
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::BadVersion {
            path: origin.to_string(),
            what: "LFV1",
            found: version,
            expected: VERSION,
        });
    }
    let c = u32_at(8) as u64;
    let h = u32_at(12) as u64;
    let w = u32_at(16) as u64;
    let d = u32_at(20) as u64;
    let count = c * h * w * d;
    if count == 0 || count > MAX_VOXELS {
        return Err(Error::shape(
            "lfv_read",
            format!("implausible dimensions {c}x{h}x{w}x{d} in {origin}"),
        ));
    }
    let lo = f64_at(24);
    let hi = f64_at(32);
    let need = need_header + count as usize * 4;
    if bytes.len() != need {
        return Err(Error::Truncated {
            path: origin.to_string(),
            what: "LFV1 payload",
            needed: need,
            had: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(count as usize);
    let mut i = need_header;
    while i < need {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[i..i + 4]);
        data.push(f32::from_le_bytes(b) as f64);
        i += 4;
    }
    Volume::new(
        c as usize,
        h as usize,
        w as usize,
        d as usize,
        data,
        ValueRange::new(lo, hi)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn random_volume(seed: u64) -> Volume {
        let mut s = Stream::new(seed);
        let data: Vec<f64> = (0..2 * 3 * 4 * 5)
            // Dyadic values are exactly representable in f32, so the
            // roundtrip through the file is exact.
            .map(|_| (s.below(2049) as f64 - 1024.0) / 1024.0)
            .collect();
        Volume::new(2, 3, 4, 5, data, ValueRange::UNIT).unwrap()
    }

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.lfv");
        let v = random_volume(9);
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.channels(), 2);
        assert_eq!(back.value_range(), v.value_range());
    }

    #[test]
    fn writes_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.lfv");
        let b = dir.path().join("b.lfv");
        let v = random_volume(10);
        write_volume(&a, &v).unwrap();
        write_volume(&b, &v).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let v = random_volume(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.lfv");
        write_volume(&path, &v).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, "test"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let v = random_volume(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.lfv");
        write_volume(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], "test"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let v = random_volume(13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.lfv");
        write_volume(&path, &v).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes, "test"),
            Err(Error::BadVersion { .. })
        ));
    }
}
