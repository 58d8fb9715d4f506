//! PSF1 patch-feature file format.
//!
//! Layout, all little-endian:
//!   bytes 0..4   magic "PSF1"
//!   bytes 4..8   u32 n (patch count)
//!   bytes 8..12  u32 d (feature width)
//!   bytes 12..16 u32 flags (bit 0 = coords present, must be 1)
//!   then n*d f32 features row-major, then n*2 f32 coords row-major.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSF1";
const FLAG_COORDS: u32 = 1;

/// Reads a PSF1 file into (n, d, features, coords). Feature values are
/// widened to f64; the widening is exact, so write-then-read round trips
/// byte-identically.
pub fn read_patch_features(path: &Path) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if bytes.len() < 16 {
        return Err(Error::format(p, format!("header needs 16 bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            p,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        ));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if flags & FLAG_COORDS == 0 {
        return Err(Error::format(p, "coords flag (bit 0) must be set"));
    }
    if n == 0 || d == 0 {
        return Err(Error::format(p, format!("n and d must be >= 1, got n={n}, d={d}")));
    }
    let floats = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(n * 2))
        .ok_or_else(|| Error::format(p.clone(), "n*d overflows"))?;
    let expected = 16 + floats * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            p,
            format!(
                "payload length mismatch: n={n}, d={d} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(floats);
    for chunk in bytes[16..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if v.is_nan() {
            return Err(Error::format(p.clone(), "NaN in payload"));
        }
        values.push(v as f64);
    }
    let coords = values.split_off(n * d);
    Ok((n, d, values, coords))
}

/// Writes a PSF1 file. Values are narrowed to f32 on disk.
pub fn write_patch_features(
    path: &Path,
    n: usize,
    d: usize,
    features: &[f64],
    coords: &[f64],
) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::Contract(format!(
            "cannot write empty bag (n={n}, d={d})"
        )));
    }
    if features.len() != n * d || coords.len() != n * 2 {
        return Err(Error::Contract(format!(
            "PSF1 shape mismatch: n={n}, d={d}, {} features, {} coords",
            features.len(),
            coords.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + (features.len() + coords.len()) * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&FLAG_COORDS.to_le_bytes());
    for v in features.iter().chain(coords) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bag.psf");
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        // draw as f32 so the in-memory f64 values are exactly representable
        let features: Vec<f64> = (0..80).map(|_| rng.gen::<f32>() as f64).collect();
        let coords: Vec<f64> = (0..20).map(|_| rng.gen::<f32>() as f64 * 100.0).collect();
        write_patch_features(&p, 10, 8, &features, &coords).unwrap();
        let bytes1 = std::fs::read(&p).unwrap();

        let (n, d, f2, c2) = read_patch_features(&p).unwrap();
        assert_eq!((n, d), (10, 8));
        let p2 = dir.path().join("bag2.psf");
        write_patch_features(&p2, n, d, &f2, &c2).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(features, f2);
    }

    #[test]
    fn one_by_one_bag_is_28_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.psf");
        write_patch_features(&p, 1, 1, &[0.5], &[3.0, 4.0]).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 28);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.psf");
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&p, bytes).unwrap();
        let err = read_patch_features(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn rejects_wrong_payload_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.psf");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        // declared n=5, d=4 needs 5*4 + 5*2 = 30 floats; provide 70
        bytes.extend(std::iter::repeat_n(0u8, 70 * 4));
        std::fs::write(&p, bytes).unwrap();
        let err = read_patch_features(&p).unwrap_err().to_string();
        assert!(err.contains("length"), "{err}");
    }

    #[test]
    fn rejects_nan_payload_and_empty_bag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.psf");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(read_patch_features(&p).is_err());

        assert!(write_patch_features(&dir.path().join("e.psf"), 0, 4, &[], &[]).is_err());
    }
}
