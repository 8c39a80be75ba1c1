//! Deterministic randomness, hashing, and shared binary record I/O.
//!
//! Every stochastic choice in this crate flows through [`Rng`] seeded via
//! [`seed_from`] or [`derive_rng`]. The generator is ChaCha8 and the
//! sampling routines below are written out explicitly, so a given seed
//! produces the same stream on every platform and stays stable across
//! dependency upgrades.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// The crate-wide random generator.
pub type Rng = ChaCha8Rng;

/// Build a 32-byte ChaCha seed by hashing a numeric seed with a list of
/// context tags (purpose string, fold index, epoch, ...).
pub fn seed_from(seed: u64, tags: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update([0xff]);
        h.update(t.as_bytes());
    }
    h.finalize().into()
}

/// Construct an [`Rng`] for one purpose, keyed by `seed` and `tags`.
///
/// Distinct tag lists yield independent streams, so subsystems never race
/// for draws from a shared generator.
pub fn derive_rng(seed: u64, tags: &[&str]) -> Rng {
    Rng::from_seed(seed_from(seed, tags))
}

/// Uniform f64 in [0, 1) with 53 random bits.
pub fn uniform_f64(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in [0, n). Rejection sampling, exactly uniform.
pub fn uniform_below(rng: &mut Rng, n: u64) -> u64 {
    assert!(n > 0, "uniform_below: n must be positive");
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// Bernoulli draw with probability `p`.
pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    uniform_f64(rng) < p
}

/// Standard normal draw (Box-Muller, one value per call).
pub fn standard_normal(rng: &mut Rng) -> f64 {
    loop {
        let u1 = uniform_f64(rng);
        if u1 > 0.0 {
            let u2 = uniform_f64(rng);
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Hex SHA-256 of a byte string. Used for config hashes and fold signatures.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize named f32 matrices: magic, u32 record count, then per record a
/// u32 id length, the UTF-8 id, u32 rows, u32 columns, and the row-major
/// little-endian payload. Shared by the feature cache and embedding files.
pub(crate) fn encode_matrix_records(magic: &[u8; 8], records: &[(&str, &Array2<f32>)]) -> Vec<u8> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (id, m) in records {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for row in m.rows() {
            for &v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

pub(crate) fn write_matrix_records(
    path: &Path,
    magic: &[u8; 8],
    records: &[(&str, &Array2<f32>)],
) -> Result<()> {
    let buf = encode_matrix_records(magic, records);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_matrix_records(
    path: &Path,
    magic: &[u8; 8],
) -> Result<Vec<(String, Array2<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_matrix_records(&bytes, magic)
        .map_err(|detail| Error::format(path.display().to_string(), detail))
}

pub(crate) fn parse_matrix_records(
    bytes: &[u8],
    magic: &[u8; 8],
) -> std::result::Result<Vec<(String, Array2<f32>)>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != magic {
        return Err("bad magic for this record file".into());
    }
    let count = cur.take_u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1_048_576));
    for _ in 0..count {
        let id_len = cur.take_u32()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|e| format!("id is not UTF-8: {e}"))?
            .to_string();
        let rows = cur.take_u32()? as usize;
        let cols = cur.take_u32()? as usize;
        let payload_len = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(4))
            .ok_or("size overflow")?;
        let data: Vec<f32> = cur
            .take(payload_len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
        records.push((id, m));
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(records)
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn take_u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = derive_rng(7, &["x"]);
        let mut b = derive_rng(7, &["x"]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_tags_diverge() {
        let mut a = derive_rng(7, &["x"]);
        let mut b = derive_rng(7, &["y"]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_below_in_range() {
        let mut rng = derive_rng(1, &["ub"]);
        for n in [1u64, 2, 3, 17, 1000] {
            for _ in 0..200 {
                assert!(uniform_below(&mut rng, n) < n);
            }
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = derive_rng(3, &["sh"]);
        let mut v: Vec<u32> = (0..50).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = derive_rng(9, &["bm"]);
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
