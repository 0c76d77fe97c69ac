//! Named-tensor archive.
//!
//! Layout, all integers little-endian: `b"SAVG"`, `u32` version, `u64` record
//! count, then per record `u64` name length, UTF-8 name, `u64` rank, `rank`
//! × `u64` dims, and `prod(dims)` × `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SAVG";
pub const VERSION: u32 = 1;

const MAX_RANK: u64 = 8;

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = records.iter().map(|(n, t)| 16 + n.len() + 8 * (t.rank() + t.len())).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NnError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64("record count")?;
    // Each record needs at least 16 header bytes.
    if count > (r.remaining() / 16) as u64 {
        return Err(NnError::Format(format!("record count {count} exceeds file size")));
    }
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let n = r.u64("name length")?;
        if n > r.remaining() as u64 {
            return Err(NnError::Format(format!("record {i}: name length {n} exceeds file size")));
        }
        let name = std::str::from_utf8(r.take(n as usize, "name")?)
            .map_err(|_| NnError::Format(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u64("rank")?;
        if rank > MAX_RANK {
            return Err(NnError::Format(format!("record {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u64("dimension")?);
        }
        let elems = if shape.contains(&0) {
            Some(0)
        } else {
            shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
        };
        let elems = elems
            .filter(|&e| e <= (r.remaining() / 8) as u64)
            .ok_or_else(|| NnError::Format(format!("record {name}: dimensions exceed file size")))?;
        let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
        let raw = r.take(elems as usize * 8, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| NnError::Format(format!("record {name}: {e}")))?;
        out.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(NnError::Format(format!("{} trailing bytes after last record", r.remaining())));
    }
    Ok(out)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(records))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    save(path, &store.named_tensors())
}

/// Overwrites every parameter of `store` from the file; names must match exactly.
pub fn load_store(path: &Path, store: &mut ParamStore) -> Result<()> {
    let recs = load(path)?;
    store.load_named(&recs, true)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = vec![
            ("a.w".to_string(), Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 0.1]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(std::f64::consts::PI)),
            ("empty".to_string(), Tensor::new(&[0, 4], vec![]).unwrap()),
        ];
        let back = decode(&encode(&recs)).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in recs.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[("x".into(), Tensor::from_vec(vec![2.0]))]);
        assert_eq!(&bytes[..4], b"SAVG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
        assert_eq!(bytes[24], b'x');
        assert_eq!(bytes.len(), 16 + 8 + 1 + 8 + 8 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let good = encode(&[("w".into(), Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        let mut extra = good;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_archives_round_trip(
            recs in prop::collection::vec(
                ("[a-z.]{0,12}", prop::collection::vec(0usize..4, 0..4)),
                0..5,
            ),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let records: Vec<(String, Tensor)> = recs.into_iter().map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(state >> 2)
                }).map(|v| if v.is_finite() { v } else { 0.0 }).collect();
                (name, Tensor::new(&shape, data).unwrap())
            }).collect();
            let back = decode(&encode(&records)).unwrap();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            let _ = decode(&bytes);
        }
    }
}
