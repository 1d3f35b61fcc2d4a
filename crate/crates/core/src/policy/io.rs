//! Binary weights container.
//!
//! Layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `IGARMVLA` |
//! | 4     | format version (u32, currently 1) |
//! | 28    | layers, heads, d, vocab, actions, max_seq, bos_as_text (u32 each) |
//! | 8     | parameter count (u64) |
//! | 8·n   | parameters as f64 in [`PolicySpec::params`] order |

use std::path::Path;

use super::model::{Arch, PolicySpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IGARMVLA";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(spec: &PolicySpec) -> Vec<u8> {
    let a = &spec.arch;
    let mut out = Vec::with_capacity(48 + 8 * spec.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [a.layers, a.heads, a.d, a.vocab, a.actions, a.max_seq, a.bos_as_text as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.num_params() as u64).to_le_bytes());
    for p in spec.params() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicySpec> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut h = [0usize; 7];
    for v in &mut h {
        *v = r.u32()? as usize;
    }
    let arch = Arch {
        layers: h[0],
        heads: h[1],
        d: h[2],
        vocab: h[3],
        actions: h[4],
        max_seq: h[5],
        bos_as_text: match h[6] {
            0 => false,
            1 => true,
            x => return Err(Error::Format(format!("bad bos flag {x}"))),
        },
    };
    let mut spec = PolicySpec::zeros(arch).map_err(|e| Error::Format(e.to_string()))?;
    let count = r.u64()?;
    if count != spec.num_params() as u64 {
        return Err(Error::Format(format!("header implies {} parameters, file says {count}", spec.num_params())));
    }
    for p in spec.params_mut() {
        for v in p.iter_mut() {
            *v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::Format("non-finite parameter".into()));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(spec)
}

pub fn save(spec: &PolicySpec, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(spec)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<PolicySpec> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn arch() -> Arch {
        Arch { layers: 2, heads: 2, d: 4, vocab: 5, actions: 3, max_seq: 6, bos_as_text: true }
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = PolicySpec::random(arch(), &mut Rng::new(1)).unwrap();
        let bytes = to_bytes(&spec);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 28 + 8 + 8 * spec.num_params());
        assert_eq!(from_bytes(&bytes).unwrap(), spec);
    }

    #[test]
    fn rejects_corruption() {
        let spec = PolicySpec::random(arch(), &mut Rng::new(1)).unwrap();
        let bytes = to_bytes(&spec);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format(_))));
    }
}
