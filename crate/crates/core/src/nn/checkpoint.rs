//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SGCKPT"
//! version  u16
//! header   u32 length + UTF-8 JSON model config
//! count    u32
//! entries  count × { u16 name length, name, u8 ndim, ndim × u32 dims, f32 payload }
//! ```

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 6] = b"SGCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{0}` has a different shape in the checkpoint")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub entries: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(header: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Invalid(e.to_string()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = r.u32()? as usize;
    let header = r.string(hlen)?;
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = r.string(nlen)?;
        let ndim = r.take(1)?[0] as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(CheckpointError::Invalid(format!("{name}: {ndim}-d tensors unsupported"))),
        };
        let n = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Invalid(format!("{name}: non-finite value")));
        }
        entries.push((name, Tensor { rows, cols, data }));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid("trailing bytes".into()));
    }
    Ok(Checkpoint { header, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(2, 2, vec![0.5, -1.25, 3.0, 0.1]));
        s.add("b", Tensor::zeros(1, 3));
        let bytes = save_checkpoint("{\"d\":4}", &s);
        let ck = load_checkpoint(&bytes).unwrap();
        assert_eq!(ck.header, "{\"d\":4}");
        assert_eq!(ck.entries[0].1.data[3], 0.1f32 as f64);
        let mut s2 = s.clone();
        s2.load_entries(&ck.entries).unwrap();
        assert_eq!(save_checkpoint("{\"d\":4}", &s2), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(2, 2));
        let bytes = save_checkpoint("{}", &s);
        assert!(matches!(load_checkpoint(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        let mut v = bytes.clone();
        v[6] = 9;
        assert!(matches!(load_checkpoint(&v), Err(CheckpointError::Version(9))));
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(3, 2));
        let ck = load_checkpoint(&bytes).unwrap();
        assert!(matches!(other.load_entries(&ck.entries), Err(CheckpointError::ShapeMismatch(_))));
    }
}
