//! The `BMDC` binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BMDC" | u32 version
//! u64 len | config TOML
//! u32 n | n x (str key, str value)                      metadata
//! u32 n | n x (str name, u64 seed, u64 stream, u128 word_pos)  RNG streams
//! u32 n | n x (str name, u32 ndim, ndim x u64, prod x f64)     tensors
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Entries keep insertion
//! order, so encoding a decoded checkpoint reproduces the input bytes.

use std::path::Path;

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"BMDC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Position of a ChaCha stream: key seed, stream id and word offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamState {
    pub name: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub meta: Vec<(String, String)>,
    pub streams: Vec<StreamState>,
    pub tensors: Vec<Tensor>,
}

fn err(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str, CliError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| err(format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| err(format!("metadata {key:?} has invalid value {v:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CliError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| err(format!("missing tensor {name:?}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.streams.len());
        for s in &self.streams {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&s.seed.to_le_bytes());
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("not a BMDC checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!(
                "checkpoint format version {version}, this build reads {VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let config = r.string(len)?;
        let mut ck = Self::new(config);
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            ck.streams.push(StreamState {
                name: r.str()?,
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
            });
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| err(format!("tensor {name:?} overruns the file")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.push(Tensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(err("trailing bytes after the tensor table"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("checkpoint tables fit in u32");
    out.extend_from_slice(&n.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if n > self.remaining() {
            return Err(err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String, CliError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("invalid UTF-8 string"))
    }

    fn str(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        self.string(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("seed = 3\n".into());
        ck.set_meta("epoch", 12);
        ck.streams.push(StreamState {
            name: "rollout".into(),
            seed: 3,
            stream: u64::MAX - 1,
            word_pos: 1 << 70,
        });
        ck.push("a", vec![2, 3], vec![0.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]);
        ck.push("empty", vec![0], vec![]);
        ck
    }

    #[test]
    fn decode_encode_is_identity() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_other_versions_and_magic() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let e = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(e.to_string().contains("version 2"));
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
