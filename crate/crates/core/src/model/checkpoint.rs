//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SLUCKPT\0" | u32 version | 64 hex bytes config digest
//! u32 config length | config JSON
//! u32 tensor count  | per tensor: u32 name length, name, u32 rows, u32 cols, f32 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{quantize, ModelConfig, ModelError, ModelParameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLUCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("config digest mismatch: stored {stored}, computed {computed}")]
    Corrupt { stored: String, computed: String },
    #[error("checkpoint config {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn to_bytes(params: &ModelParameters) -> Vec<u8> {
    let config = serde_json::to_vec(&params.config).expect("config serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(params.config.digest().as_bytes());
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    put_u32(&mut out, params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows());
        put_u32(&mut out, t.cols());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Malformed(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint. With `expected`, the stored config must equal it.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParameters, CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let stored = String::from_utf8_lossy(c.take(64, "digest")?).into_owned();
    let len = c.u32("config length")?;
    let json = c.take(len, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let computed = config.digest();
    if computed != stored {
        return Err(CheckpointError::Corrupt { stored, computed });
    }
    if let Some(exp) = expected {
        if exp != &config {
            return Err(CheckpointError::ConfigMismatch {
                expected: exp.digest(),
                found: computed,
            });
        }
    }
    let count = c.u32("tensor count")?;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32("rows")?;
        let cols = c.u32("cols")?;
        let cells = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} too large")))?;
        let raw = c.take(cells, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::Malformed(format!("tensor {name} has non-finite values")));
        }
        named.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(ModelParameters::from_named(&config, named)?)
}

pub fn save(params: &ModelParameters, path: &Path) -> Result<(), CheckpointError> {
    debug_assert!(params.tensors().iter().all(|t| t.data().iter().all(|&v| v == quantize(v))));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParameters, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Grammar;

    fn params() -> ModelParameters {
        let g = Grammar::default_grammar().compile().unwrap();
        let mut c = ModelConfig::for_inventory(&g.inventory, 8);
        c.enc_hidden = 4;
        c.dec_hidden = 5;
        ModelParameters::init(&c).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&p, &path).unwrap();
        let q = load(&path, Some(&p.config)).unwrap();
        assert_eq!(p, q);
        let path2 = dir.path().join("m2.ckpt");
        save(&q, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn tampering_is_detected() {
        let p = params();
        let mut bytes = to_bytes(&p);
        // Flip a byte inside the config JSON.
        let json_start = 8 + 4 + 64 + 4;
        let pos = json_start + bytes[json_start..].iter().position(|&b| b == b'5').unwrap();
        bytes[pos] = b'6';
        assert!(matches!(from_bytes(&bytes, None), Err(CheckpointError::Corrupt { .. })));

        let mut bytes = to_bytes(&p);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, None), Err(CheckpointError::BadMagic)));

        let bytes = to_bytes(&p);
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], None),
            Err(CheckpointError::Malformed(_))
        ));

        let mut other = p.config.clone();
        other.init_seed = 9;
        assert!(matches!(
            from_bytes(&bytes, Some(&other)),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
    }
}
