//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic       b"SCLF"
//! version     u32
//! vocab_size  u64
//! embed_dim   u64
//! attention   u8 (0/1)
//! head        u8 (0/1)
//! head_dim    u64
//! max_len     u64
//! seed        u64
//! tensors     f64 * n, in EncoderConfig::tensor_shapes order
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::corpus::write_atomic;
use crate::encoder::{AttentionWeights, EncoderConfig, EncoderParams, ProjectionHead};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCLF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &EncoderParams) -> Vec<u8> {
    let c = params.config();
    let n: usize = params.tensors().iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(50 + 8 * n);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.vocab_size as u64).to_le_bytes());
    out.extend_from_slice(&(c.embed_dim as u64).to_le_bytes());
    out.push(u8::from(c.use_attention));
    out.push(u8::from(c.use_projection_head));
    out.extend_from_slice(&(c.head_dim as u64).to_le_bytes());
    out.extend_from_slice(&(c.max_input_length as u64).to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    for (_, t) in params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::InvalidInput(format!("{what} does not fit in usize")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8).ok_or_else(|| Error::Truncated(what.to_string()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::InvalidInput(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn flag(v: u8, what: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::InvalidInput(format!("{what} flag has value {other}"))),
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader::new(bytes);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = EncoderConfig {
        vocab_size: r.usize("vocab_size")?,
        embed_dim: r.usize("embed_dim")?,
        use_attention: flag(r.u8("attention")?, "attention")?,
        use_projection_head: flag(r.u8("head")?, "head")?,
        head_dim: r.usize("head_dim")?,
        max_input_length: r.usize("max_input_length")?,
        seed: r.u64("seed")?,
    };
    config.validate()?;
    let d = config.embed_dim;
    let matrix = |r: &mut Reader, rows: usize, cols: usize, what: &str| -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidInput(format!("{what} shape overflows")))?;
        let data = r.f64s(n, what)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    };
    let embedding = matrix(&mut r, config.vocab_size, d, "embedding")?;
    let attention = if config.use_attention {
        Some(AttentionWeights {
            query: matrix(&mut r, d, d, "attention.query")?,
            key: matrix(&mut r, d, d, "attention.key")?,
            value: matrix(&mut r, d, d, "attention.value")?,
        })
    } else {
        None
    };
    let head = if config.use_projection_head {
        Some(ProjectionHead {
            weight: matrix(&mut r, d, config.head_dim, "head.weight")?,
            bias: Array1::from_vec(r.f64s(config.head_dim, "head.bias")?),
        })
    } else {
        None
    };
    r.finish()?;
    EncoderParams::from_parts(config, embedding, attention, head)
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
