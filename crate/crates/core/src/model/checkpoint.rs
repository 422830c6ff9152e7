//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, version, config block, vocab hash, frozen
//! flag, named parameter tensors, then a SHA-256 of everything before it.
//! Serialization is byte-stable for identical parameters, so the trailing
//! digest doubles as the model's content hash.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

use super::{ModelConfig, Transformer};

const MAGIC: &[u8; 8] = b"HCOTCKP1";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

fn serialize_body(model: &Transformer, vocab_hash: &[u8; 32]) -> Vec<u8> {
    let cfg = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, cfg.vocab_size as u64);
    put_u64(&mut buf, cfg.hidden_dim as u64);
    put_u64(&mut buf, cfg.num_layers as u64);
    put_u64(&mut buf, cfg.num_heads as u64);
    put_u64(&mut buf, cfg.max_seq_len as u64);
    put_u32(&mut buf, cfg.cot_token_id);
    put_f64(&mut buf, cfg.dropout_rate);
    buf.extend_from_slice(vocab_hash);
    buf.push(model.frozen() as u8);
    put_u32(&mut buf, model.params().len() as u32);
    for (_, p) in model.params().iter() {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in p.tensor.data() {
            put_f64(&mut buf, v);
        }
    }
    buf
}

/// Hex SHA-256 over the serialized config and parameters.
pub fn content_hash(model: &Transformer, vocab_hash: &[u8; 32]) -> String {
    let body = serialize_body(model, vocab_hash);
    hex(&Sha256::digest(&body))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, model: &Transformer, vocab_hash: &[u8; 32]) -> Result<String> {
    let body = serialize_body(model, vocab_hash);
    let digest = Sha256::digest(&body);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&body)?;
    f.write_all(&digest)?;
    f.flush()?;
    Ok(hex(&digest))
}

/// Load a checkpoint, verifying magic, version and content digest.
/// Returns the model (with its stored frozen flag), the vocab hash it was
/// trained against, and its content hash.
pub fn load_checkpoint(path: &Path) -> Result<(Transformer, [u8; 32], String)> {
    let raw = std::fs::read(path)?;
    if raw.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = raw.split_at(raw.len() - 32);
    let expect = Sha256::digest(body);
    if expect.as_slice() != digest {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: r.u64()? as usize,
        hidden_dim: r.u64()? as usize,
        num_layers: r.u64()? as usize,
        num_heads: r.u64()? as usize,
        max_seq_len: r.u64()? as usize,
        cot_token_id: r.u32()?,
        dropout_rate: r.f64()?,
    };
    let mut vocab_hash = [0u8; 32];
    vocab_hash.copy_from_slice(r.take(32)?);
    let frozen = r.take(1)?[0] != 0;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        store.insert(name, Tensor::from_vec(&shape, data)?);
    }
    let model = Transformer::from_parts(config, store, frozen)?;
    Ok((model, vocab_hash, hex(&expect)))
}
