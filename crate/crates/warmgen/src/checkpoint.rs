//! Binary checkpoint format.
//!
//! ```text
//! "WGEN1"  u32 version
//! u32 len, config text (key=value lines)
//! repeated until EOF:
//!   u32 len, array name
//!   u32 rank, rank x u32 dims
//!   f32 payload, dims product values
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use warmgen_core::model::{ModelConfig, Parameters};
use warmgen_core::Tensor;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 5] = b"WGEN1";
pub const VERSION: u32 = 1;

pub fn encode(params: &Parameters<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.n_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = params.config().to_kv_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint { path: self.label.to_string(), offset: self.pos, msg: msg.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).or_else(|_| {
            self.pos = start;
            self.fail(format!("{what} is not UTF-8"))
        })
    }
}

pub fn decode(bytes: &[u8], label: &str) -> Result<Parameters<f32>> {
    let mut r = Reader { bytes, pos: 0, label };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let config = ModelConfig::from_kv_text(r.text("config")?)?;
    let mut named = Vec::new();
    while r.pos < bytes.len() {
        let name = r.text("array name")?.to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            r.pos -= 4;
            return r.fail(format!("implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len() - r.pos)) else {
            return r.fail(format!("payload of array {name} {shape:?} runs past the end of the file"));
        };
        let payload = r.take(4 * n, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let t = Tensor::new(shape, data).or_else(|e| r.fail(e.to_string()))?;
        named.push((name, t));
    }
    let end = r.pos;
    Parameters::from_named(config, named)
        .map_err(|e| Error::Checkpoint { path: label.to_string(), offset: end, msg: e.to_string() })
}

pub fn save_checkpoint(path: &Path, params: &Parameters<f32>) -> Result<()> {
    fs::write(path, encode(params)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use warmgen_core::model::{init_model, Arch};

    fn params() -> Parameters<f32> {
        let cfg = ModelConfig {
            arch: Arch::EncoderDecoder,
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            n_layers_encoder: 1,
            n_layers_decoder: 1,
            d_ff: 8,
            max_seq_len: 12,
            dropout_rate: 0.0,
        };
        init_model(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let back = decode(&encode(&p), "mem").unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode(&params());
        for cut in [3, 7, 20, bytes.len() - 1, bytes.len() - 100] {
            match decode(&bytes[..cut], "mem") {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode(&params());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, "m"), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bytes = encode(&params());
        bytes[5] = 9;
        assert!(matches!(decode(&bytes, "m"), Err(Error::Checkpoint { offset: 5, .. })));
    }

    #[test]
    fn huge_claimed_payload_is_rejected() {
        let mut bytes = encode(&params());
        // first array's first dimension, after magic, version, config and name
        let cfg_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let name_at = 13 + cfg_len;
        let name_len = u32::from_le_bytes(bytes[name_at..name_at + 4].try_into().unwrap()) as usize;
        let dim_at = name_at + 4 + name_len + 4;
        bytes[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes, "m"), Err(Error::Checkpoint { .. })));
    }
}
