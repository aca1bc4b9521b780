//! `ARPM` model container.
//!
//! ```text
//! magic "ARPM" | version u16 | backend tag u8 | config length u16 | config
//! | parameter count u64 | f32 parameters | SHA-256 of all preceding bytes
//! ```
//! All integers and floats are little-endian.

use sha2::{Digest, Sha256};

use super::{Backend, PredictorModel, SyntheticConfig, SyntheticModel, TransformerConfig, TransformerModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ARPM";
pub const VERSION: u16 = 1;

pub(crate) fn write_model(model: &PredictorModel) -> Vec<u8> {
    let (config, params): (Vec<u8>, &[f32]) = match model {
        PredictorModel::Synthetic(m) => (m.config_bytes(), &[]),
        PredictorModel::Transformer(m) => (m.config().to_bytes(), m.params()),
    };
    let mut out = Vec::with_capacity(64 + params.len() * 4);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(model.backend() as u8);
    out.extend((config.len() as u16).to_le_bytes());
    out.extend(&config);
    out.extend((params.len() as u64).to_le_bytes());
    for p in params {
        out.extend(p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

fn synthetic_from_bytes(b: &[u8]) -> Result<SyntheticModel> {
    if b.len() != 18 {
        return Err(Error::Malformed("synthetic config block".into()));
    }
    let cfg = SyntheticConfig {
        feature_dim: u16::from_le_bytes([b[0], b[1]]) as usize,
        alpha: f32::from_le_bytes(b[2..6].try_into().expect("4 bytes")),
        beta: f32::from_le_bytes(b[6..10].try_into().expect("4 bytes")),
        seed: u64::from_le_bytes(b[10..18].try_into().expect("8 bytes")),
    };
    if cfg.feature_dim == 0 || !cfg.alpha.is_finite() || !cfg.beta.is_finite() {
        return Err(Error::Malformed("synthetic config values".into()));
    }
    Ok(SyntheticModel::new(cfg))
}

pub(crate) fn read_model(bytes: &[u8]) -> Result<PredictorModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "ARPM" });
    }
    if bytes.len() < 4 + 2 + 1 + 2 + 8 + 32 {
        return Err(Error::Truncated("model header"));
    }
    let mut r = Reader { buf: &bytes[..bytes.len() - 32], pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let tag = r.take(1, "backend tag")?[0];
    let cfg_len = r.u16("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config block")?;
    let count = u64::from_le_bytes(r.take(8, "parameter count")?.try_into().expect("8 bytes"));
    let payload_len = (count as usize)
        .checked_mul(4)
        .ok_or(Error::Malformed("parameter count overflows".into()))?;
    let payload = r.take(payload_len, "parameters")?;
    if r.pos != r.buf.len() {
        return Err(Error::Malformed("trailing bytes after parameters".into()));
    }
    if Sha256::digest(r.buf)[..] != bytes[bytes.len() - 32..] {
        return Err(Error::HashMismatch);
    }
    let params: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    match Backend::from_tag(tag)? {
        Backend::Synthetic => {
            if !params.is_empty() {
                return Err(Error::Malformed("synthetic model carries parameters".into()));
            }
            Ok(PredictorModel::Synthetic(synthetic_from_bytes(cfg_bytes)?))
        }
        Backend::Transformer => {
            let cfg = TransformerConfig::from_bytes(cfg_bytes)?;
            Ok(PredictorModel::Transformer(TransformerModel::from_parts(cfg, params)?))
        }
    }
}
