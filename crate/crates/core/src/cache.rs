//! One forward pass over the source image and the `AREC` cache file.
//!
//! ```text
//! magic "AREC" | version u16 | flags u16 | K u16 | d u16 | K x (h u16, w u16)
//! | token count u16 | token ids u16... | fingerprint [32] | codec seed u64
//! | attention layers u16
//! | per scale: packed bits | p+ as u16 | (per layer: attention rows as u16)
//! | SHA-256 of all preceding bytes
//! ```
//! Flags: bit 0 = attention present; bits 8..16 = probability precision in bits (16).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::numerics::{upsample_bilinear, FeatureMap, Image};
use crate::predictor::{AttentionMaps, AttnMatrix, Predictor, ProbGrid};
use crate::pyramid::{encode_pyramid, BitGrid, ScaleSchedule};
use crate::textenc::{encode_prompt, PromptEmbedding};

pub const MAGIC: &[u8; 4] = b"AREC";
pub const VERSION: u16 = 1;
const FLAG_ATTENTION: u16 = 1;
const PROB_BITS: u16 = 16;

/// Everything an edit needs from the source pass. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EditCache {
    pub schedule: ScaleSchedule,
    /// The encoder's bit labels `R_1..R_K`.
    pub r_queue: Vec<BitGrid>,
    /// Source-prompt probabilities, already at 16-bit storage precision.
    pub p_queue: Vec<ProbGrid>,
    /// Source-prompt cross-attention maps per scale, at 16-bit storage precision.
    pub w_queue: Option<Vec<AttentionMaps>>,
    pub source_token_ids: Vec<u16>,
    pub model_fingerprint: [u8; 32],
    pub codec_seed: u64,
    pub format_version: u16,
}

impl EditCache {
    pub fn len(&self) -> usize {
        self.r_queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_queue.is_empty()
    }

    pub fn has_attention(&self) -> bool {
        self.w_queue.is_some()
    }

    pub fn source_prompt(&self) -> PromptEmbedding {
        PromptEmbedding::from_token_ids(self.source_token_ids.clone())
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.model_fingerprint)
    }

    /// Fails unless `model` produced this cache.
    pub fn check_model(&self, model: &(impl Predictor + ?Sized)) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: hex::encode(self.model_fingerprint),
                actual: hex::encode(fp),
            });
        }
        Ok(())
    }

    pub fn check_codec(&self, codec: &CodecParams) -> Result<()> {
        if codec.seed() != self.codec_seed {
            return Err(Error::CodecMismatch {
                expected: self.codec_seed,
                actual: codec.seed(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(self.format_version.to_le_bytes());
        let flags = (PROB_BITS << 8) | if self.has_attention() { FLAG_ATTENTION } else { 0 };
        out.extend(flags.to_le_bytes());
        out.extend((self.schedule.len() as u16).to_le_bytes());
        out.extend((self.schedule.feature_dim() as u16).to_le_bytes());
        for &(h, w) in self.schedule.levels() {
            out.extend((h as u16).to_le_bytes());
            out.extend((w as u16).to_le_bytes());
        }
        out.extend((self.source_token_ids.len() as u16).to_le_bytes());
        for t in &self.source_token_ids {
            out.extend(t.to_le_bytes());
        }
        out.extend(self.model_fingerprint);
        out.extend(self.codec_seed.to_le_bytes());
        let layers = self.w_queue.as_ref().map_or(0, |w| w.first().map_or(0, |m| m.layers.len()));
        out.extend((layers as u16).to_le_bytes());
        for k in 0..self.len() {
            out.extend(self.r_queue[k].packed());
            for q in self.p_queue[k].to_u16() {
                out.extend(q.to_le_bytes());
            }
            if let Some(w) = &self.w_queue {
                for layer in &w[k].layers {
                    for q in layer.to_u16() {
                        out.extend(q.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { expected: "AREC" });
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        if bytes.len() < 32 + 6 {
            return Err(Error::Truncated("content hash"));
        }
        // Everything below reads from the hashed body; the hash is checked before
        // any field is trusted beyond its length.
        let body_len = bytes.len() - 32;
        let mut r = Reader { buf: &bytes[..body_len], pos: r.pos };
        let flags = r.u16("flags")?;
        let k = r.u16("schedule")? as usize;
        let d = r.u16("schedule")? as usize;
        let mut levels = Vec::with_capacity(k);
        for _ in 0..k {
            levels.push((r.u16("schedule")? as usize, r.u16("schedule")? as usize));
        }
        let n_tokens = r.u16("token ids")? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(r.u16("token ids")?);
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().expect("32 bytes");
        let codec_seed = u64::from_le_bytes(r.take(8, "codec seed")?.try_into().expect("8 bytes"));
        let layers = r.u16("attention layers")? as usize;
        let has_attention = flags & FLAG_ATTENTION != 0;
        let mut sections = Vec::with_capacity(k);
        for &(h, w) in &levels {
            let n = h * w;
            let packed = r.take(n * d.div_ceil(8), "bit labels")?;
            let probs = r.u16s(n * d, "probabilities")?;
            let mut attn = Vec::new();
            if has_attention {
                for _ in 0..layers {
                    let cols = tokens.len().max(1);
                    attn.push((n, cols, r.u16s(n * cols, "attention")?));
                }
            }
            sections.push((h, w, packed, probs, attn));
        }
        if r.pos != body_len {
            return Err(Error::Malformed("trailing bytes before content hash".into()));
        }
        if Sha256::digest(&bytes[..body_len])[..] != bytes[body_len..] {
            return Err(Error::HashMismatch);
        }
        if flags >> 8 != PROB_BITS || flags & 0xff & !FLAG_ATTENTION != 0 {
            return Err(Error::Malformed(format!("unsupported flags {flags:#06x}")));
        }
        if n_tokens == 0 {
            return Err(Error::Malformed("cache has no source tokens".into()));
        }
        let schedule = ScaleSchedule::new(levels, d).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut r_queue = Vec::with_capacity(k);
        let mut p_queue = Vec::with_capacity(k);
        let mut w_queue = has_attention.then(Vec::new);
        for (h, w, packed, probs, attn) in sections {
            let bad = |e: Error| Error::Malformed(e.to_string());
            r_queue.push(BitGrid::from_packed(h, w, d, packed.to_vec()).map_err(bad)?);
            p_queue.push(ProbGrid::from_u16(h, w, d, &probs).map_err(bad)?);
            if let Some(wq) = w_queue.as_mut() {
                let layers = attn
                    .into_iter()
                    .map(|(rows, cols, q)| AttnMatrix::from_u16(rows, cols, &q))
                    .collect::<Result<Vec<_>>>()
                    .map_err(bad)?;
                wq.push(AttentionMaps { layers });
            }
        }
        Ok(EditCache {
            schedule,
            r_queue,
            p_queue,
            w_queue,
            source_token_ids: tokens,
            model_fingerprint: fingerprint,
            codec_seed,
            format_version: version,
        })
    }
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

    fn u16s(&mut self, n: usize, what: &'static str) -> Result<Vec<u16>> {
        Ok(self
            .take(n * 2, what)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }
}

/// The first scale's input: the start vector broadcast to level 1.
pub(crate) fn start_input(model: &(impl Predictor + ?Sized), prompt: &PromptEmbedding, schedule: &ScaleSchedule) -> Result<FeatureMap> {
    let (h, w) = schedule.level(0);
    upsample_bilinear(&model.make_sos(prompt), h, w)
}

fn build(
    img: &Image,
    source_prompt: &str,
    model: &(impl Predictor + ?Sized),
    codec: &CodecParams,
    schedule: &ScaleSchedule,
    keep_attention: bool,
) -> Result<EditCache> {
    if model.feature_dim() != schedule.feature_dim() || codec.feature_dim() != schedule.feature_dim() {
        return Err(Error::shape(
            "build_cache feature_dim",
            schedule.feature_dim(),
            (model.feature_dim(), codec.feature_dim()),
        ));
    }
    let prompt = encode_prompt(source_prompt);
    let f = codec.encode_image(img)?;
    let pyramid = encode_pyramid(&f, schedule)?;
    let mut p_queue = Vec::with_capacity(schedule.len());
    let mut w_queue = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let input = if k == 0 {
            start_input(model, &prompt, schedule)?
        } else {
            pyramid.inputs[k - 1].clone()
        };
        let pred = model.predict(&input, &prompt, None)?;
        p_queue.push(pred.probs.quantized());
        if keep_attention {
            w_queue.push(pred.attention.quantized());
        }
    }
    Ok(EditCache {
        schedule: schedule.clone(),
        r_queue: pyramid.residuals,
        p_queue,
        w_queue: keep_attention.then_some(w_queue),
        source_token_ids: prompt.token_ids,
        model_fingerprint: model.fingerprint(),
        codec_seed: codec.seed(),
        format_version: VERSION,
    })
}

/// Runs the predictor once per scale on the encoder's own bit labels under
/// the source prompt; no sampling takes place.
pub fn build_cache(
    img: &Image,
    source_prompt: &str,
    model: &(impl Predictor + ?Sized),
    codec: &CodecParams,
    schedule: &ScaleSchedule,
    keep_attention: bool,
) -> Result<EditCache> {
    build(img, source_prompt, model, codec, schedule, keep_attention).map_err(|e| Error::CacheBuild(Box::new(e)))
}

pub fn save_cache(cache: &EditCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cache.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<EditCache> {
    let path = path.as_ref();
    EditCache::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
