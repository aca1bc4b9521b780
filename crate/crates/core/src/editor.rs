//! Cached-pass editing: reuse the first `γ` scales, then re-sample only the
//! bits whose cached value loses more than `τ` probability under the target
//! prompt.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{start_input, EditCache};
use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::numerics::{bernoulli_sample, downsample_bilinear, gray_png_bytes, CounterRng, FeatureMap, Image};
use crate::predictor::{AttentionControl, AttentionMaps, AttnMatrix, Predictor, ProbGrid};
use crate::pyramid::{Accumulator, BitGrid};
use crate::textenc::{align_tokens, encode_prompt};

/// Per-bit edit flags for one scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    flags: BitGrid,
}

impl BitMask {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        BitMask {
            flags: BitGrid::zeros(height, width, channels),
        }
    }

    pub fn from_bools(height: usize, width: usize, channels: usize, flags: &[bool]) -> Result<Self> {
        Ok(BitMask {
            flags: BitGrid::from_bools(height, width, channels, flags)?,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.flags.shape()
    }

    pub fn get(&self, position: usize, channel: usize) -> bool {
        self.flags.get(position, channel)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.flags.to_bools()
    }

    pub fn count(&self) -> usize {
        self.flags.count_ones()
    }

    /// `self AND other`; shapes must match.
    pub fn and(&self, other: &BitMask) -> Result<BitMask> {
        check_shape("BitMask::and", self.shape(), other.shape())?;
        let (h, w, d) = self.shape();
        let a = self.to_bools();
        let flags: Vec<bool> = a.iter().zip(other.to_bools()).map(|(&x, y)| x && y).collect();
        BitMask::from_bools(h, w, d, &flags)
    }

    /// Channel-mean flag density per position, scaled to 0..=255.
    pub fn heatmap(&self) -> Vec<u8> {
        let (h, w, d) = self.shape();
        (0..h * w)
            .map(|p| {
                let on = (0..d).filter(|&c| self.get(p, c)).count();
                ((on as f64 / d as f64) * 255.0).round() as u8
            })
            .collect()
    }

    pub fn heatmap_png(&self) -> Result<Vec<u8>> {
        let (h, w, _) = self.shape();
        gray_png_bytes(w, h, &self.heatmap())
    }

    /// `"ARMK" | h u32 | w u32 | d u32 | LEB128 run lengths`, alternating
    /// runs of clear and set flags in position-major order, starting with clear.
    pub fn to_rle(&self) -> Vec<u8> {
        let (h, w, d) = self.shape();
        let mut out = Vec::from(*RLE_MAGIC);
        for v in [h, w, d] {
            out.extend((v as u32).to_le_bytes());
        }
        let mut current = false;
        let mut run = 0u64;
        for f in self.to_bools() {
            if f != current {
                write_leb128(&mut out, run);
                current = f;
                run = 0;
            }
            run += 1;
        }
        write_leb128(&mut out, run);
        out
    }

    pub fn from_rle(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != RLE_MAGIC {
            return Err(Error::BadMagic { expected: "ARMK" });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("mask header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (h, w, d) = (dim(0), dim(1), dim(2));
        let total = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(d))
            .ok_or_else(|| Error::Malformed("mask dimensions overflow".into()))?;
        let mut flags = Vec::with_capacity(total);
        let mut pos = 16;
        let mut current = false;
        while pos < bytes.len() {
            let run = read_leb128(bytes, &mut pos)? as usize;
            if flags.len() + run > total {
                return Err(Error::Malformed("mask runs exceed mask size".into()));
            }
            flags.extend(std::iter::repeat_n(current, run));
            current = !current;
        }
        if flags.len() != total {
            return Err(Error::Truncated("mask runs"));
        }
        BitMask::from_bools(h, w, d, &flags)
    }
}

const RLE_MAGIC: &[u8; 4] = b"ARMK";

fn write_leb128(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_leb128(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos).ok_or(Error::Truncated("mask run"))?;
        *pos += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Malformed("run length overflows".into()))
}

fn check_shape<T: PartialEq + std::fmt::Debug>(context: &'static str, a: T, b: T) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

fn check_mask_inputs(p_cached: &ProbGrid, p_target: &ProbGrid, r_cached: &BitGrid, tau: f64) -> Result<()> {
    check_shape("compute_mask target", p_cached.shape(), p_target.shape())?;
    check_shape("compute_mask bits", p_cached.shape(), r_cached.shape())?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau = {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Probability drop of the cached bit value at one element.
fn gap(p_cached: &ProbGrid, p_target: &ProbGrid, r_cached: &BitGrid, position: usize, channel: usize) -> f64 {
    let bit = r_cached.get(position, channel);
    p_cached.prob_of(position, channel, bit) as f64 - p_target.prob_of(position, channel, bit) as f64
}

/// Flags element `(i, j, c)` iff `P_cached[r] - P_target[r] > τ`.
pub fn compute_mask(p_cached: &ProbGrid, p_target: &ProbGrid, r_cached: &BitGrid, tau: f64) -> Result<BitMask> {
    check_mask_inputs(p_cached, p_target, r_cached, tau)?;
    let (h, w, d) = p_cached.shape();
    let flags: Vec<bool> = (0..h * w)
        .flat_map(|p| (0..d).map(move |c| (p, c)))
        .map(|(p, c)| gap(p_cached, p_target, r_cached, p, c) > tau)
        .collect();
    BitMask::from_bools(h, w, d, &flags)
}

/// Flags whole positions whose channel-mean gap exceeds `τ`.
pub fn compute_mask_spatial(p_cached: &ProbGrid, p_target: &ProbGrid, r_cached: &BitGrid, tau: f64) -> Result<BitMask> {
    check_mask_inputs(p_cached, p_target, r_cached, tau)?;
    let (h, w, d) = p_cached.shape();
    let mut flags = Vec::with_capacity(h * w * d);
    for p in 0..h * w {
        let mean = (0..d).map(|c| gap(p_cached, p_target, r_cached, p, c)).sum::<f64>() / d as f64;
        flags.extend(std::iter::repeat_n(mean > tau, d));
    }
    BitMask::from_bools(h, w, d, &flags)
}

/// Sampled bits where flagged, cached bits elsewhere.
pub fn reassemble(mask: &BitMask, sampled: &BitGrid, cached: &BitGrid) -> Result<BitGrid> {
    check_shape("reassemble sampled", mask.shape(), sampled.shape())?;
    check_shape("reassemble cached", mask.shape(), cached.shape())?;
    let mut out = cached.clone();
    let (h, w, d) = mask.shape();
    for p in 0..h * w {
        for c in 0..d {
            if mask.get(p, c) {
                out.set(p, c, sampled.get(p, c));
            }
        }
    }
    Ok(out)
}

/// Column `j` comes from the cached map's column `A(j)` when aligned, else from
/// the target map; rows are then renormalized. When every column is carried
/// over from one side unchanged the rows are already distributions and the
/// map is returned as is.
pub fn refine_matrix(cached: &AttnMatrix, target: &AttnMatrix, alignment: &[Option<usize>]) -> Result<AttnMatrix> {
    if cached.rows() != target.rows() {
        return Err(Error::shape("refine_attention rows", cached.rows(), target.rows()));
    }
    if alignment.len() != target.cols() {
        return Err(Error::shape("refine_attention alignment", target.cols(), alignment.len()));
    }
    for &a in alignment.iter().flatten() {
        if a >= cached.cols() {
            return Err(Error::AlignmentOutOfRange {
                index: a,
                len: cached.cols(),
            });
        }
    }
    if alignment.iter().all(Option::is_none) {
        return Ok(target.clone());
    }
    let identity = cached.cols() == target.cols() && alignment.iter().enumerate().all(|(j, &a)| a == Some(j));
    if identity {
        return Ok(cached.clone());
    }
    let (rows, cols) = target.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let row: Vec<f64> = alignment
            .iter()
            .enumerate()
            .map(|(j, &a)| match a {
                Some(s) => cached.get(i, s) as f64,
                None => target.get(i, j) as f64,
            })
            .collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            data.extend(row.iter().map(|&v| (v / sum) as f32));
        } else {
            data.extend(std::iter::repeat_n((1.0 / cols as f64) as f32, cols));
        }
    }
    AttnMatrix::new(rows, cols, data)
}

/// [`refine_matrix`] applied layer by layer.
pub fn refine_attention(w_cached: &AttentionMaps, w_target: &AttentionMaps, alignment: &[Option<usize>]) -> Result<AttentionMaps> {
    if w_cached.layers.len() != w_target.layers.len() {
        return Err(Error::shape("refine_attention layers", w_cached.layers.len(), w_target.layers.len()));
    }
    let layers = w_cached
        .layers
        .iter()
        .zip(&w_target.layers)
        .map(|(c, t)| refine_matrix(c, t, alignment))
        .collect::<Result<_>>()?;
    Ok(AttentionMaps { layers })
}

/// Attention hook that splices cached source-prompt maps into the target maps.
pub struct RefineControl<'a> {
    pub cached: &'a AttentionMaps,
    pub alignment: &'a [Option<usize>],
}

impl AttentionControl for RefineControl<'_> {
    fn control(&self, layer: usize, computed: &AttnMatrix) -> Result<AttnMatrix> {
        let cached = self.cached.layers.get(layer).ok_or_else(|| Error::OverrideShape {
            layer,
            expected: format!("{:?}", computed.shape()),
            actual: "missing layer".into(),
        })?;
        refine_matrix(cached, computed, self.alignment)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    Bitwise,
    Spatial,
    /// Every bit re-sampled: regeneration from scratch under the target prompt.
    Full,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitwise" => Ok(MaskMode::Bitwise),
            "spatial" => Ok(MaskMode::Spatial),
            "full" => Ok(MaskMode::Full),
            _ => Err(Error::InvalidArgument(format!("unknown mask mode {s:?}"))),
        }
    }
}

/// A user-drawn region at any resolution; values `>= 0.5` after resampling to a scale count as inside.
#[derive(Clone, Debug, PartialEq)]
pub struct UserMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f32>,
}

impl UserMask {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height || width == 0 || height == 0 {
            return Err(Error::shape("UserMask::new", width * height, values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("user mask values must lie in [0, 1]".into()));
        }
        Ok(UserMask { width, height, values })
    }

    /// Grayscale image, white = editable.
    pub fn from_image(img: &Image) -> Self {
        let values = (0..img.height())
            .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
            .map(|(x, y)| {
                let [r, g, b] = img.pixel(x, y);
                ((r as f32 + g as f32 + b as f32) / (3.0 * 255.0)).clamp(0.0, 1.0)
            })
            .collect();
        UserMask {
            width: img.width(),
            height: img.height(),
            values,
        }
    }

    /// The mask at one scale, broadcast over `d` channels.
    pub fn at_scale(&self, h: usize, w: usize, d: usize) -> Result<BitMask> {
        let src = FeatureMap::from_vec(self.height, self.width, 1, self.values.clone())?;
        let small = if (h, w) == (self.height, self.width) {
            src
        } else if h <= self.height && w <= self.width {
            downsample_bilinear(&src, h, w)?
        } else {
            crate::numerics::upsample_bilinear(&src, h, w)?
        };
        let flags: Vec<bool> = small.data().iter().flat_map(|&v| std::iter::repeat_n(v >= 0.5, d)).collect();
        BitMask::from_bools(h, w, d, &flags)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditConfig {
    pub gamma: usize,
    pub tau: f64,
    pub mask_mode: MaskMode,
    pub attention_control: bool,
    pub attention_max_res: usize,
    pub seed: u64,
    pub temperature: f32,
    pub emit_intermediate: bool,
    pub user_mask: Option<UserMask>,
}

pub const DEFAULT_GAMMA: usize = 3;
pub const DEFAULT_TAU: f64 = 0.2;
pub const ATTENTION_GAMMA: usize = 0;
pub const ATTENTION_TAU: f64 = 0.1;

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            mask_mode: MaskMode::Bitwise,
            attention_control: false,
            attention_max_res: 16,
            seed: 0,
            temperature: 1.0,
            emit_intermediate: false,
            user_mask: None,
        }
    }
}

impl EditConfig {
    /// Attention refinement on, with its own `γ` and `τ` defaults.
    pub fn with_attention_control() -> Self {
        EditConfig {
            gamma: ATTENTION_GAMMA,
            tau: ATTENTION_TAU,
            attention_control: true,
            ..EditConfig::default()
        }
    }

    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.gamma > scales {
            return Err(Error::InvalidConfig(format!("gamma = {} exceeds {scales} scales", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau = {} outside [0, 1]", self.tau)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature = {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EditTiming {
    /// Filled in by callers that load the cache themselves.
    pub cache_load: Duration,
    pub predict: Duration,
    pub decode: Duration,
    pub total: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub image: Image,
    /// Masks of the re-predicted scales `γ+1..K`.
    pub masks: Vec<BitMask>,
    /// The context bits actually accumulated at every scale.
    pub edited_bits: Vec<BitGrid>,
    /// `D(F_k)` after each scale when requested.
    pub intermediate_decodes: Option<Vec<Image>>,
    pub timing: EditTiming,
}

impl EditResult {
    pub fn flagged_bits(&self) -> usize {
        self.masks.iter().map(BitMask::count).sum()
    }
}

fn sample_bits(probs: &ProbGrid, seed: u64, scale: usize, temperature: f32) -> Result<BitGrid> {
    let (h, w, d) = probs.shape();
    let mut out = BitGrid::zeros(h, w, d);
    for p in 0..h * w {
        for c in 0..d {
            let mut rng = CounterRng::for_bit(seed, scale, p * d + c);
            if bernoulli_sample(probs.p_plus_at(p, c), temperature, &mut rng)? {
                out.set(p, c, true);
            }
        }
    }
    Ok(out)
}

/// Edits the cached image toward `target_prompt`.
pub fn edit(
    cache: &EditCache,
    target_prompt: &str,
    model: &(impl Predictor + ?Sized),
    codec: &CodecParams,
    cfg: &EditConfig,
) -> Result<EditResult> {
    let start = Instant::now();
    cache.check_model(model)?;
    cache.check_codec(codec)?;
    let schedule = &cache.schedule;
    let k_total = schedule.len();
    cfg.validate(k_total)?;
    if cfg.attention_control && !cache.has_attention() {
        return Err(Error::MissingAttention);
    }
    let target = encode_prompt(target_prompt);
    let alignment = align_tokens(&cache.source_prompt(), &target);
    let d = schedule.feature_dim();

    let mut timing = EditTiming::default();
    let mut acc = Accumulator::new(schedule);
    let mut masks = Vec::with_capacity(k_total - cfg.gamma);
    let mut edited_bits = Vec::with_capacity(k_total);
    let mut intermediates = cfg.emit_intermediate.then(Vec::new);
    for k in 0..k_total {
        let cached = &cache.r_queue[k];
        let bits = if k < cfg.gamma {
            cached.clone()
        } else {
            let (h, w) = schedule.level(k);
            let input = if k == 0 {
                start_input(model, &target, schedule)?
            } else {
                downsample_bilinear(&acc.snapshot(), h, w)?
            };
            let refine = match &cache.w_queue {
                Some(wq) if cfg.attention_control && h.max(w) <= cfg.attention_max_res => Some(RefineControl {
                    cached: &wq[k],
                    alignment: &alignment,
                }),
                _ => None,
            };
            let t = Instant::now();
            let pred = model.predict(&input, &target, refine.as_ref().map(|r| r as &dyn AttentionControl))?;
            timing.predict += t.elapsed();
            let p_target = pred.probs.quantized();
            let sampled = sample_bits(&p_target, cfg.seed, k, cfg.temperature)?;
            let mut mask = match cfg.mask_mode {
                MaskMode::Bitwise => compute_mask(&cache.p_queue[k], &p_target, cached, cfg.tau)?,
                MaskMode::Spatial => compute_mask_spatial(&cache.p_queue[k], &p_target, cached, cfg.tau)?,
                MaskMode::Full => BitMask::from_bools(h, w, d, &vec![true; h * w * d])?,
            };
            if let Some(user) = &cfg.user_mask {
                mask = mask.and(&user.at_scale(h, w, d)?)?;
            }
            let bits = reassemble(&mask, &sampled, cached)?;
            masks.push(mask);
            bits
        };
        acc.add(&bits)?;
        if let Some(out) = intermediates.as_mut() {
            let t = Instant::now();
            out.push(codec.decode_feature(&acc.snapshot())?);
            timing.decode += t.elapsed();
        }
        edited_bits.push(bits);
    }
    let t = Instant::now();
    let image = codec.decode_feature(&acc.snapshot())?;
    timing.decode += t.elapsed();
    timing.total = start.elapsed();
    Ok(EditResult {
        image,
        masks,
        edited_bits,
        intermediate_decodes: intermediates,
        timing,
    })
}
