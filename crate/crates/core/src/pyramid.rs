//! Multi-scale binary spherical quantization.
//!
//! A feature map is split into `K` residual bit grids, coarse to fine. Each
//! grid stores one sign bit per channel and position; materialized, a
//! position is a vector of `±1/√d` entries and therefore has unit norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{downsample_bilinear, upsample_bilinear, FeatureMap};

/// The ordered `(h_k, w_k)` resolutions of a pyramid plus the code width `d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    levels: Vec<(usize, usize)>,
    feature_dim: usize,
}

impl ScaleSchedule {
    pub fn new(levels: Vec<(usize, usize)>, feature_dim: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one level".into()));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if levels.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::InvalidArgument("schedule levels must be non-empty".into()));
        }
        if levels.windows(2).any(|p| p[1].0 < p[0].0 || p[1].1 < p[0].1) {
            return Err(Error::InvalidArgument(format!(
                "schedule levels must be non-decreasing: {levels:?}"
            )));
        }
        Ok(ScaleSchedule {
            levels,
            feature_dim,
        })
    }

    /// Square levels `1, 2, 4, ..., side` (side must be a power of two).
    pub fn doubling(side: usize, feature_dim: usize) -> Result<Self> {
        if !side.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("{side} is not a power of two")));
        }
        let levels = (0..=side.trailing_zeros()).map(|i| (1 << i, 1 << i)).collect();
        ScaleSchedule::new(levels, feature_dim)
    }

    /// The default 16x16x32 schedule: doubling to 16, then the finest level twice more.
    ///
    /// Each residual step can only move a component by `1/√d`, so the extra
    /// full-resolution levels give editing room above the reused coarse scales.
    pub fn reference() -> Self {
        let mut levels: Vec<_> = (0..5).map(|i| (1 << i, 1 << i)).collect();
        levels.extend([(16, 16), (16, 16)]);
        ScaleSchedule::new(levels, 32).expect("static schedule is valid")
    }

    pub fn levels(&self) -> &[(usize, usize)] {
        &self.levels
    }

    /// Number of scales `K`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Shape of level `k`, zero-based.
    pub fn level(&self, k: usize) -> (usize, usize) {
        self.levels[k]
    }

    pub fn full_shape(&self) -> (usize, usize) {
        *self.levels.last().expect("schedule is non-empty")
    }
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule::reference()
    }
}

/// Packed binary labels for one scale.
///
/// Storage is per position, channel-major: channel `c` lives in byte `c / 8`
/// at bit `c % 8`, and every position occupies `⌈d/8⌉` bytes with zero padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitGrid {
    height: usize,
    width: usize,
    channels: usize,
    bits: Vec<u8>,
}

impl BitGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        BitGrid {
            height,
            width,
            channels,
            bits: vec![0; height * width * channels.div_ceil(8)],
        }
    }

    pub fn from_bools(height: usize, width: usize, channels: usize, values: &[bool]) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::shape(
                "BitGrid::from_bools",
                height * width * channels,
                values.len(),
            ));
        }
        let mut grid = BitGrid::zeros(height, width, channels);
        for (i, &v) in values.iter().enumerate() {
            grid.set(i / channels, i % channels, v);
        }
        Ok(grid)
    }

    /// Rebuilds a grid from its packed form; nonzero padding bits are rejected.
    pub fn from_packed(height: usize, width: usize, channels: usize, bits: Vec<u8>) -> Result<Self> {
        let stride = channels.div_ceil(8);
        if bits.len() != height * width * stride {
            return Err(Error::shape("BitGrid::from_packed", height * width * stride, bits.len()));
        }
        let tail = channels % 8;
        if tail != 0 {
            let pad_mask = !((1u8 << tail) - 1);
            if bits.chunks(stride).any(|row| row[stride - 1] & pad_mask != 0) {
                return Err(Error::Malformed("nonzero padding bits in packed grid".into()));
            }
        }
        Ok(BitGrid {
            height,
            width,
            channels,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn bytes_per_position(&self) -> usize {
        self.channels.div_ceil(8)
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, position: usize, channel: usize) -> bool {
        let byte = self.bits[position * self.bytes_per_position() + channel / 8];
        byte >> (channel % 8) & 1 == 1
    }

    pub fn set(&mut self, position: usize, channel: usize, value: bool) {
        let idx = position * self.bytes_per_position() + channel / 8;
        let bit = 1u8 << (channel % 8);
        if value {
            self.bits[idx] |= bit;
        } else {
            self.bits[idx] &= !bit;
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.positions())
            .flat_map(|p| (0..self.channels).map(move |c| (p, c)))
            .map(|(p, c)| self.get(p, c))
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// The `±1/√d` feature map these labels stand for.
    pub fn materialize(&self) -> FeatureMap {
        let s = bsq_level(self.channels);
        let data = (0..self.positions())
            .flat_map(|p| (0..self.channels).map(move |c| (p, c)))
            .map(|(p, c)| if self.get(p, c) { s } else { -s })
            .collect();
        FeatureMap::from_vec(self.height, self.width, self.channels, data)
            .expect("shape is consistent by construction")
    }
}

/// Magnitude of every materialized component, `1/√d`.
pub fn bsq_level(d: usize) -> f32 {
    (1.0 / (d as f64).sqrt()) as f32
}

/// Sign bits of one residual vector: bit `c` is set iff `z[c] >= 0`.
pub fn quantize_bsq(z: &[f32]) -> Result<Vec<bool>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("cannot quantize an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize_bsq"));
    }
    Ok(z.iter().map(|&v| v >= 0.0).collect())
}

/// Applies [`quantize_bsq`] at every position of a feature map.
pub fn quantize_grid(z: &FeatureMap) -> Result<BitGrid> {
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize_grid"));
    }
    let (h, w, d) = z.shape();
    let mut grid = BitGrid::zeros(h, w, d);
    for (i, &v) in z.data().iter().enumerate() {
        if v >= 0.0 {
            grid.set(i / d, i % d, true);
        }
    }
    Ok(grid)
}

/// Running sum of upsampled residuals at full resolution, kept in `f64`.
///
/// Encoding, reconstruction and editing all go through this type so their
/// partial sums agree bit for bit.
#[derive(Clone, Debug)]
pub struct Accumulator {
    height: usize,
    width: usize,
    channels: usize,
    sum: Vec<f64>,
}

impl Accumulator {
    pub fn new(schedule: &ScaleSchedule) -> Self {
        let (height, width) = schedule.full_shape();
        let channels = schedule.feature_dim();
        Accumulator {
            height,
            width,
            channels,
            sum: vec![0.0; height * width * channels],
        }
    }

    pub fn add(&mut self, residual: &BitGrid) -> Result<()> {
        if residual.channels() != self.channels {
            return Err(Error::shape("Accumulator::add", self.channels, residual.channels()));
        }
        let up = upsample_bilinear(&residual.materialize(), self.height, self.width)?;
        for (acc, &v) in self.sum.iter_mut().zip(up.data()) {
            *acc += v as f64;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> FeatureMap {
        let data = self.sum.iter().map(|&v| v as f32).collect();
        FeatureMap::from_vec(self.height, self.width, self.channels, data)
            .expect("accumulator shape is consistent")
    }
}

/// Output of [`encode_pyramid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    /// `R_1..R_K`.
    pub residuals: Vec<BitGrid>,
    /// `F̃_1..F̃_{K-1}`: each partial sum downsampled to the next level's shape.
    pub inputs: Vec<FeatureMap>,
}

fn check_full_shape(f: &FeatureMap, schedule: &ScaleSchedule, context: &'static str) -> Result<()> {
    let (h, w) = schedule.full_shape();
    let want = (h, w, schedule.feature_dim());
    if f.shape() != want {
        return Err(Error::shape(context, want, f.shape()));
    }
    Ok(())
}

/// Splits `f` into residual bit grids: `R_k = Q(down(F, k) - down(F_{k-1}, k))`.
pub fn encode_pyramid(f: &FeatureMap, schedule: &ScaleSchedule) -> Result<Pyramid> {
    check_full_shape(f, schedule, "encode_pyramid")?;
    let mut acc = Accumulator::new(schedule);
    let mut residuals = Vec::with_capacity(schedule.len());
    let mut inputs = Vec::with_capacity(schedule.len().saturating_sub(1));
    for (k, &(h, w)) in schedule.levels().iter().enumerate() {
        let partial = acc.snapshot();
        if k > 0 {
            inputs.push(downsample_bilinear(&partial, h, w)?);
        }
        let target = downsample_bilinear(f, h, w)?;
        let current = downsample_bilinear(&partial, h, w)?;
        let r = quantize_grid(&target.sub(&current)?)?;
        acc.add(&r)?;
        residuals.push(r);
    }
    Ok(Pyramid { residuals, inputs })
}

/// `F_k = Σ_{i≤k} up(R_i)`; `upto = 0` gives the zero map.
pub fn accumulate(residuals: &[BitGrid], schedule: &ScaleSchedule, upto: usize) -> Result<FeatureMap> {
    if upto > schedule.len() || upto > residuals.len() {
        return Err(Error::InvalidArgument(format!(
            "upto = {upto} exceeds {} scales",
            schedule.len().min(residuals.len())
        )));
    }
    let mut acc = Accumulator::new(schedule);
    for (k, r) in residuals.iter().take(upto).enumerate() {
        let (h, w) = schedule.level(k);
        if r.shape() != (h, w, schedule.feature_dim()) {
            return Err(Error::shape("accumulate", (h, w, schedule.feature_dim()), r.shape()));
        }
        acc.add(r)?;
    }
    Ok(acc.snapshot())
}
