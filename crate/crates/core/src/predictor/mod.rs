//! Next-scale predictors: per-bit probabilities and prompt cross-attention
//! maps from the previous scale's (downsampled) features and a prompt.
//!
//! Two backends share one contract: an analytic [`SyntheticModel`] whose
//! outputs are closed-form, and a small trainable [`TransformerModel`].

mod format;
pub(crate) mod linalg;
pub mod synthetic;
pub mod train;
pub mod transformer;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;
use crate::textenc::PromptEmbedding;

pub use synthetic::{SyntheticConfig, SyntheticModel};
pub use train::{train, TrainConfig, TrainReport};
pub use transformer::{TransformerConfig, TransformerModel};

/// Per-bit probabilities for one scale. Only `p⁺` is stored; `p⁻ = 1 - p⁺`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    height: usize,
    width: usize,
    channels: usize,
    p_plus: Vec<f32>,
}

impl ProbGrid {
    pub fn new(height: usize, width: usize, channels: usize, p_plus: Vec<f32>) -> Result<Self> {
        if p_plus.len() != height * width * channels {
            return Err(Error::shape("ProbGrid::new", height * width * channels, p_plus.len()));
        }
        if p_plus.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        Ok(ProbGrid {
            height,
            width,
            channels,
            p_plus,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, p: f32) -> Self {
        ProbGrid::new(height, width, channels, vec![p; height * width * channels])
            .expect("constant grid is valid")
    }

    /// Decodes 16-bit fixed point `q / 65535`.
    pub fn from_u16(height: usize, width: usize, channels: usize, q: &[u16]) -> Result<Self> {
        ProbGrid::new(height, width, channels, q.iter().map(|&v| dequantize_prob(v)).collect())
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

    pub fn p_plus(&self) -> &[f32] {
        &self.p_plus
    }

    pub fn p_plus_at(&self, position: usize, channel: usize) -> f32 {
        self.p_plus[position * self.channels + channel]
    }

    pub fn p_minus_at(&self, position: usize, channel: usize) -> f32 {
        1.0 - self.p_plus_at(position, channel)
    }

    /// Probability assigned to `bit` (true = positive) at one entry.
    pub fn prob_of(&self, position: usize, channel: usize, bit: bool) -> f32 {
        if bit {
            self.p_plus_at(position, channel)
        } else {
            self.p_minus_at(position, channel)
        }
    }

    pub fn to_u16(&self) -> Vec<u16> {
        self.p_plus.iter().map(|&p| quantize_prob(p)).collect()
    }

    /// The grid as it reads back from 16-bit storage.
    pub fn quantized(&self) -> ProbGrid {
        ProbGrid {
            p_plus: self.p_plus.iter().map(|&p| dequantize_prob(quantize_prob(p))).collect(),
            ..*self
        }
    }
}

pub fn quantize_prob(p: f32) -> u16 {
    (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

pub fn dequantize_prob(q: u16) -> f32 {
    (q as f64 / 65535.0) as f32
}

/// One layer's `positions x tokens` attention matrix; rows are distributions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl AttnMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("AttnMatrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("attention weights must be non-negative".into()));
        }
        Ok(AttnMatrix { rows, cols, data })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        AttnMatrix {
            rows,
            cols,
            data: vec![1.0 / cols as f32; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Encodes each row as 16-bit fixed point summing to exactly 65535
    /// (largest-remainder rounding).
    pub fn to_u16(&self) -> Vec<u16> {
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let row = self.row(r);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            let scaled: Vec<f64> = row
                .iter()
                .map(|&v| if sum > 0.0 { v as f64 / sum * 65535.0 } else { 65535.0 / self.cols as f64 })
                .collect();
            let mut q: Vec<u16> = scaled.iter().map(|&s| s.floor() as u16).collect();
            let short = 65535 - q.iter().map(|&v| v as u32).sum::<u32>();
            let mut order: Vec<usize> = (0..self.cols).collect();
            order.sort_by(|&a, &b| {
                let (fa, fb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
                fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
            });
            for &i in order.iter().take(short as usize) {
                q[i] += 1;
            }
            out.extend(q);
        }
        out
    }

    pub fn from_u16(rows: usize, cols: usize, q: &[u16]) -> Result<Self> {
        if q.len() != rows * cols {
            return Err(Error::shape("AttnMatrix::from_u16", rows * cols, q.len()));
        }
        for row in q.chunks(cols.max(1)) {
            if row.iter().map(|&v| v as u32).sum::<u32>() != 65535 {
                return Err(Error::Malformed("attention row does not sum to one".into()));
            }
        }
        AttnMatrix::new(rows, cols, q.iter().map(|&v| (v as f64 / 65535.0) as f32).collect())
    }

    pub fn quantized(&self) -> AttnMatrix {
        AttnMatrix::from_u16(self.rows, self.cols, &self.to_u16()).expect("round trip of valid rows")
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.rows)
            .map(|r| (self.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Cross-attention maps of every attention layer for one scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMaps {
    pub layers: Vec<AttnMatrix>,
}

impl AttentionMaps {
    pub fn quantized(&self) -> AttentionMaps {
        AttentionMaps {
            layers: self.layers.iter().map(AttnMatrix::quantized).collect(),
        }
    }
}

/// Hook that may replace a layer's computed cross-attention map.
pub trait AttentionControl: Sync {
    /// Returns the map to use in `layer` given the one the model computed.
    fn control(&self, layer: usize, computed: &AttnMatrix) -> Result<AttnMatrix>;
}

/// Supplying fixed maps replaces every layer's map wholesale.
impl AttentionControl for AttentionMaps {
    fn control(&self, layer: usize, computed: &AttnMatrix) -> Result<AttnMatrix> {
        let fixed = self.layers.get(layer).ok_or_else(|| Error::OverrideShape {
            layer,
            expected: format!("{:?}", computed.shape()),
            actual: "missing layer".into(),
        })?;
        if fixed.shape() != computed.shape() {
            return Err(Error::OverrideShape {
                layer,
                expected: format!("{:?}", computed.shape()),
                actual: format!("{:?}", fixed.shape()),
            });
        }
        Ok(fixed.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: ProbGrid,
    /// The maps actually used (after any control).
    pub attention: AttentionMaps,
}

/// The predictor contract both backends satisfy.
pub trait Predictor: Send + Sync {
    /// Probabilities for the scale whose shape equals `input`'s.
    fn predict(
        &self,
        input: &FeatureMap,
        prompt: &PromptEmbedding,
        control: Option<&dyn AttentionControl>,
    ) -> Result<Prediction>;

    /// The `1x1xd` start input projected from the prompt.
    fn make_sos(&self, prompt: &PromptEmbedding) -> FeatureMap;

    fn feature_dim(&self) -> usize;

    fn attention_layers(&self) -> usize;

    /// SHA-256 over backend tag, config and parameters.
    fn fingerprint(&self) -> [u8; 32];
}

pub(crate) fn check_input(input: &FeatureMap, d: usize) -> Result<()> {
    if input.channels() != d || input.positions() == 0 {
        return Err(Error::shape("predict input", ("h", "w", d), input.shape()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Backend {
    Synthetic = 0,
    Transformer = 1,
}

impl Backend {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Backend::Synthetic),
            1 => Ok(Backend::Transformer),
            other => Err(Error::UnknownBackend(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backend::Synthetic => "synthetic",
            Backend::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredictorModel {
    Synthetic(SyntheticModel),
    Transformer(TransformerModel),
}

impl PredictorModel {
    pub fn synthetic(cfg: SyntheticConfig) -> Self {
        PredictorModel::Synthetic(SyntheticModel::new(cfg))
    }

    pub fn transformer(cfg: TransformerConfig) -> Result<Self> {
        Ok(PredictorModel::Transformer(TransformerModel::new(cfg)?))
    }

    pub fn backend(&self) -> Backend {
        match self {
            PredictorModel::Synthetic(_) => Backend::Synthetic,
            PredictorModel::Transformer(_) => Backend::Transformer,
        }
    }

    fn inner(&self) -> &dyn Predictor {
        match self {
            PredictorModel::Synthetic(m) => m,
            PredictorModel::Transformer(m) => m,
        }
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::write_model(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::read_model(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PredictorModel::from_bytes(&bytes)
    }
}

impl Predictor for PredictorModel {
    fn predict(
        &self,
        input: &FeatureMap,
        prompt: &PromptEmbedding,
        control: Option<&dyn AttentionControl>,
    ) -> Result<Prediction> {
        self.inner().predict(input, prompt, control)
    }

    fn make_sos(&self, prompt: &PromptEmbedding) -> FeatureMap {
        self.inner().make_sos(prompt)
    }

    fn feature_dim(&self) -> usize {
        self.inner().feature_dim()
    }

    fn attention_layers(&self) -> usize {
        self.inner().attention_layers()
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.inner().fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn attention_quantization_rows_exact() {
        let m = AttnMatrix::new(2, 3, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.1, 0.2, 0.7]).unwrap();
        let q = m.to_u16();
        assert_eq!(q[..3].iter().map(|&v| v as u32).sum::<u32>(), 65535);
        assert_eq!(q[3..].iter().map(|&v| v as u32).sum::<u32>(), 65535);
        assert!(m.quantized().max_row_error() < 1e-6);
    }

    #[test]
    fn prob_grid_validation() {
        assert!(ProbGrid::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(ProbGrid::new(1, 1, 2, vec![0.5]).is_err());
        let g = ProbGrid::new(1, 1, 2, vec![0.25, 1.0]).unwrap();
        assert_eq!(g.prob_of(0, 0, false), 0.75);
        assert_eq!(g.prob_of(0, 1, true), 1.0);
    }

    #[test]
    fn unknown_backend_tag() {
        assert!(matches!(Backend::from_tag(7), Err(Error::UnknownBackend(7))));
    }

    proptest! {
        #[test]
        fn prob_quantization_error_bound(p in 0.0f32..=1.0) {
            let back = dequantize_prob(quantize_prob(p));
            prop_assert!((back - p).abs() <= 1.0 / 65535.0);
        }

        #[test]
        fn attention_rows_sum_to_one_after_quantization(raw in prop::collection::vec(0.0f32..1.0, 1..12)) {
            let sum: f32 = raw.iter().sum();
            prop_assume!(sum > 1e-3);
            let row: Vec<f32> = raw.iter().map(|v| v / sum).collect();
            let m = AttnMatrix::new(1, row.len(), row).unwrap();
            let q = m.to_u16();
            prop_assert_eq!(q.iter().map(|&v| v as u32).sum::<u32>(), 65535);
            prop_assert!(m.quantized().max_row_error() < 1e-5);
        }
    }
}
