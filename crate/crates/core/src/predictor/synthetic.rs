//! Analytic predictor: `logit(i, j, c) = α·x(i, j, c) + Σ_t L·A(i, t)·g(t, c)`.
//!
//! `g(t, c)` is a seeded hash of (token, channel) into `{-β, 0, +β}` and `A`
//! is the single layer's attention map (uniform `1/L` unless controlled), so
//! without control each token contributes `g(t, c)` independently of the
//! prompt length. Changing one token only moves the channels where the old
//! and new tokens' `g` differ.

use sha2::{Digest, Sha256};

use super::{check_input, AttentionControl, AttentionMaps, AttnMatrix, Backend, Predictor, Prediction, ProbGrid};
use crate::error::Result;
use crate::numerics::FeatureMap;
use crate::textenc::{PromptEmbedding, EMBED_DIM, NULL_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub feature_dim: usize,
    pub alpha: f32,
    pub beta: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            feature_dim: 32,
            alpha: 2.0,
            beta: 1.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel {
    cfg: SyntheticConfig,
    /// Row-major `EMBED_DIM x d`.
    sos_projection: Vec<f32>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SyntheticModel {
    pub fn new(cfg: SyntheticConfig) -> Self {
        let d = cfg.feature_dim;
        let scale = 1.0 / (EMBED_DIM as f64).sqrt();
        let sos_projection = (0..EMBED_DIM * d)
            .map(|i| {
                let u = (mix(cfg.seed ^ 0x5053_4f53 ^ mix(i as u64)) >> 11) as f64 / (1u64 << 53) as f64;
                ((2.0 * u - 1.0) * scale) as f32
            })
            .collect();
        SyntheticModel { cfg, sos_projection }
    }

    pub fn config(&self) -> SyntheticConfig {
        self.cfg
    }

    pub fn sos_projection(&self) -> &[f32] {
        &self.sos_projection
    }

    /// The per-(token, channel) prompt contribution.
    pub fn token_gain(&self, token: u16, channel: usize) -> f32 {
        if token == NULL_TOKEN {
            return 0.0;
        }
        let h = mix(self.cfg.seed ^ mix(((token as u64) << 16) | channel as u64));
        match h % 3 {
            0 => -self.cfg.beta,
            1 => 0.0,
            _ => self.cfg.beta,
        }
    }

    pub(crate) fn config_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend((self.cfg.feature_dim as u16).to_le_bytes());
        b.extend(self.cfg.alpha.to_le_bytes());
        b.extend(self.cfg.beta.to_le_bytes());
        b.extend(self.cfg.seed.to_le_bytes());
        b
    }
}

impl Predictor for SyntheticModel {
    fn predict(
        &self,
        input: &FeatureMap,
        prompt: &PromptEmbedding,
        control: Option<&dyn AttentionControl>,
    ) -> Result<Prediction> {
        let d = self.cfg.feature_dim;
        check_input(input, d)?;
        let (n, l) = (input.positions(), prompt.len());
        let computed = AttnMatrix::uniform(n, l);
        let attn = match control {
            Some(c) => c.control(0, &computed)?,
            None => computed,
        };
        let gains: Vec<f32> = prompt
            .token_ids
            .iter()
            .flat_map(|&t| (0..d).map(move |c| (t, c)))
            .map(|(t, c)| self.token_gain(t, c))
            .collect();
        let mut p_plus = Vec::with_capacity(n * d);
        for i in 0..n {
            let x = input.vector_at(i);
            for c in 0..d {
                let mut prompt_term = 0.0f64;
                for t in 0..l {
                    prompt_term += l as f64 * attn.get(i, t) as f64 * gains[t * d + c] as f64;
                }
                let logit = self.cfg.alpha as f64 * x[c] as f64 + prompt_term;
                p_plus.push((1.0 / (1.0 + (-logit).exp())) as f32);
            }
        }
        Ok(Prediction {
            probs: ProbGrid::new(input.height(), input.width(), d, p_plus)?,
            attention: AttentionMaps { layers: vec![attn] },
        })
    }

    fn make_sos(&self, prompt: &PromptEmbedding) -> FeatureMap {
        let d = self.cfg.feature_dim;
        let mean = prompt.mean_vector();
        let data = (0..d)
            .map(|c| {
                (0..EMBED_DIM)
                    .map(|e| mean[e] as f64 * self.sos_projection[e * d + c] as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        FeatureMap::from_vec(1, 1, d, data).expect("sos shape")
    }

    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn attention_layers(&self) -> usize {
        1
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([Backend::Synthetic as u8]);
        h.update(self.config_bytes());
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textenc::encode_prompt;

    #[test]
    fn zero_input_null_prompt_is_half() {
        let m = SyntheticModel::new(SyntheticConfig::default());
        let p = m.predict(&FeatureMap::zeros(4, 4, 32), &encode_prompt(""), None).unwrap();
        assert!(p.probs.p_plus().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_token_change_is_local() {
        let m = SyntheticModel::new(SyntheticConfig::default());
        let (a, b) = (encode_prompt("a red circle"), encode_prompt("a green circle"));
        let data: Vec<f32> = (0..2 * 2 * 32).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.5).collect();
        let x = FeatureMap::from_vec(2, 2, 32, data).unwrap();
        let (pa, pb) = (m.predict(&x, &a, None).unwrap(), m.predict(&x, &b, None).unwrap());
        let (ra, gr) = (a.token_ids[1], b.token_ids[1]);
        let mut differing = 0;
        for i in 0..4 {
            for c in 0..32 {
                let expect_same = m.token_gain(ra, c) == m.token_gain(gr, c);
                let same = pa.probs.p_plus_at(i, c) == pb.probs.p_plus_at(i, c);
                assert_eq!(same, expect_same, "position {i} channel {c}");
                differing += (!same) as usize;
                // Analytic value.
                let logit: f64 = 2.0 * x.vector_at(i)[c] as f64
                    + b.token_ids.iter().map(|&t| m.token_gain(t, c) as f64).sum::<f64>();
                let want = 1.0 / (1.0 + (-logit).exp());
                assert!((pb.probs.p_plus_at(i, c) as f64 - want).abs() < 1e-6);
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn sos_is_mean_then_project() {
        let m = SyntheticModel::new(SyntheticConfig::default());
        assert!(m.make_sos(&encode_prompt("")).data().iter().all(|&v| v == 0.0));
        let p = encode_prompt("red circle");
        let sos = m.make_sos(&p);
        assert_eq!(sos, m.make_sos(&p));
        for c in 0..32 {
            let mut want = 0.0f64;
            for e in 0..EMBED_DIM {
                let mean = (p.vector(0)[e] as f64 + p.vector(1)[e] as f64) / 2.0;
                want += mean * m.sos_projection()[e * 32 + c] as f64;
            }
            assert!((sos.data()[c] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gains_take_three_values() {
        let m = SyntheticModel::new(SyntheticConfig::default());
        let mut seen = std::collections::HashSet::new();
        for c in 0..32 {
            seen.insert(m.token_gain(1234, c).to_bits());
        }
        assert_eq!(seen.len(), 3);
        assert!((0..32).all(|c| m.token_gain(NULL_TOKEN, c) == 0.0));
    }
}
