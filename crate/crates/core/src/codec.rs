//! Fixed patch transform between RGB images and latent feature maps.
//!
//! Each `p x p` patch is flattened to `3p²` values (row, col, rgb), centred
//! on mid-grey, scaled by `gain` and multiplied by a `3p² x d` projection with
//! orthonormal columns. Decoding applies the transpose and clamps.
//!
//! The projection is seeded but structured: the first block of columns spans
//! the per-colour patch means (so flat colours are representable), the rest
//! is a seeded orthonormal mix of the lowest-frequency cosine patterns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Image};

/// Pixel value that encodes to the zero feature.
pub const CENTER: f32 = 0.5;

/// Parameters of the patch transform; the projection is rebuilt from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams {
    patch_size: usize,
    feature_dim: usize,
    gain: f32,
    seed: u64,
    /// Row-major `3p² x d`.
    projection: Vec<f32>,
}

/// Serializable description from which [`CodecParams`] are regenerated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub feature_dim: usize,
    pub gain: f32,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            patch_size: 4,
            feature_dim: 32,
            gain: 1.2,
            seed: 0,
        }
    }
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams::new(CodecConfig::default()).expect("default codec config is valid")
    }
}

/// Orthonormal 2-D DCT-II patterns, ordered by `(u + v, u)`, each `p x p` row-major.
fn dct_patterns(p: usize) -> Vec<Vec<f64>> {
    let mut freqs: Vec<(usize, usize)> = (0..p).flat_map(|u| (0..p).map(move |v| (u, v))).collect();
    freqs.sort_by_key(|&(u, v)| (u + v, u));
    let pi = std::f64::consts::PI;
    freqs
        .into_iter()
        .map(|(u, v)| {
            let mut m: Vec<f64> = (0..p * p)
                .map(|i| {
                    let (y, x) = (i / p, i % p);
                    (pi * (2 * y + 1) as f64 * u as f64 / (2 * p) as f64).cos()
                        * (pi * (2 * x + 1) as f64 * v as f64 / (2 * p) as f64).cos()
                })
                .collect();
            let n = m.iter().map(|a| a * a).sum::<f64>().sqrt();
            m.iter_mut().for_each(|a| *a /= n);
            m
        })
        .collect()
}

/// In-place modified Gram-Schmidt over `rows`, dropping rows that become
/// (numerically) dependent on earlier ones.
fn orthonormalize(rows: Vec<Vec<f64>>, basis: &mut Vec<Vec<f64>>, want: usize) {
    for mut r in rows {
        if basis.len() == want {
            break;
        }
        for b in basis.iter() {
            let dot: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            r.iter_mut().for_each(|a| *a /= n);
            basis.push(r);
        }
    }
}

fn build_projection(p: usize, d: usize, seed: u64) -> Vec<f32> {
    let n = 3 * p * p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = dct_patterns(p);
    let colour_vec = |pattern: &[f64], ch: usize| {
        let mut v = vec![0.0f64; n];
        for (i, &a) in pattern.iter().enumerate() {
            v[i * 3 + ch] = a;
        }
        v
    };

    // M: which colour mean each column carries, with a seeded sign.
    let dc_rows = d.min(3);
    let mut assign: Vec<usize> = (0..d).map(|i| i * dc_rows / d).collect();
    for i in (1..d).rev() {
        assign.swap(i, rng.random_range(0..=i));
    }
    let counts: Vec<usize> = (0..dc_rows).map(|c| assign.iter().filter(|&&a| a == c).count()).collect();
    let mut m = vec![vec![0.0f64; d]; dc_rows];
    for (col, &c) in assign.iter().enumerate() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        m[c][col] = sign / (counts[c] as f64).sqrt();
    }

    // V: orthonormal complement of M's rows in R^d (d x (d - dc_rows)).
    let mut basis = m.clone();
    let unit = (0..d).map(|i| {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    });
    orthonormalize(unit.collect(), &mut basis, d);
    let v = &basis[dc_rows..];
    let ac = d - dc_rows;

    // R: seeded rotation of the AC block.
    let raw: Vec<Vec<f64>> = (0..ac)
        .map(|_| (0..ac).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut rot = Vec::with_capacity(ac);
    orthonormalize(raw, &mut rot, ac);

    // Lowest-frequency AC colour patterns, channel-interleaved.
    let ac_cols: Vec<Vec<f64>> = patterns[1..]
        .iter()
        .flat_map(|pat| (0..3).map(move |ch| (pat, ch)))
        .take(ac)
        .map(|(pat, ch)| colour_vec(pat, ch))
        .collect();
    let dc_cols: Vec<Vec<f64>> = (0..dc_rows).map(|ch| colour_vec(&patterns[0], ch)).collect();

    // P = D·M + A·R·Vᵀ.
    let mut proj = vec![0.0f64; n * d];
    for (c, dc) in dc_cols.iter().enumerate() {
        for row in 0..n {
            for col in 0..d {
                proj[row * d + col] += dc[row] * m[c][col];
            }
        }
    }
    for (a, ac_col) in ac_cols.iter().enumerate() {
        for (b, v_row) in v.iter().enumerate() {
            let coef = rot[a][b];
            for row in 0..n {
                if ac_col[row] == 0.0 {
                    continue;
                }
                for col in 0..d {
                    proj[row * d + col] += ac_col[row] * coef * v_row[col];
                }
            }
        }
    }
    proj.into_iter().map(|x| x as f32).collect()
}

impl CodecParams {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        let CodecConfig {
            patch_size: p,
            feature_dim: d,
            gain,
            seed,
        } = cfg;
        if p == 0 || d == 0 {
            return Err(Error::InvalidArgument("patch size and feature dim must be positive".into()));
        }
        if d > 3 * p * p {
            return Err(Error::InvalidArgument(format!(
                "feature dim {d} exceeds patch dimension {}",
                3 * p * p
            )));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::InvalidArgument(format!("gain {gain} must be positive")));
        }
        Ok(CodecParams {
            patch_size: p,
            feature_dim: d,
            gain,
            seed,
            projection: build_projection(p, d, seed),
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        CodecParams::new(CodecConfig {
            seed,
            ..CodecConfig::default()
        })
        .expect("default codec config is valid")
    }

    pub fn config(&self) -> CodecConfig {
        CodecConfig {
            patch_size: self.patch_size,
            feature_dim: self.feature_dim,
            gain: self.gain,
            seed: self.seed,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn gain(&self) -> f32 {
        self.gain
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `3p² x d` projection matrix.
    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn latent_shape(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if width % p != 0 || height % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }

    pub fn encode_image(&self, img: &Image) -> Result<FeatureMap> {
        let (h, w) = self.latent_shape(img.width(), img.height())?;
        let (p, d, n) = (self.patch_size, self.feature_dim, self.patch_len());
        let mut out = Vec::with_capacity(h * w * d);
        let mut patch = vec![0.0f32; n];
        let pixels = img.pixels();
        for py in 0..h {
            for px in 0..w {
                for y in 0..p {
                    for x in 0..p {
                        let src = ((py * p + y) * img.width() + px * p + x) * 3;
                        for ch in 0..3 {
                            let v = pixels[src + ch] as f32 / 255.0;
                            patch[(y * p + x) * 3 + ch] = self.gain * (v - CENTER);
                        }
                    }
                }
                for col in 0..d {
                    let mut acc = 0.0f64;
                    for (row, &v) in patch.iter().enumerate() {
                        acc += v as f64 * self.projection[row * d + col] as f64;
                    }
                    out.push(acc as f32);
                }
            }
        }
        FeatureMap::from_vec(h, w, d, out)
    }

    pub fn decode_feature(&self, f: &FeatureMap) -> Result<Image> {
        let (h, w, d) = f.shape();
        if d != self.feature_dim {
            return Err(Error::shape("decode_feature channels", self.feature_dim, d));
        }
        let (p, n) = (self.patch_size, self.patch_len());
        let (width, height) = (w * p, h * p);
        let mut pixels = vec![0u8; width * height * 3];
        for py in 0..h {
            for px in 0..w {
                let z = f.vector(py, px);
                for row in 0..n {
                    let proj = &self.projection[row * d..(row + 1) * d];
                    let acc: f64 = proj.iter().zip(z).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let v = (acc / self.gain as f64 + CENTER as f64).clamp(0.0, 1.0);
                    let (y, x, ch) = (row / (3 * p), (row / 3) % p, row % 3);
                    pixels[((py * p + y) * width + px * p + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Image::new(width, height, pixels)
    }
}
