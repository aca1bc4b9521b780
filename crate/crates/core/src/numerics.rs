//! Dense real-valued grids, RGB images, bilinear resampling and per-bit sampling.
//!
//! Resampling uses half-pixel centres (align-corners off): output cell `i` of
//! `n_out` samples the source at `(i + 0.5) * n_in / n_out - 0.5`, clamped to
//! the valid range. Interpolation weights and sums are evaluated in `f64` and
//! stored as `f32`.

use std::path::Path;

use rand::RngCore;

use crate::error::{Error, Result};

/// A `height x width x channels` grid of reals, row-major by (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                height * width * channels,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FeatureMap::from_vec"));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// The `channels`-long vector stored at one position.
    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn vector_at(&self, position: usize) -> &[f32] {
        let start = position * self.channels;
        &self.data[start..start + self.channels]
    }


    /// Element-wise `self - other`.
    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if self.shape() != other.shape() {
            return Err(Error::shape("FeatureMap::sub", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(FeatureMap { data, ..*self })
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "FeatureMap::max_abs_diff",
                self.shape(),
                other.shape(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Source taps for one output index along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

fn resize(src: &FeatureMap, target_h: usize, target_w: usize) -> FeatureMap {
    if (target_h, target_w) == (src.height, src.width) {
        return src.clone();
    }
    let c = src.channels;
    let rows = axis_taps(src.height, target_h);
    let cols = axis_taps(src.width, target_w);
    let mut out = Vec::with_capacity(target_h * target_w * c);
    let at = |r: usize, q: usize, ch: usize| src.data[(r * src.width + q) * c + ch] as f64;
    for ty in &rows {
        for tx in &cols {
            for ch in 0..c {
                let top = at(ty.lo, tx.lo, ch) * (1.0 - tx.frac) + at(ty.lo, tx.hi, ch) * tx.frac;
                let bottom = at(ty.hi, tx.lo, ch) * (1.0 - tx.frac) + at(ty.hi, tx.hi, ch) * tx.frac;
                out.push((top * (1.0 - ty.frac) + bottom * ty.frac) as f32);
            }
        }
    }
    FeatureMap {
        height: target_h,
        width: target_w,
        channels: c,
        data: out,
    }
}

/// Bilinear upsampling to a shape at least as large as the source.
pub fn upsample_bilinear(src: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h < src.height || target_w < src.width {
        return Err(Error::InvalidArgument(format!(
            "upsample to {target_h}x{target_w} would shrink a {}x{} grid",
            src.height, src.width
        )));
    }
    Ok(resize(src, target_h, target_w))
}

/// Bilinear downsampling to a shape no larger than the source.
pub fn downsample_bilinear(src: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h > src.height || target_w > src.width || target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample to {target_h}x{target_w} is not a shrink of a {}x{} grid",
            src.height, src.width
        )));
    }
    Ok(resize(src, target_h, target_w))
}

/// Probability of the positive bit after temperature scaling.
pub fn tempered_p_plus(p_plus: f32, temperature: f32) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_plus) {
        return Err(Error::InvalidArgument(format!(
            "probability {p_plus} outside [0, 1]"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let p = p_plus as f64;
    if p == 0.0 || p == 1.0 || temperature == 1.0 {
        return Ok(p);
    }
    let inv_t = 1.0 / temperature as f64;
    let plus = p.powf(inv_t);
    let minus = (1.0 - p).powf(inv_t);
    Ok(plus / (plus + minus))
}

/// Draws one bit: `true` with probability `p+^(1/T) / (p+^(1/T) + p-^(1/T))`.
pub fn bernoulli_sample<R: RngCore + ?Sized>(
    p_plus: f32,
    temperature: f32,
    rng: &mut R,
) -> Result<bool> {
    let p = tempered_p_plus(p_plus, temperature)?;
    // 53 random mantissa bits; u in [0, 1) so p = 1 always fires and p = 0 never does.
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    Ok(u < p)
}

/// Deterministic decision without randomness: ties go to the positive bit.
pub fn most_likely_bit(p_plus: f32) -> bool {
    p_plus >= 0.5
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator: the stream for a given `(seed, scale, index)` is
/// independent of evaluation order, so per-bit sampling can run in any order.
#[derive(Clone, Debug)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { state: mix64(seed) }
    }

    pub fn for_bit(seed: u64, scale: usize, index: usize) -> Self {
        let s = mix64(seed ^ mix64((scale as u64).wrapping_add(1).wrapping_mul(GOLDEN)));
        CounterRng {
            state: mix64(s ^ (index as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)),
        }
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// An 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape("Image::new", width * height * 3, pixels.len()));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::new(w as usize, h as usize, img.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_png_bytes(&bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Writes a single-channel 8-bit PNG.
pub fn gray_png_bytes(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape("gray_png_bytes", width * height, values.len()));
    }
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        values,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn grid(h: usize, w: usize, vals: &[f32]) -> FeatureMap {
        FeatureMap::from_vec(h, w, 1, vals.to_vec()).unwrap()
    }

    /// Scalar half-pixel bilinear sample, written independently of `axis_taps`.
    fn oracle_sample(src: &FeatureMap, th: usize, tw: usize, r: usize, q: usize) -> f64 {
        let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let mut s = (2.0 * i as f64 + 1.0) * n_in as f64 / (2.0 * n_out as f64) - 0.5;
            if s < 0.0 {
                s = 0.0;
            }
            if s > (n_in - 1) as f64 {
                s = (n_in - 1) as f64;
            }
            let a = s as usize;
            let b = if a + 1 < n_in { a + 1 } else { a };
            (a, b, s - a as f64)
        };
        let (y0, y1, fy) = coord(r, src.height(), th);
        let (x0, x1, fx) = coord(q, src.width(), tw);
        let v = |y, x| src.get(y, x, 0) as f64;
        v(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + v(y0, x1) * (1.0 - fy) * fx
            + v(y1, x0) * fy * (1.0 - fx)
            + v(y1, x1) * fy * fx
    }

    #[test]
    fn upsample_constant_one_by_one() {
        let up = upsample_bilinear(&grid(1, 1, &[2.5]), 2, 2).unwrap();
        assert_eq!(up.data(), &[2.5; 4]);
    }

    #[test]
    fn same_shape_is_identity() {
        let g = grid(2, 3, &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]);
        assert_eq!(upsample_bilinear(&g, 2, 3).unwrap(), g);
        assert_eq!(downsample_bilinear(&g, 2, 3).unwrap(), g);
    }

    #[test]
    fn upsample_two_by_two_matches_oracle() {
        let g = grid(2, 2, &[1.0, 3.0, 5.0, 7.0]);
        let up = upsample_bilinear(&g, 4, 4).unwrap();
        // Frozen from the scalar oracle: rows sample y = -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped 1).
        let expected = [
            1.0, 1.5, 2.5, 3.0, //
            2.0, 2.5, 3.5, 4.0, //
            4.0, 4.5, 5.5, 6.0, //
            5.0, 5.5, 6.5, 7.0,
        ];
        for r in 0..4 {
            for q in 0..4 {
                let o = oracle_sample(&g, 4, 4, r, q);
                assert!((o - expected[r * 4 + q] as f64).abs() < 1e-12);
                assert_eq!(up.get(r, q, 0), expected[r * 4 + q]);
            }
        }
    }

    #[test]
    fn downsample_cases() {
        let c = FeatureMap::filled(4, 4, 3, 0.75);
        let d = downsample_bilinear(&c, 2, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.75));

        let g = grid(2, 2, &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(downsample_bilinear(&g, 1, 1).unwrap().data(), &[4.0]);
    }

    #[test]
    fn downsample_random_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f32> = (0..64).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let g = grid(8, 8, &vals);
        let d = downsample_bilinear(&g, 3, 3).unwrap();
        for r in 0..3 {
            for q in 0..3 {
                let o = oracle_sample(&g, 3, 3, r, q);
                assert!((d.get(r, q, 0) as f64 - o).abs() < 1e-6, "cell {r},{q}");
            }
        }
    }

    #[test]
    fn shape_contract_errors() {
        let g = FeatureMap::zeros(4, 4, 1);
        assert!(matches!(upsample_bilinear(&g, 2, 8), Err(Error::InvalidArgument(_))));
        assert!(matches!(downsample_bilinear(&g, 8, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bernoulli_degenerate_and_invalid() {
        let mut rng = CounterRng::new(3);
        for t in [0.1, 1.0, 7.0] {
            for _ in 0..100 {
                assert!(bernoulli_sample(1.0, t, &mut rng).unwrap());
                assert!(!bernoulli_sample(0.0, t, &mut rng).unwrap());
            }
        }
        assert!(bernoulli_sample(1.5, 1.0, &mut rng).is_err());
        assert!(bernoulli_sample(-0.1, 1.0, &mut rng).is_err());
        assert!(bernoulli_sample(0.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_frequency() {
        let mut rng = CounterRng::new(2024);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| bernoulli_sample(0.7, 1.0, &mut rng).unwrap())
            .count();
        let mean = hits as f64 / n as f64;
        assert!((mean - 0.7).abs() < 0.01, "empirical mean {mean}");
    }

    #[test]
    fn bernoulli_reproducible() {
        let draw = |seed| {
            let mut rng = CounterRng::new(seed);
            (0..256)
                .map(|i| bernoulli_sample(i as f32 / 255.0, 0.8, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn tie_goes_positive() {
        assert!(most_likely_bit(0.5));
        assert!(!most_likely_bit(0.4999));
    }

    fn arb_grid() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                Just(h),
                Just(w),
                prop::collection::vec(-10.0f32..10.0, h * w * 2),
                prop::collection::vec(-10.0f32..10.0, h * w * 2),
            )
        })
    }

    proptest! {
        #[test]
        fn resampling_is_linear((h, w, a, b) in arb_grid(), alpha in -3.0f32..3.0, beta in -3.0f32..3.0,
                                th in 1usize..12, tw in 1usize..12) {
            let fa = FeatureMap::from_vec(h, w, 2, a.clone()).unwrap();
            let fb = FeatureMap::from_vec(h, w, 2, b.clone()).unwrap();
            let mix: Vec<f32> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
            let fm = FeatureMap::from_vec(h, w, 2, mix).unwrap();
            let op = |f: &FeatureMap| if th >= h && tw >= w {
                upsample_bilinear(f, th, tw).unwrap()
            } else if th <= h && tw <= w {
                downsample_bilinear(f, th, tw).unwrap()
            } else {
                resize(f, th, tw)
            };
            let (ra, rb, rm) = (op(&fa), op(&fb), op(&fm));
            // Relative to the input magnitude: the f32 mix itself rounds at that scale.
            let amax = a.iter().chain(&b).fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = 1.0f64.max(((alpha.abs() + beta.abs()) * amax) as f64);
            for i in 0..rm.data().len() {
                let want = alpha as f64 * ra.data()[i] as f64 + beta as f64 * rb.data()[i] as f64;
                let got = rm.data()[i] as f64;
                prop_assert!((got - want).abs() <= 1e-6 * scale, "{got} vs {want}");
            }
        }

        #[test]
        fn constant_round_trip(h in 1usize..5, w in 1usize..5, k in 1usize..4, v in -5.0f32..5.0) {
            let c = FeatureMap::filled(h, w, 3, v);
            let up = upsample_bilinear(&c, h * k + 1, w * k).unwrap();
            let back = downsample_bilinear(&up, h, w).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
