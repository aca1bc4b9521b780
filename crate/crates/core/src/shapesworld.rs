//! Procedural corpus of one flat-coloured shape on a flat background, with captions.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Image;

/// The eight corners of the RGB cube.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
];

pub fn palette_rgb(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|&(_, rgb)| rgb)
}

/// Index into [`PALETTE`] of the colour closest to `rgb` (squared distance, first wins ties).
pub fn nearest_palette(rgb: [u8; 3]) -> usize {
    let dist = |p: [u8; 3]| -> i32 {
        (0..3).map(|c| (rgb[c] as i32 - p[c] as i32).pow(2)).sum()
    };
    (0..PALETTE.len())
        .min_by_key(|&i| dist(PALETTE[i].1))
        .expect("palette is non-empty")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl NamedColor {
    fn from_palette(i: usize) -> Self {
        NamedColor {
            name: PALETTE[i].0.to_string(),
            rgb: PALETTE[i].1,
        }
    }
}

/// Everything needed to render a scene; the object mask is derived by [`SceneSpec::object_mask`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub background: NamedColor,
    pub shape: Shape,
    pub color: NamedColor,
    /// `(x, y)` in pixels.
    pub center: (f32, f32),
    /// Half extent in pixels.
    pub radius: f32,
    pub caption: String,
}

pub fn caption(color: &str, shape: Shape, background: &str) -> String {
    format!("a {color} {} on a {background} background", shape.name())
}

impl SceneSpec {
    /// Whether the pixel whose centre is `(x + 0.5, y + 0.5)` belongs to the object.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let (cx, cy, r) = (self.center.0, self.center.1, self.radius);
        match self.shape {
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            // Apex up; the base spans the full width 2r at py = cy + r.
            Shape::Triangle => {
                py >= cy - r && py <= cy + r && (px - cx).abs() <= (py - (cy - r)) / 2.0
            }
        }
    }

    /// Row-major object flags, `size x size`.
    pub fn object_mask(&self) -> Vec<bool> {
        (0..self.size * self.size)
            .map(|i| self.contains(i % self.size, i / self.size))
            .collect()
    }

    pub fn render(&self) -> Image {
        let mut img = Image::filled(self.size, self.size, self.background.rgb);
        for y in 0..self.size {
            for x in 0..self.size {
                if self.contains(x, y) {
                    img.set_pixel(x, y, self.color.rgb);
                }
            }
        }
        img
    }

    /// The same scene with the object recoloured; `None` for names outside the palette.
    pub fn recolored(&self, color: &str) -> Option<SceneSpec> {
        let rgb = palette_rgb(color)?;
        Some(SceneSpec {
            color: NamedColor {
                name: color.to_string(),
                rgb,
            },
            caption: caption(color, self.shape, &self.background.name),
            ..self.clone()
        })
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn scene(seed: u64, index: usize, size: usize) -> SceneSpec {
    let mut rng = scene_rng(seed, index);
    let bg = rng.random_range(0..PALETTE.len());
    let fg = (bg + rng.random_range(1..PALETTE.len())) % PALETTE.len();
    let shape = Shape::ALL[rng.random_range(0..3)];
    let s = size as f32;
    let center = (rng.random_range(s / 4.0..3.0 * s / 4.0), rng.random_range(s / 4.0..3.0 * s / 4.0));
    let radius = rng.random_range(s / 8.0..s / 4.0);
    let (background, color) = (NamedColor::from_palette(bg), NamedColor::from_palette(fg));
    SceneSpec {
        size,
        caption: caption(&color.name, shape, &background.name),
        background,
        shape,
        color,
        center,
        radius,
    }
}

/// `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate(seed: u64, count: usize, image_size: usize) -> Result<Vec<(Image, SceneSpec)>> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    Ok((0..count)
        .map(|i| {
            let spec = scene(seed, i, image_size);
            (spec.render(), spec)
        })
        .collect())
}

/// Fraction of masked pixels whose nearest palette colour is the palette colour nearest `color`.
pub fn region_color_score(img: &Image, mask: &[bool], color: [u8; 3]) -> Result<f64> {
    if mask.len() != img.width() * img.height() {
        return Err(Error::shape("region_color_score mask", img.width() * img.height(), mask.len()));
    }
    let target = nearest_palette(color);
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        total += 1;
        if nearest_palette(img.pixel(i % img.width(), i / img.width())) == target {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Serialize, Deserialize)]
struct MetadataLine {
    file: String,
    #[serde(flatten)]
    spec: SceneSpec,
}

pub const METADATA_FILE: &str = "metadata.jsonl";

/// Writes `images/NNNNN.png` and one JSON line per scene to `metadata.jsonl`.
pub fn write_corpus(dir: &Path, items: &[(Image, SceneSpec)]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let meta_path = dir.join(METADATA_FILE);
    let file = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta = BufWriter::new(file);
    for (i, (img, spec)) in items.iter().enumerate() {
        let name = format!("images/{i:05}.png");
        img.save_png(dir.join(&name))?;
        let line = MetadataLine {
            file: name,
            spec: spec.clone(),
        };
        serde_json::to_writer(&mut meta, &line)?;
        meta.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Vec<(Image, SceneSpec)>> {
    let meta_path = dir.join(METADATA_FILE);
    let file = File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&meta_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: MetadataLine = serde_json::from_str(&line)?;
        out.push((Image::load_png(dir.join(&entry.file))?, entry.spec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(generate(3, 20, 64).unwrap(), generate(3, 20, 64).unwrap());
        assert_ne!(generate(3, 5, 64).unwrap(), generate(4, 5, 64).unwrap());
        // Scene i does not depend on how many scenes are requested.
        assert_eq!(generate(3, 20, 64).unwrap()[7], generate(3, 8, 64).unwrap()[7]);
    }

    #[test]
    fn object_pixels_have_object_colour() {
        for (img, spec) in generate(11, 200, 64).unwrap() {
            let mask = spec.object_mask();
            let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            assert!(!inside.is_empty());
            let close = inside
                .iter()
                .filter(|&&i| {
                    let p = img.pixel(i % 64, i / 64);
                    (0..3).all(|c| (p[c] as i32 - spec.color.rgb[c] as i32).abs() <= 30)
                })
                .count();
            assert!(close as f64 >= 0.95 * inside.len() as f64);
            assert_ne!(spec.color.rgb, spec.background.rgb);
            assert_eq!(spec.caption, caption(&spec.color.name, spec.shape, &spec.background.name));
            for (i, &m) in mask.iter().enumerate() {
                let want = if m { spec.color.rgb } else { spec.background.rgb };
                assert_eq!(img.pixel(i % 64, i / 64), want);
            }
        }
    }

    #[test]
    fn coverage_of_thousand() {
        let corpus = generate(0, 1000, 64).unwrap();
        let mut shapes = std::collections::HashSet::new();
        let mut colors = std::collections::HashSet::new();
        for (_, s) in &corpus {
            shapes.insert(s.shape);
            colors.insert(s.color.name.clone());
        }
        assert_eq!(shapes.len(), 3);
        assert!(colors.len() >= 6);
    }

    #[test]
    fn color_score_cases() {
        let red = Image::filled(4, 4, [255, 0, 0]);
        let all = vec![true; 16];
        assert_eq!(region_color_score(&red, &all, [255, 0, 0]).unwrap(), 1.0);
        assert_eq!(region_color_score(&red, &all, [0, 0, 255]).unwrap(), 0.0);
        let mut half = red.clone();
        for y in 0..4 {
            for x in 0..2 {
                half.set_pixel(x, y, [0, 0, 255]);
            }
        }
        assert_eq!(region_color_score(&half, &all, [255, 0, 0]).unwrap(), 0.5);
        assert!(region_color_score(&red, &[false; 16], [255, 0, 0]).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = generate(5, 4, 32).unwrap();
        write_corpus(dir.path(), &items).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), items);
    }

    #[test]
    fn recolor_keeps_geometry() {
        let s = scene(1, 0, 64);
        let t = s.recolored("green").unwrap();
        assert_eq!(t.object_mask(), s.object_mask());
        assert_eq!(t.caption, format!("a green {} on a {} background", s.shape.name(), s.background.name));
        assert!(s.recolored("purple").is_none());
    }
}
