//! Paired rainy/clean images: PNG I/O, synthetic rain, patch sampling and
//! corpus directories.
//!
//! A corpus root holds `rainy/<id>.png` and `clean/<id>.png`; pairs are
//! matched by file stem and kept sorted by id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, ImageError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An aligned rainy/clean pair, each `1 x 3 x H x W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, rainy: Tensor<f32>, clean: Tensor<f32>) -> Result<Self> {
        if rainy.shape() != clean.shape() || rainy.shape()[0] != 1 || rainy.shape()[1] != 3 {
            return Err(Error::Shape {
                op: "image pair",
                lhs: rainy.shape(),
                rhs: clean.shape(),
            });
        }
        Ok(ImagePair {
            id: id.into(),
            rainy,
            clean,
        })
    }

    pub fn height(&self) -> usize {
        self.clean.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.clean.shape()[3]
    }
}

/// Reads an 8-bit RGB PNG as a `1 x 3 x H x W` tensor of `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::Missing(path.to_path_buf()),
        _ => ImageError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
    })?;
    let img =
        image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| ImageError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(ImageError::NotRgb {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            }
            .into())
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

/// Quantizes `round(v * 255)` (clamped) and writes an 8-bit RGB PNG.
pub fn save_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let [n, c, h, w] = img.shape();
    if n != 1 || c != 3 {
        return Err(Error::contract(format!(
            "can only save a single RGB image, got shape {:?}",
            img.shape()
        )));
    }
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.at(0, ch, y, x).as_f64();
                raw[(y * w + x) * 3 + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    image::save_buffer_with_format(
        path,
        &raw,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| {
        ImageError::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

/// Parameters of the additive streak model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainParams {
    /// Probability that a pixel seeds a streak.
    pub density: f64,
    /// Streak direction in degrees clockwise from vertical.
    pub angle: f64,
    /// Streak length in pixels.
    pub length: usize,
    /// Peak brightness added by a streak.
    pub intensity: f64,
    pub seed: u64,
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density) || !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::config(format!(
                "rain density {} and intensity {} must lie in [0, 1]",
                self.density, self.intensity
            )));
        }
        if self.length == 0 || !self.angle.is_finite() {
            return Err(Error::config("rain streaks need a positive length and a finite angle"));
        }
        Ok(())
    }
}

/// Pixel offsets of a centered line of `length` pixels at `angle` degrees.
fn line_offsets(length: usize, angle: f64) -> Vec<(isize, isize)> {
    let (s, c) = angle.to_radians().sin_cos();
    let mid = (length as f64 - 1.0) / 2.0;
    let mut out: Vec<(isize, isize)> = (0..length)
        .map(|t| {
            let d = t as f64 - mid;
            ((d * c).round() as isize, (d * s).round() as isize)
        })
        .collect();
    out.dedup();
    out
}

/// `H x W` streak layer in `[0, intensity]`: Bernoulli seeds stamped with an
/// oriented line, overlapping streaks saturating at full brightness.
pub fn streak_layer(h: usize, w: usize, p: &RainParams) -> Result<Vec<f32>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let offsets = line_offsets(p.length, p.angle);
    let mut layer = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if rng.gen::<f64>() >= p.density {
                continue;
            }
            let brightness = rng.gen_range(0.6..=1.0f32);
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    let v = &mut layer[yy as usize * w + xx as usize];
                    *v = (*v + brightness).min(1.0);
                }
            }
        }
    }
    let scale = p.intensity as f32;
    layer.iter_mut().for_each(|v| *v *= scale);
    Ok(layer)
}

/// Adds a streak layer to every channel of `clean` and clamps to `[0, 1]`.
pub fn synth_rain(id: impl Into<String>, clean: &Tensor<f32>, p: &RainParams) -> Result<ImagePair> {
    let [_, _, h, w] = clean.shape();
    let layer = streak_layer(h, w, p)?;
    let rainy = Tensor::from_fn(clean.shape(), |n, c, y, x| {
        let s = layer[y * w + x];
        let v = clean.at(n, c, y, x);
        if s == 0.0 {
            v
        } else {
            (v + s).clamp(0.0, 1.0)
        }
    });
    ImagePair::new(id, rainy, clean.clone())
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize, flip: bool) -> Tensor<f32> {
    Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        let sx = if flip { size - 1 - x } else { x };
        t.at(0, c, top + y, left + sx)
    })
}

/// Same random `size x size` crop of both images, mirrored horizontally
/// (both or neither) with probability 1/2 when `allow_flip` is set.
pub fn patch_sample<R: Rng + ?Sized>(
    pair: &ImagePair,
    size: usize,
    allow_flip: bool,
    rng: &mut R,
) -> Result<ImagePair> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h || size > w || !size.is_power_of_two() {
        return Err(Error::contract(format!(
            "patch size {size} must be a power of two no larger than the {h}x{w} image"
        )));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    let flip = allow_flip && rng.gen::<bool>();
    ImagePair::new(
        pair.id.clone(),
        crop(&pair.rainy, top, left, size, flip),
        crop(&pair.clean, top, left, size, flip),
    )
}

/// Loaded pairs sorted by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub pairs: Vec<ImagePair>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(ImageError::Missing(dir.to_path_buf()).into());
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

impl Corpus {
    /// Loads every `rainy/<id>.png` with its `clean/<id>.png` counterpart.
    pub fn load_dir(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(ImageError::Missing(root.to_path_buf()).into());
        }
        let rainy = png_stems(&root.join("rainy"))?;
        let clean = png_stems(&root.join("clean"))?;
        let mut pairs = Vec::with_capacity(rainy.len());
        for (id, rp) in &rainy {
            let cp = clean
                .get(id)
                .ok_or_else(|| ImageError::Missing(root.join("clean").join(format!("{id}.png"))))?;
            let r = load_png(rp)?;
            let c = load_png(cp)?;
            if r.shape() != c.shape() {
                return Err(ImageError::PairShape {
                    path: rp.clone(),
                    rainy: r.shape(),
                    clean: c.shape(),
                }
                .into());
            }
            pairs.push(ImagePair::new(id.clone(), r, c)?);
        }
        if let Some(id) = clean.keys().find(|id| !rainy.contains_key(*id)) {
            return Err(ImageError::Missing(root.join("rainy").join(format!("{id}.png"))).into());
        }
        if pairs.is_empty() {
            return Err(ImageError::Empty(root.to_path_buf()).into());
        }
        Ok(Corpus { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes every pair under `root` in the directory layout read by
    /// [`load_dir`](Self::load_dir).
    pub fn save_dir(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("rainy"))?;
        fs::create_dir_all(root.join("clean"))?;
        for p in &self.pairs {
            save_png(&p.rainy, &root.join("rainy").join(format!("{}.png", p.id)))?;
            save_png(&p.clean, &root.join("clean").join(format!("{}.png", p.id)))?;
        }
        Ok(())
    }
}

/// A smooth synthetic scene: a colour gradient with a few flat shapes and a
/// faint texture, values in `[0.05, 0.85]` so added streaks stay visible.
pub fn procedural_clean(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corner = || -> [f32; 3] {
        [
            rng.gen_range(0.1..0.7),
            rng.gen_range(0.1..0.7),
            rng.gen_range(0.1..0.7),
        ]
    };
    let corners = [corner(), corner(), corner(), corner()];
    let shapes: Vec<(bool, f32, f32, f32, [f32; 3])> = (0..rng.gen_range(3..=6))
        .map(|_| {
            (
                rng.gen::<bool>(),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.08..0.3),
                [
                    rng.gen_range(0.05..0.8),
                    rng.gen_range(0.05..0.8),
                    rng.gen_range(0.05..0.8),
                ],
            )
        })
        .collect();
    let freq = rng.gen_range(2.0..6.0f32);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let s = size as f32;
    Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        let (u, v) = (x as f32 / s, y as f32 / s);
        let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
        let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
        let mut val = top * (1.0 - v) + bottom * v;
        for &(disc, cx, cy, r, col) in &shapes {
            let inside = if disc {
                (u - cx).powi(2) + (v - cy).powi(2) < r * r
            } else {
                (u - cx).abs() < r && (v - cy).abs() < r * 0.6
            };
            if inside {
                val = col[c];
            }
        }
        val += 0.04 * (freq * std::f32::consts::TAU * (u + 0.5 * v) + phase).sin();
        val.clamp(0.05, 0.85)
    })
}

/// Rain parameters for corpus pair `index`, drawn from moderate ranges.
pub fn corpus_rain(seed: u64, index: usize) -> RainParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9).wrapping_mul(index as u64 + 1));
    RainParams {
        density: rng.gen_range(0.015..0.035),
        angle: rng.gen_range(-25.0..25.0),
        length: rng.gen_range(5..=11),
        intensity: rng.gen_range(0.45..0.75),
        seed: rng.gen(),
    }
}

/// Generates `count` pairs of `size x size` images named `pair_000`, ...
/// starting at `first_index`.
pub fn synthetic_corpus(count: usize, first_index: usize, size: usize, seed: u64) -> Result<Corpus> {
    let pairs = (first_index..first_index + count)
        .map(|i| {
            let clean = procedural_clean(size, seed ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            synth_rain(format!("pair_{i:03}"), &clean, &corpus_rain(seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { pairs })
}
