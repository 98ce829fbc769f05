//! Paired photo/sketch manifests, image decoding and preprocessing.
//!
//! A manifest is JSON-lines, one `{"id", "photo", "sketch", "split"}` record
//! per line. Relative image paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub photo: PathBuf,
    pub sketch: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Check id uniqueness per split and train/test disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<(Split, &str)> = HashSet::new();
        for e in &self.entries {
            if !seen.insert((e.split, e.id.as_str())) {
                return Err(Error::DuplicateId {
                    id: e.id.clone(),
                    split: e.split.to_string(),
                });
            }
        }
        for e in self.entries.iter().filter(|e| e.split == Split::Train) {
            if seen.contains(&(Split::Test, e.id.as_str())) {
                return Err(Error::SplitLeak(e.id.clone()));
            }
        }
        Ok(())
    }

    /// Write as JSON-lines; paths are written as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parse, resolve and validate a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::ManifestParse {
            line: i + 1,
            message: err.to_string(),
        })?;
        e.photo = resolve(base, &e.photo);
        e.sketch = resolve(base, &e.sketch);
        for p in [&e.photo, &e.sketch] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        entries.push(e);
    }
    let m = Manifest { entries };
    m.validate()?;
    Ok(m)
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub flip_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 256,
            flip_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < 16 || self.target_size % 2 != 0 {
            return Err(Error::Config(format!(
                "target_size must be even and >= 16, got {}",
                self.target_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `[0, 255] -> [-1, 1]`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding and clamping to the 8-bit lattice.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decode any supported image into 8-bit RGB; grayscale expands to three channels.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    Ok(img.to_rgb8())
}

fn to_tensor(img: &RgbImage, flip: bool) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |k| {
        let c = k / (h * w);
        let y = (k / w) % h;
        let mut x = k % w;
        if flip {
            x = w - 1 - x;
        }
        normalize(raw[(y * w + x) * 3 + c])
    })
}

fn resized(raw: &RgbImage, size: usize) -> RgbImage {
    if raw.width() as usize == size && raw.height() as usize == size {
        raw.clone()
    } else {
        image::imageops::resize(raw, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Bilinear resize to `target_size` square, map to `[-1, 1]`, and in
/// training mode mirror horizontally with `flip_probability`.
pub fn preprocess(raw: &RgbImage, config: &PreprocessConfig, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    config.validate()?;
    let flip = training && rng.random_bool(config.flip_probability);
    Ok(to_tensor(&resized(raw, config.target_size), flip))
}

/// Preprocess a photo and its sketch with one shared flip decision so the
/// pair stays pixel-aligned.
pub fn preprocess_pair(
    photo: &RgbImage,
    sketch: &RgbImage,
    config: &PreprocessConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    config.validate()?;
    let flip = training && rng.random_bool(config.flip_probability);
    Ok((
        to_tensor(&resized(photo, config.target_size), flip),
        to_tensor(&resized(sketch, config.target_size), flip),
    ))
}

/// Convert a `[3, H, W]` (or `[1, 3, H, W]`) tensor in `[-1, 1]` to an 8-bit image.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected one RGB image, got {s:?}"))),
    };
    let d = t.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(denormalize(d[c * h * w + y * w + x]));
            }
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image"))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let img = tensor_to_image(t)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Invalid(format!("{}: {other}", path.display())),
        })
}

/// One aligned photo/sketch pair, preprocessed.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub photo: Tensor,
    pub sketch: Tensor,
}

/// Decoded 8-bit images of one split, kept in memory for repeated epochs.
#[derive(Clone, Debug)]
pub struct PairCache {
    pub ids: Vec<String>,
    pub photos: Vec<RgbImage>,
    pub sketches: Vec<RgbImage>,
}

impl PairCache {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let entries = manifest.split(split);
        if entries.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let mut cache = PairCache {
            ids: Vec::new(),
            photos: Vec::new(),
            sketches: Vec::new(),
        };
        for e in entries {
            cache.ids.push(e.id.clone());
            cache.photos.push(load_image(&e.photo)?);
            cache.sketches.push(load_image(&e.sketch)?);
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pair(&self, i: usize, config: &PreprocessConfig, training: bool, rng: &mut impl Rng) -> Result<ImagePair> {
        let (photo, sketch) = preprocess_pair(&self.photos[i], &self.sketches[i], config, training, rng)?;
        Ok(ImagePair {
            id: self.ids[i].clone(),
            photo,
            sketch,
        })
    }
}

/// Stack pairs into `[N, 3, S, S]` photo and sketch batches.
pub fn stack_pairs(pairs: &[ImagePair]) -> Result<(Tensor, Tensor)> {
    let lift = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(&s)
    };
    let photos = pairs.iter().map(|p| lift(&p.photo)).collect::<Result<Vec<_>>>()?;
    let sketches = pairs.iter().map(|p| lift(&p.sketch)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&photos)?, Tensor::stack(&sketches)?))
}

/// Index batches for one epoch; shuffled from `(seed, epoch)` when requested.
pub fn epoch_batches(len: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Single-consumer stream of manifest-entry batches over one split.
pub struct BatchIterator<'a> {
    entries: Vec<&'a ManifestEntry>,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Iterator for BatchIterator<'a> {
    type Item = Vec<&'a ManifestEntry>;

    fn next(&mut self) -> Option<Self::Item> {
        self.batches
            .next()
            .map(|b| b.into_iter().map(|i| self.entries[i]).collect())
    }
}

pub fn batch_iterator<'a>(
    manifest: &'a Manifest,
    split: Split,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIterator<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let batches = epoch_batches(entries.len(), batch_size, shuffle, seed, 0);
    Ok(BatchIterator {
        entries,
        batches: batches.into_iter(),
    })
}
