//! Procedural photo/sketch pairs for smoke tests and desk-scale runs.
//!
//! Each identity is a small set of facial-geometry parameters. The photo
//! renders it with shaded color regions; the sketch renders the same geometry
//! as dark strokes on white paper, so pairs are pixel-aligned.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            train_identities: 8,
            test_identities: 4,
            size: 64,
            seed: 7,
        }
    }
}

/// Geometry in unit coordinates, origin at the image center.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub face_w: f64,
    pub face_h: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub nose_len: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub mouth_curve: f64,
    pub hair_line: f64,
    pub brow_tilt: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub background: [f64; 3],
}

impl FaceParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let tone = u(0.45, 0.95);
        Self {
            face_w: u(0.48, 0.68),
            face_h: u(0.66, 0.86),
            eye_dx: u(0.16, 0.30),
            eye_y: u(-0.22, -0.05),
            eye_r: u(0.05, 0.10),
            nose_len: u(0.12, 0.30),
            mouth_y: u(0.30, 0.50),
            mouth_w: u(0.12, 0.32),
            mouth_curve: u(-0.10, 0.12),
            hair_line: u(-0.70, -0.40),
            brow_tilt: u(-0.08, 0.08),
            skin: [tone, tone * u(0.70, 0.85), tone * u(0.55, 0.70)],
            hair: [u(0.05, 0.45), u(0.03, 0.30), u(0.02, 0.20)],
            background: [u(0.2, 0.9), u(0.2, 0.9), u(0.2, 0.9)],
        }
    }
}

struct Field {
    face: f64,
    hair: bool,
    eye: f64,
    nose: f64,
    mouth: f64,
    brow: f64,
}

fn field(p: &FaceParams, x: f64, y: f64) -> Field {
    let face = (x / p.face_w).powi(2) + (y / p.face_h).powi(2);
    let hair = face <= 1.15 && y < p.hair_line + 0.08 * (x * 6.0).sin();
    let eye = [-p.eye_dx, p.eye_dx]
        .iter()
        .map(|&cx| ((x - cx).powi(2) + ((y - p.eye_y) * 1.6).powi(2)).sqrt() / p.eye_r)
        .fold(f64::INFINITY, f64::min);
    let nose = if y > p.eye_y && y < p.eye_y + p.nose_len + 0.1 {
        (x - 0.04 * ((y - p.eye_y) / p.nose_len)).abs()
    } else {
        f64::INFINITY
    };
    let mouth = if x.abs() <= p.mouth_w {
        let t = x / p.mouth_w;
        (y - (p.mouth_y + p.mouth_curve * (1.0 - t * t))).abs()
    } else {
        f64::INFINITY
    };
    let brow = [-1.0, 1.0]
        .iter()
        .map(|&s| {
            let cx = s * p.eye_dx;
            if (x - cx).abs() <= p.eye_r * 1.4 {
                (y - (p.eye_y - p.eye_r * 1.9 + s * p.brow_tilt * (x - cx) / p.eye_r)).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min);
    Field {
        face,
        hair,
        eye,
        nose,
        mouth,
        brow,
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render one identity as a (photo, sketch) pair of `size × size` images.
pub fn render_pair(p: &FaceParams, size: u32) -> (RgbImage, RgbImage) {
    let s = size as f64;
    let stroke = 1.5 / s;
    let mut photo = RgbImage::new(size, size);
    let mut sketch = RgbImage::new(size, size);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / s * 2.0 - 1.0;
            let y = (py as f64 + 0.5) / s * 2.0 - 1.0;
            let f = field(p, x, y);

            // photo: background gradient, shaded skin, hair, dark features
            let mut c = p.background.map(|b| b * (0.85 + 0.15 * y));
            if f.face <= 1.0 {
                let shade = 1.0 - 0.35 * f.face - 0.1 * x;
                c = p.skin.map(|k| k * shade);
            }
            if f.hair {
                c = p.hair;
            }
            if f.face <= 1.0 && !f.hair {
                if f.eye <= 1.0 {
                    c = [0.08, 0.06, 0.05];
                }
                if f.nose < stroke * 1.2 {
                    c = c.map(|v| v * 0.7);
                }
                if f.mouth < stroke * 1.5 {
                    c = [0.55, 0.15, 0.18];
                }
                if f.brow < stroke * 1.5 {
                    c = p.hair;
                }
            }
            photo.put_pixel(px, py, Rgb(c.map(to_u8)));

            // sketch: strokes along the same contours, hatching in the hair
            let mut ink: f64 = 0.0;
            if (f.face.sqrt() - 1.0).abs() * p.face_w.min(p.face_h) < stroke {
                ink = 0.85;
            }
            if f.hair && (px + py) % 3 == 0 {
                ink = ink.max(0.6);
            }
            if f.face <= 1.0 && !f.hair {
                if (f.eye - 1.0).abs() * p.eye_r < stroke {
                    ink = 0.9;
                }
                if f.eye < 0.45 {
                    ink = 0.95;
                }
                if f.nose < stroke * 0.8 {
                    ink = ink.max(0.55);
                }
                if f.mouth < stroke {
                    ink = 0.85;
                }
                if f.brow < stroke * 1.2 {
                    ink = 0.8;
                }
            }
            let g = to_u8(0.96 - ink * 0.9);
            sketch.put_pixel(px, py, Rgb([g, g, g]));
        }
    }
    (photo, sketch)
}

/// Write PNG pairs and a `manifest.jsonl` with relative paths under `dir`.
pub fn write_fixture(dir: &Path, config: &FixtureConfig) -> Result<PathBuf> {
    if config.train_identities < 2 || config.size < 16 {
        return Err(Error::Config("fixture needs >= 2 train identities and size >= 16".into()));
    }
    for sub in ["photos", "sketches"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    let total = config.train_identities + config.test_identities;
    for i in 0..total {
        let params = FaceParams::sample(&mut rng);
        let (photo, sketch) = render_pair(&params, config.size);
        let id = format!("id{i:03}");
        let photo_rel = PathBuf::from("photos").join(format!("{id}.png"));
        let sketch_rel = PathBuf::from("sketches").join(format!("{id}.png"));
        for (img, rel) in [(&photo, &photo_rel), (&sketch, &sketch_rel)] {
            let path = dir.join(rel);
            img.save(&path)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        }
        entries.push(ManifestEntry {
            id,
            photo: photo_rel,
            sketch: sketch_rel,
            split: if i < config.train_identities { Split::Train } else { Split::Test },
        });
    }
    let path = dir.join("manifest.jsonl");
    Manifest { entries }.save(&path)?;
    Ok(path)
}
