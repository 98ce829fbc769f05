//! Full-reference image quality: SSIM and FSIM on luminance.
//!
//! FSIM follows the reference implementation (phase congruency from a
//! log-Gabor bank, Scharr gradient magnitude, PC-weighted pooling) without
//! the chrominance terms. All spatial filtering pads symmetrically.

use std::f64::consts::PI;
use std::path::Path;

use image::RgbImage;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image, Manifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub fsim_scales: usize,
    pub fsim_orientations: usize,
    pub dynamic_range: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            fsim_scales: 4,
            fsim_orientations: 4,
            dynamic_range: 1.0,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim_window must be odd and >= 3, got {}", self.ssim_window)));
        }
        for (name, v) in [
            ("ssim_sigma", self.ssim_sigma),
            ("ssim_k1", self.ssim_k1),
            ("ssim_k2", self.ssim_k2),
            ("dynamic_range", self.dynamic_range),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fsim_scales < 2 || self.fsim_orientations == 0 {
            return Err(Error::Config("fsim needs >= 2 scales and >= 1 orientation".into()));
        }
        Ok(())
    }
}

/// Single-channel image, row-major, nominally in `[0, dynamic_range]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Luma {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

const BT601: [f64; 3] = [0.299, 0.587, 0.114];

impl Luma {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape(format!("{height}x{width} image with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|k| f(k / width, k % width)).collect();
        Self { height, width, data }
    }

    /// BT.601 luminance of an 8-bit image, scaled to `[0, 1]`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| (0..3).map(|c| BT601[c] * p[c] as f64).sum::<f64>() / 255.0)
            .collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// Luminance of a `[3, H, W]` tensor in `[-1, 1]`, mapped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("expected one RGB image, got {s:?}"))),
        };
        let d = t.data();
        let plane = h * w;
        let data = (0..plane)
            .map(|k| (0..3).map(|c| BT601[c] * (d[c * plane + k] + 1.0) / 2.0).sum())
            .collect();
        Ok(Self { height: h, width: w, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&load_image(path)?))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.at(y, self.width - 1 - x))
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn same_shape(a: &Luma, b: &Luma) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Symmetric (edge-repeating) reflection of an out-of-range index.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable correlation with symmetric padding; output has the input size.
fn filter_separable(img: &Luma, kx: &[f64], ky: &[f64]) -> Luma {
    let (h, w) = (img.height, img.width);
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kx
                .iter()
                .enumerate()
                .map(|(k, &c)| c * img.at(y, reflect(x as isize + k as isize - rx, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ky
                .iter()
                .enumerate()
                .map(|(k, &c)| c * tmp[reflect(y as isize + k as isize - ry, h) * w + x])
                .sum();
        }
    }
    Luma { height: h, width: w, data: out }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over the Gaussian-windowed local map.
pub fn ssim(a: &Luma, b: &Luma, config: &QualityConfig) -> Result<f64> {
    config.validate()?;
    same_shape(a, b)?;
    if a.height < config.ssim_window || a.width < config.ssim_window {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than the {} window",
            a.height, a.width, config.ssim_window
        )));
    }
    let k = gaussian_kernel(config.ssim_window, config.ssim_sigma);
    let blur = |img: &Luma| filter_separable(img, &k, &k);
    let c1 = (config.ssim_k1 * config.dynamic_range).powi(2);
    let c2 = (config.ssim_k2 * config.dynamic_range).powi(2);

    let mu_a = blur(a);
    let mu_b = blur(b);
    let aa = blur(&a.map(|v| v * v));
    let bb = blur(&b.map(|v| v * v));
    let ab_prod = Luma {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    };
    let ab = blur(&ab_prod);

    let mut total = 0.0;
    for i in 0..a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / a.data.len() as f64)
}

// ---------------------------------------------------------------------------
// FSIM

struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    row_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: p.plan_fft_forward(cols),
            row_inv: p.plan_fft_inverse(cols),
            col_fwd: p.plan_fft_forward(rows),
            col_inv: p.plan_fft_inverse(rows),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (rows, cols) = (self.rows, self.cols);
        let (rf, cf) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in data.chunks_mut(cols) {
            rf.process(r);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = data[r * cols + c];
            }
            cf.process(&mut col);
            for r in 0..rows {
                data[r * cols + c] = col[r];
            }
        }
        if inverse {
            let s = 1.0 / (rows * cols) as f64;
            for v in data.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Normalized frequency coordinates, quadrant-shifted so zero frequency sits at index 0.
fn freq_axis(n: usize) -> Vec<f64> {
    let centered: Vec<f64> = if n % 2 == 1 {
        let h = (n - 1) as f64 / 2.0;
        (0..n).map(|i| (i as f64 - h) / (n - 1) as f64).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    };
    (0..n).map(|i| centered[(i + n / 2) % n]).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Phase congruency map (the PC_2 energy measure with noise compensation).
pub fn phase_congruency(img: &Luma, scales: usize, orientations: usize) -> Vec<f64> {
    const MIN_WAVELENGTH: f64 = 6.0;
    const MULT: f64 = 2.0;
    const SIGMA_ON_F: f64 = 0.55;
    const D_THETA_ON_SIGMA: f64 = 1.2;
    const K: f64 = 2.0;
    const EPS: f64 = 1e-4;

    let (rows, cols) = (img.height, img.width);
    let n = rows * cols;
    let fft = Fft2::new(rows, cols);
    let mut spectrum: Vec<Complex64> = img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.run(&mut spectrum, false);

    let theta_sigma = PI / orientations as f64 / D_THETA_ON_SIGMA;
    let (fx, fy) = (freq_axis(cols), freq_axis(rows));
    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    let mut lowpass = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (fx[c], fy[r]);
            let rad = (x * x + y * y).sqrt();
            let th = (-y).atan2(x);
            let k = r * cols + c;
            lowpass[k] = 1.0 / (1.0 + (rad / 0.45).powi(30));
            radius[k] = rad;
            sin_t[k] = th.sin();
            cos_t[k] = th.cos();
        }
    }
    radius[0] = 1.0;

    let log_gabor: Vec<Vec<f64>> = (0..scales)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ON_F.ln().powi(2);
            let mut g: Vec<f64> = (0..n)
                .map(|k| (-((radius[k] / fo).ln().powi(2)) / denom).exp() * lowpass[k])
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();

    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    for o in 0..orientations {
        let angle = o as f64 * PI / orientations as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        let spread: Vec<f64> = (0..n)
            .map(|k| {
                let ds = sin_t[k] * ca - cos_t[k] * sa;
                let dc = cos_t[k] * ca + sin_t[k] * sa;
                let dt = ds.atan2(dc).abs();
                (-dt * dt / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();

        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut responses: Vec<Vec<Complex64>> = Vec::with_capacity(scales);
        let mut spatial_filters: Vec<Vec<f64>> = Vec::with_capacity(scales);
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filter: Vec<f64> = lg.iter().zip(&spread).map(|(a, b)| a * b).collect();
            let mut fs: Vec<Complex64> = filter.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.run(&mut fs, true);
            let scale = (n as f64).sqrt();
            spatial_filters.push(fs.iter().map(|v| v.re * scale).collect());

            let mut eo: Vec<Complex64> = spectrum.iter().zip(&filter).map(|(z, &f)| z * f).collect();
            fft.run(&mut eo, true);
            for k in 0..n {
                sum_an[k] += eo[k].norm();
                sum_e[k] += eo[k].re;
                sum_o[k] += eo[k].im;
            }
            if s == 0 {
                em_n = filter.iter().map(|v| v * v).sum();
            }
            responses.push(eo);
        }

        let mut energy = vec![0.0; n];
        for k in 0..n {
            let xe = (sum_e[k] * sum_e[k] + sum_o[k] * sum_o[k]).sqrt() + EPS;
            let (me, mo) = (sum_e[k] / xe, sum_o[k] / xe);
            for eo in &responses {
                let (e, od) = (eo[k].re, eo[k].im);
                energy[k] += e * me + od * mo - (e * mo - od * me).abs();
            }
        }

        let median_e2n = median(responses[0].iter().map(|z| z.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = if em_n > 0.0 { mean_e2n / em_n } else { 0.0 };
        let mut sum_an2 = 0.0;
        let mut sum_aiaj = 0.0;
        for k in 0..n {
            for si in 0..scales {
                let a = spatial_filters[si][k];
                sum_an2 += a * a;
                for sj in si + 1..scales {
                    sum_aiaj += a * spatial_filters[sj][k];
                }
            }
        }
        let noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (noise_energy2 / 2.0).max(0.0).sqrt();
        let noise_mean = tau * (PI / 2.0).sqrt();
        let noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let threshold = (noise_mean + K * noise_sigma) / 1.7;

        for k in 0..n {
            energy_all[k] += (energy[k] - threshold).max(0.0);
            an_all[k] += sum_an[k];
        }
    }
    energy_all
        .iter()
        .zip(&an_all)
        .map(|(&e, &a)| if a > 0.0 { e / a } else { 0.0 })
        .collect()
}

/// Box-average then subsample by `factor` (window aligned as a centered "same" filter).
fn downsample(img: &Luma, factor: usize) -> Luma {
    if factor <= 1 {
        return img.clone();
    }
    let k = vec![1.0 / factor as f64; factor];
    // an even-length box covers [i - (f-1)/2, i + f/2]; shift odd/even alignment accordingly
    let lead = ((factor - 1) / 2) as isize;
    let (h, w) = (img.height, img.width);
    let sample = |y: usize, x: usize| {
        let mut acc = 0.0;
        for (dy, cy) in k.iter().enumerate() {
            for (dx, cx) in k.iter().enumerate() {
                let yy = reflect(y as isize - lead + dy as isize, h);
                let xx = reflect(x as isize - lead + dx as isize, w);
                acc += cy * cx * img.at(yy, xx);
            }
        }
        acc
    };
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    Luma::from_fn(oh, ow, |y, x| sample(y * factor, x * factor))
}

fn gradient_magnitude(img: &Luma) -> Vec<f64> {
    // Scharr derivative: smoothing [3, 10, 3]/16 across, difference [1, 0, -1] along
    let smooth = [3.0 / 16.0, 10.0 / 16.0, 3.0 / 16.0];
    let diff = [1.0, 0.0, -1.0];
    let gx = filter_separable(img, &diff, &smooth);
    let gy = filter_separable(img, &smooth, &diff);
    gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

/// FSIM on luminance, with `T1 = 0.85` and `T2 = 160` on the 8-bit intensity scale.
pub fn fsim(a: &Luma, b: &Luma, config: &QualityConfig) -> Result<f64> {
    const T1: f64 = 0.85;
    const T2: f64 = 160.0;
    config.validate()?;
    same_shape(a, b)?;
    let to_8bit = 255.0 / config.dynamic_range;
    let factor = ((a.height.min(a.width) as f64 / 256.0).round() as usize).max(1);
    let ya = downsample(&a.map(|v| v * to_8bit), factor);
    let yb = downsample(&b.map(|v| v * to_8bit), factor);

    let pa = phase_congruency(&ya, config.fsim_scales, config.fsim_orientations);
    let pb = phase_congruency(&yb, config.fsim_scales, config.fsim_orientations);
    let ga = gradient_magnitude(&ya);
    let gb = gradient_magnitude(&yb);

    let mut num = 0.0;
    let mut den = 0.0;
    let mut g_only = 0.0;
    for k in 0..pa.len() {
        let pc_sim = (2.0 * pa[k] * pb[k] + T1) / (pa[k] * pa[k] + pb[k] * pb[k] + T1);
        let g_sim = (2.0 * ga[k] * gb[k] + T2) / (ga[k] * ga[k] + gb[k] * gb[k] + T2);
        let pcm = pa[k].max(pb[k]);
        num += g_sim * pc_sim * pcm;
        den += pcm;
        g_only += g_sim;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        // no phase structure in either image: pool gradient similarity uniformly
        Ok(g_only / pa.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub ssim: f64,
    pub fsim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_ssim: f64,
    pub mean_fsim: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Invalid("quality report needs at least one image pair".into()));
        }
        let n = per_image.len() as f64;
        let aggregates = Aggregates {
            mean_ssim: per_image.iter().map(|r| r.ssim).sum::<f64>() / n,
            mean_fsim: per_image.iter().map(|r| r.fsim).sum::<f64>() / n,
            count: per_image.len(),
        };
        Ok(Self { per_image, aggregates })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,ssim,fsim\n");
        for r in &self.per_image {
            s.push_str(&format!("{},{},{}\n", r.id, r.ssim, r.fsim));
        }
        s.push_str(&format!("mean,{},{}\n", self.aggregates.mean_ssim, self.aggregates.mean_fsim));
        s
    }
}

/// One row of a method × dataset × direction summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub direction: String,
    pub mean_ssim: f64,
    pub mean_fsim: f64,
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("method,dataset,direction,ssim_percent,fsim_percent\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.2},{:.2}\n",
            r.method,
            r.dataset,
            r.direction,
            100.0 * r.mean_ssim,
            100.0 * r.mean_fsim
        ));
    }
    s
}

/// Score aligned `(id, fake, real)` triples.
pub fn evaluate_pairs(pairs: &[(String, Luma, Luma)], config: &QualityConfig) -> Result<MetricReport> {
    let rows = pairs
        .iter()
        .map(|(id, fake, real)| {
            Ok(ImageScore {
                id: id.clone(),
                ssim: ssim(fake, real, config)?,
                fsim: fsim(fake, real, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTarget {
    Sketch,
    Photo,
}

/// Compare the `target` images of two identity-aligned manifests, in the
/// fake manifest's order.
pub fn evaluate_quality(
    fake: &Manifest,
    real: &Manifest,
    target: QualityTarget,
    config: &QualityConfig,
) -> Result<MetricReport> {
    if fake.len() != real.len() {
        return Err(Error::Invalid(format!(
            "manifests differ in length: {} fake vs {} real",
            fake.len(),
            real.len()
        )));
    }
    let pick = |e: &crate::dataset::ManifestEntry| match target {
        QualityTarget::Sketch => e.sketch.clone(),
        QualityTarget::Photo => e.photo.clone(),
    };
    let mut pairs = Vec::with_capacity(fake.len());
    for f in &fake.entries {
        let r = real
            .entries
            .iter()
            .find(|r| r.id == f.id && r.split == f.split)
            .ok_or_else(|| Error::Invalid(format!("id {} has no real counterpart", f.id)))?;
        let fake_img = load_image(&pick(f))?;
        let mut real_img = load_image(&pick(r))?;
        if real_img.dimensions() != fake_img.dimensions() {
            // fakes come out at the synthesis resolution
            let (w, h) = fake_img.dimensions();
            real_img = image::imageops::resize(&real_img, w, h, image::imageops::FilterType::Triangle);
        }
        pairs.push((f.id.clone(), Luma::from_rgb8(&fake_img), Luma::from_rgb8(&real_img)));
    }
    evaluate_pairs(&pairs, config)
}

/// Compare same-named image files of two directories.
pub fn evaluate_dirs(fake_dir: &Path, real_dir: &Path, config: &QualityConfig) -> Result<MetricReport> {
    let list = |dir: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        v.sort();
        Ok(v)
    };
    let mut pairs = Vec::new();
    for f in list(fake_dir)? {
        let name = f.file_name().expect("listed files have names");
        let r = real_dir.join(name);
        if !r.is_file() {
            return Err(Error::MissingFile(r));
        }
        let id = f.file_stem().unwrap_or(name).to_string_lossy().into_owned();
        pairs.push((id, Luma::load(&f)?, Luma::load(&r)?));
    }
    evaluate_pairs(&pairs, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Luma {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.random::<f64>()).collect();
        Luma::new(h, w, data).unwrap()
    }

    fn scene(h: usize, w: usize) -> Luma {
        Luma::from_fn(h, w, |y, x| {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let disk = if (fx - 0.5).powi(2) + (fy - 0.45).powi(2) < 0.08 { 0.35 } else { 0.0 };
            0.2 + 0.3 * fx + disk + 0.1 * (fy * 20.0).sin()
        })
    }

    fn noisy(img: &Luma, sigma: f64, seed: u64) -> Luma {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rand_distr::Normal::new(0.0, sigma).unwrap();
        img.map(|v| (v + rng.sample(n)).clamp(0.0, 1.0))
    }

    #[test]
    fn reflect_is_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn ssim_constant_images() {
        let cfg = QualityConfig::default();
        let zero = Luma::from_fn(16, 16, |_, _| 0.0);
        let one = Luma::from_fn(16, 16, |_, _| 1.0);
        let c1: f64 = 1e-4;
        assert!((ssim(&zero, &one, &cfg).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_symmetry_and_errors() {
        let cfg = QualityConfig::default();
        let a = random(24, 20, 1);
        let b = random(24, 20, 2);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, &cfg).unwrap(), ssim(&b, &a, &cfg).unwrap());
        assert!(ssim(&a, &random(20, 24, 3), &cfg).is_err());
        assert!(ssim(&random(8, 8, 1), &random(8, 8, 2), &cfg).is_err());
    }

    #[test]
    fn ssim_large_constants_tend_to_one() {
        let cfg = QualityConfig {
            ssim_k1: 1e3,
            ssim_k2: 1e3,
            ..QualityConfig::default()
        };
        let v = ssim(&random(16, 16, 4), &random(16, 16, 5), &cfg).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fsim_self_symmetry_and_noise_order() {
        let cfg = QualityConfig::default();
        let x = scene(48, 48);
        assert!((fsim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let light = noisy(&x, 0.02, 10);
        let heavy = noisy(&x, 0.2, 11);
        let fl = fsim(&x, &light, &cfg).unwrap();
        let fh = fsim(&x, &heavy, &cfg).unwrap();
        assert_eq!(fl, fsim(&light, &x, &cfg).unwrap());
        assert!(fh < fl, "{fh} !< {fl}");
        assert!((0.0..=1.0).contains(&fh));
    }

    #[test]
    fn flip_invariance() {
        let cfg = QualityConfig::default();
        // odd sizes have a symmetric frequency grid; even sizes carry one
        // unpaired Nyquist column, which perturbs FSIM slightly
        for (h, w, tol) in [(33, 41, 1e-12), (32, 40, 1e-4)] {
            let a = scene(h, w);
            let b = noisy(&a, 0.05, 3);
            let (fa, fb) = (a.flip_horizontal(), b.flip_horizontal());
            assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&fa, &fb, &cfg).unwrap()).abs() < 1e-12);
            assert!((fsim(&a, &b, &cfg).unwrap() - fsim(&fa, &fb, &cfg).unwrap()).abs() < tol);
        }
    }

    #[test]
    fn constant_pair_falls_back_to_gradient_similarity() {
        let cfg = QualityConfig::default();
        let a = Luma::from_fn(16, 16, |_, _| 0.3);
        let b = Luma::from_fn(16, 16, |_, _| 0.7);
        assert_eq!(fsim(&a, &b, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn freq_axis_matches_shifted_layout() {
        assert_eq!(freq_axis(4), vec![0.0, 0.25, -0.5, -0.25]);
        assert_eq!(freq_axis(5), vec![0.0, 0.25, 0.5, -0.5, -0.25]);
    }

    #[test]
    fn report_means_are_row_means() {
        let rows = vec![
            ImageScore { id: "a".into(), ssim: 0.5, fsim: 0.9 },
            ImageScore { id: "b".into(), ssim: 0.7, fsim: 0.6 },
        ];
        let r = MetricReport::from_rows(rows).unwrap();
        assert!((r.aggregates.mean_ssim - 0.6).abs() < 1e-12);
        assert_eq!(r.aggregates.count, 2);
        assert!(r.to_csv().starts_with("id,ssim,fsim\na,0.5,0.9\n"));
    }
}
