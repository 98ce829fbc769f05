//! Python bindings: `import idcycle_py`.
//!
//! Images cross the boundary as flat float lists plus a shape. Reports and
//! records come back as plain dicts and lists.

use std::path::PathBuf;

use idcycle::dataset::{self, Split};
use idcycle::losses::{self, AdversarialMode, LossParts, LossWeights, TripletConfig};
use idcycle::metrics::{self, Luma, QualityConfig};
use idcycle::nets;
use idcycle::pipeline::{self, OptimizeConfig};
use idcycle::recognition::{self, ScoreMatrix};
use idcycle::tensor::Tensor;
use idcycle::trainer::{self, Direction, TrainState};
use idcycle::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingFile(..) => PyIOError::new_err(e.to_string()),
        Error::Interrupted(_) | Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

fn mode(name: &str) -> PyResult<AdversarialMode> {
    match name {
        "least_squares" | "ls" => Ok(AdversarialMode::LeastSquares),
        "log" => Ok(AdversarialMode::Log),
        _ => Err(PyValueError::new_err(format!("unknown adversarial mode {name:?}"))),
    }
}

fn luma(rows: Vec<Vec<f64>>) -> PyResult<Luma> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows differ in length"));
    }
    Luma::new(h, w, rows.concat()).map_err(py_err)
}

fn optimize_config(config: Option<PathBuf>, desk: bool) -> PyResult<OptimizeConfig> {
    idcycle::cli::load_config(config.as_deref(), desk).map_err(py_err)
}

/// SSIM of two grayscale images in [0, 1], given as lists of rows.
#[pyfunction]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::ssim(&luma(a)?, &luma(b)?, &QualityConfig::default()).map_err(py_err)
}

/// FSIM of two grayscale images in [0, 1], given as lists of rows.
#[pyfunction]
fn fsim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fsim(&luma(a)?, &luma(b)?, &QualityConfig::default()).map_err(py_err)
}

/// Per-image and mean SSIM/FSIM for same-named images in two directories.
#[pyfunction]
fn evaluate_dirs(py: Python<'_>, fake_dir: PathBuf, real_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let report = metrics::evaluate_dirs(&fake_dir, &real_dir, &QualityConfig::default()).map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (real, fake, shape, mode = "least_squares"))]
fn discriminator_loss(real: Vec<f64>, fake: Vec<f64>, shape: Vec<usize>, mode: &str) -> PyResult<f64> {
    let m = self::mode(mode)?;
    losses::adversarial_loss_discriminator(&tensor(real, shape.clone())?, &tensor(fake, shape)?, m).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (fake, shape, mode = "least_squares"))]
fn generator_loss(fake: Vec<f64>, shape: Vec<usize>, mode: &str) -> PyResult<f64> {
    losses::adversarial_loss_generator(&tensor(fake, shape)?, self::mode(mode)?).map_err(py_err)
}

/// Cycle loss over flat images of a common shape.
#[pyfunction]
fn cycle_loss(x: Vec<f64>, x_cycled: Vec<f64>, y: Vec<f64>, y_cycled: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    let t = |v| tensor(v, shape.clone());
    losses::cycle_loss(&t(x)?, &t(x_cycled)?, &t(y)?, &t(y_cycled)?).map_err(py_err)
}

/// Weighted generator objective; unset weights take the defaults.
#[pyfunction]
#[pyo3(signature = (gan_x, gan_y, cyc, ip, im, lambda_cyc = None, lambda_ip = None, lambda_im = None))]
#[allow(clippy::too_many_arguments)]
fn total_generator_loss(
    gan_x: f64,
    gan_y: f64,
    cyc: f64,
    ip: f64,
    im: f64,
    lambda_cyc: Option<f64>,
    lambda_ip: Option<f64>,
    lambda_im: Option<f64>,
) -> PyResult<f64> {
    let d = LossWeights::default();
    let w = LossWeights {
        lambda_cyc: lambda_cyc.unwrap_or(d.lambda_cyc),
        lambda_ip: lambda_ip.unwrap_or(d.lambda_ip),
        lambda_im: lambda_im.unwrap_or(d.lambda_im),
    };
    let parts = LossParts { gan_x, gan_y, cyc, ip, im };
    losses::total_generator_loss(&parts, &w).map_err(py_err)
}

/// Hard-negative triplet loss for one anchor.
#[pyfunction]
#[pyo3(signature = (anchor, positive, negatives, margin = None, hard_k = None))]
fn triplet_loss(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
    margin: Option<f64>,
    hard_k: Option<usize>,
) -> PyResult<f64> {
    let d = TripletConfig::default();
    let cfg = TripletConfig {
        margin_alpha: margin.unwrap_or(d.margin_alpha),
        hard_k: hard_k.unwrap_or(d.hard_k),
    };
    losses::triplet_loss(&anchor, &positive, &negatives, &cfg).map_err(py_err)
}

fn score_matrix(probe_ids: Vec<String>, gallery_ids: Vec<String>, scores: Vec<Vec<f64>>) -> PyResult<ScoreMatrix> {
    ScoreMatrix::new(probe_ids, gallery_ids, scores.concat()).map_err(py_err)
}

/// Fraction of probes whose identity appears among the top `k` gallery scores.
#[pyfunction]
fn rank_k_accuracy(probe_ids: Vec<String>, gallery_ids: Vec<String>, scores: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    recognition::rank_k_accuracy(&score_matrix(probe_ids, gallery_ids, scores)?, k).map_err(py_err)
}

/// Min-max normalize two score matrices row-wise and average them.
#[pyfunction]
fn fuse_scores(
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let a = score_matrix(probe_ids.clone(), gallery_ids.clone(), a)?;
    let b = score_matrix(probe_ids, gallery_ids, b)?;
    let f = recognition::fuse_scores(&a, &b).map_err(py_err)?;
    Ok((0..f.rows()).map(|i| f.row(i).to_vec()).collect())
}

/// Write the procedural photo/sketch fixture; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, train_identities = 8, test_identities = 4, size = 64, seed = 7))]
fn make_fixture(out_dir: PathBuf, train_identities: usize, test_identities: usize, size: u32, seed: u64) -> PyResult<String> {
    let cfg = idcycle::fixture::FixtureConfig {
        train_identities,
        test_identities,
        size,
        seed,
    };
    let p = idcycle::fixture::write_fixture(&out_dir, &cfg).map_err(py_err)?;
    Ok(p.display().to_string())
}

/// Paired photo/sketch translator.
#[pyclass(unsendable)]
struct Synthesizer {
    state: TrainState,
}

#[pymethods]
impl Synthesizer {
    /// Fresh networks from the optimization config (`desk` selects the small preset).
    #[new]
    #[pyo3(signature = (config = None, desk = true, seed = None))]
    fn new(config: Option<PathBuf>, desk: bool, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = optimize_config(config, desk)?.synth_config;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            state: TrainState::new(cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: trainer::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.state, &path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    /// Train on the manifest's train split up to `max_steps` total steps,
    /// without the identity term. Returns the per-step loss records.
    fn train(&mut self, py: Python<'_>, manifest: PathBuf, max_steps: u64) -> PyResult<Py<PyAny>> {
        let m = dataset::load_manifest(&manifest).map_err(py_err)?;
        let cache = dataset::PairCache::load(&m, Split::Train).map_err(py_err)?;
        self.state.config.max_steps = Some(max_steps);
        self.state.config.loss_weights.lambda_ip = 0.0;
        let mut records = Vec::new();
        self.state
            .run(&cache, None, |r| {
                records.push(r.clone());
                Ok(())
            })
            .map_err(py_err)?;
        to_py(py, &records)
    }

    /// Translate a batch of photos `[n, 3, h, w]` into sketches.
    fn photo_to_sketch(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let out = self.state.photo_to_sketch(&tensor(data, shape)?).map_err(py_err)?;
        Ok(out.into_data())
    }

    /// Translate a batch of sketches `[n, 3, h, w]` into photos.
    fn sketch_to_photo(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let out = self.state.sketch_to_photo(&tensor(data, shape)?).map_err(py_err)?;
        Ok(out.into_data())
    }

    /// Translate every manifest image; returns the generated manifest path.
    fn synthesize(&self, manifest: PathBuf, out_dir: PathBuf) -> PyResult<String> {
        let m = dataset::load_manifest(&manifest).map_err(py_err)?;
        trainer::synthesize_dataset(&self.state, &m, Direction::Both, &out_dir).map_err(py_err)?;
        Ok(out_dir.join("manifest.jsonl").display().to_string())
    }
}

/// Face embedding network.
#[pyclass(unsendable)]
struct Recognizer {
    net: nets::Recognizer,
}

#[pymethods]
impl Recognizer {
    #[new]
    #[pyo3(signature = (config = None, desk = true, seed = 0))]
    fn new(config: Option<PathBuf>, desk: bool, seed: u64) -> PyResult<Self> {
        let cfg = optimize_config(config, desk)?.recognizer;
        Ok(Self {
            net: recognition::init_recognizer(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            net: recognition::load_recognizer(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        recognition::save_recognizer(&self.net, &path).map_err(py_err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.net.config().input_size
    }

    /// Unit-norm embeddings, one row per image of `[n, 3, h, w]`.
    fn embed(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let e = self.net.embed(&tensor(data, shape)?).map_err(py_err)?;
        let dim = e.shape()[1];
        Ok(e.data().chunks(dim).map(<[f64]>::to_vec).collect())
    }
}

/// Run the alternating synthesis/recognition optimization; returns the round records.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config = None, desk = true, max_rounds = None))]
fn mutual_optimize(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    desk: bool,
    max_rounds: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = optimize_config(config, desk)?;
    if let Some(n) = max_rounds {
        cfg.max_rounds = n;
    }
    let m = dataset::load_manifest(&manifest).map_err(py_err)?;
    let records = pipeline::mutual_optimize(&m, &cfg, &out_dir).map_err(py_err)?;
    to_py(py, &records)
}

/// Run the command-line interface with `argv` (excluding the program name).
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    idcycle::cli::cli(std::iter::once("idcycle".to_string()).chain(argv))
}

#[pymodule]
fn idcycle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(fsim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dirs, m)?)?;
    m.add_function(wrap_pyfunction!(discriminator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cycle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_generator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rank_k_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_scores, m)?)?;
    m.add_function(wrap_pyfunction!(make_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_optimize, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_class::<Synthesizer>()?;
    m.add_class::<Recognizer>()?;
    Ok(())
}
