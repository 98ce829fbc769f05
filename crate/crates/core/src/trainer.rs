//! Identity-aware CycleGAN optimization: joint generator updates, per-domain
//! discriminator updates against a replay buffer, linear-decay learning rate,
//! checkpointing and dataset synthesis.
//!
//! Domain X holds photos and Y sketches. `G_X: X -> Y` is judged by `D_Y`,
//! `G_Y: Y -> X` by `D_X`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Kind, Reader, Writer};
use crate::dataset::{self, epoch_batches, stack_pairs, Manifest, PairCache, PreprocessConfig, Split};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialMode, BoundRecognizer, GeneratorTerms, IdentityMappingInput, LossWeights};
use crate::nets::{
    build_discriminator, build_generator, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Recognizer,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_epochs: u64,
    pub constant_lr_epochs: u64,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub loss_weights: LossWeights,
    pub adversarial_mode: AdversarialMode,
    pub identity_mapping_input: IdentityMappingInput,
    pub preprocess: PreprocessConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 200,
            constant_lr_epochs: 100,
            base_lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            buffer_capacity: 50,
            seed: 0,
            max_steps: None,
            loss_weights: LossWeights::default(),
            adversarial_mode: AdversarialMode::default(),
            identity_mapping_input: IdentityMappingInput::default(),
            preprocess: PreprocessConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.constant_lr_epochs > self.total_epochs {
            return Err(Error::Config("constant_lr_epochs exceeds total_epochs".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.preprocess.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.preprocess.target_size % 4 != 0 {
            return Err(Error::Config("preprocess.target_size must be divisible by 4".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }
}

/// Constant `base_lr` for `constant_lr_epochs`, then linear decay reaching 0 at `total_epochs`.
pub fn lr_at_epoch(epoch: u64, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: config.total_epochs,
        });
    }
    if epoch < config.constant_lr_epochs {
        return Ok(config.base_lr);
    }
    let remaining = (config.total_epochs - epoch) as f64;
    let span = (config.total_epochs - config.constant_lr_epochs) as f64;
    Ok(config.base_lr * remaining / span)
}

/// Stable 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Replay pool of generated images fed to a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub capacity: usize,
    pub stored: Vec<Tensor>,
    pub rng: ChaCha8Rng,
}

impl ImageBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            stored: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fill phase stores and returns `fresh`; once full, half the time swap
    /// `fresh` in for a uniformly chosen stored image and return that one.
    pub fn query(&mut self, fresh: Tensor) -> Tensor {
        if self.capacity == 0 {
            return fresh;
        }
        if self.stored.len() < self.capacity {
            self.stored.push(fresh.clone());
            return fresh;
        }
        if self.rng.random::<f64>() < 0.5 {
            let i = self.rng.random_range(0..self.capacity);
            std::mem::replace(&mut self.stored[i], fresh)
        } else {
            fresh
        }
    }

    /// Query image by image along the batch axis; stored images keep a unit batch axis.
    pub fn query_batch(&mut self, fresh: &Tensor) -> Result<Tensor> {
        let n = fresh.shape()[0];
        let out: Vec<Tensor> = (0..n).map(|i| self.query(fresh.select(i))).collect();
        Tensor::stack(&out)
    }
}

/// The photo and sketch recognizers supervising identity perception.
#[derive(Clone, Copy)]
pub struct Recognizers<'a> {
    pub photo: &'a Recognizer,
    pub sketch: &'a Recognizer,
}

/// Every loss value of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub gan_x: f64,
    pub gan_y: f64,
    pub cyc: f64,
    pub ip: f64,
    pub im: f64,
    pub total: f64,
    pub d_x: f64,
    pub d_y: f64,
}

impl StepRecord {
    pub fn parts(&self) -> losses::LossParts {
        losses::LossParts {
            gan_x: self.gan_x,
            gan_y: self.gan_y,
            cyc: self.cyc,
            ip: self.ip,
            im: self.im,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g_x: Generator,
    pub g_y: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub opt_g: Adam,
    pub opt_d_x: Adam,
    pub opt_d_y: Adam,
    pub epoch: u64,
    pub step: u64,
    pub buffer_x: ImageBuffer,
    pub buffer_y: ImageBuffer,
    /// Drives augmentation draws.
    pub rng: ChaCha8Rng,
    /// Parameter hashes of the (photo, sketch) recognizers used for training.
    pub recognizer_hashes: Option<(String, String)>,
}

/// Detached fakes produced by a generator update.
pub struct Fakes {
    pub photo: Tensor,
    pub sketch: Tensor,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut g_x = build_generator(&config.generator)?;
        let mut g_y = build_generator(&config.generator)?;
        let mut d_x = build_discriminator(&config.discriminator)?;
        let mut d_y = build_discriminator(&config.discriminator)?;
        g_x.params_mut().init(derive_seed(seed, "g_x"));
        g_y.params_mut().init(derive_seed(seed, "g_y"));
        d_x.params_mut().init(derive_seed(seed, "d_x"));
        d_y.params_mut().init(derive_seed(seed, "d_y"));
        let adam = config.adam();
        Ok(Self {
            opt_g: Adam::new(adam, &[g_x.params(), g_y.params()]),
            opt_d_x: Adam::new(adam, &[d_x.params()]),
            opt_d_y: Adam::new(adam, &[d_y.params()]),
            buffer_x: ImageBuffer::new(config.buffer_capacity, derive_seed(seed, "buffer_x")),
            buffer_y: ImageBuffer::new(config.buffer_capacity, derive_seed(seed, "buffer_y")),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment")),
            g_x,
            g_y,
            d_x,
            d_y,
            epoch: 0,
            step: 0,
            recognizer_hashes: None,
            config,
        })
    }

    /// One joint Adam step on both generators. With `recognizers` absent the
    /// identity-perception term is not built at all.
    pub fn update_generators(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        recognizers: Option<Recognizers>,
        lr: f64,
    ) -> Result<(losses::LossParts, f64, Fakes)> {
        let cfg = &self.config;
        let g = Graph::new();
        let px = self.g_x.params().bind(&g, true);
        let py = self.g_y.params().bind(&g, true);
        let pdx = self.d_x.params().bind(&g, false);
        let pdy = self.d_y.params().bind(&g, false);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());

        let fake_y = self.g_x.forward(&g, &px, xv)?;
        let fake_x = self.g_y.forward(&g, &py, yv)?;
        let cyc_x = self.g_y.forward(&g, &py, fake_y)?;
        let cyc_y = self.g_x.forward(&g, &px, fake_x)?;

        let gan_x = losses::generator_adversarial(&g, self.d_y.forward(&g, &pdy, fake_y)?, cfg.adversarial_mode)?;
        let gan_y = losses::generator_adversarial(&g, self.d_x.forward(&g, &pdx, fake_x)?, cfg.adversarial_mode)?;
        let cyc = losses::cycle(&g, xv, cyc_x, yv, cyc_y)?;
        let im = match cfg.identity_mapping_input {
            IdentityMappingInput::SourceDomain => losses::identity_mapping(&g, fake_y, xv, fake_x, yv)?,
            IdentityMappingInput::TargetDomain => {
                let same_y = self.g_x.forward(&g, &px, yv)?;
                let same_x = self.g_y.forward(&g, &py, xv)?;
                losses::identity_mapping(&g, same_y, yv, same_x, xv)?
            }
        };
        let ip = match recognizers {
            Some(r) => {
                let bp = r.photo.params().bind(&g, false);
                let bs = r.sketch.params().bind(&g, false);
                let phi_p = BoundRecognizer {
                    net: r.photo,
                    params: &bp,
                };
                let phi_s = BoundRecognizer {
                    net: r.sketch,
                    params: &bs,
                };
                Some(losses::identity_perception(&g, fake_x, xv, fake_y, yv, &phi_p, &phi_s)?)
            }
            None => None,
        };
        let terms = GeneratorTerms {
            gan_x,
            gan_y,
            cyc,
            ip,
            im,
        };
        let total = losses::total_generator(&g, &terms, &cfg.loss_weights)?;
        let total_v = g.scalar(total);
        if !total_v.is_finite() {
            return Err(Error::NonFinite("total generator loss".into()));
        }
        let parts = losses::LossParts {
            gan_x: g.scalar(gan_x),
            gan_y: g.scalar(gan_y),
            cyc: g.scalar(cyc),
            ip: match ip {
                Some(v) => g.scalar(v),
                None => 0.0,
            },
            im: g.scalar(im),
        };
        let fakes = Fakes {
            photo: g.value(fake_x).clone(),
            sketch: g.value(fake_y).clone(),
        };
        let grads = g.backward(total)?;
        let mut all = self.g_x.params().grads(&px, &grads);
        all.extend(self.g_y.params().grads(&py, &grads));
        drop(g);
        self.opt_g
            .update(&mut [self.g_x.params_mut(), self.g_y.params_mut()], &all, lr)?;
        Ok((parts, total_v, fakes))
    }

    fn update_discriminator(
        d: &mut Discriminator,
        opt: &mut Adam,
        real: &Tensor,
        fake: &Tensor,
        mode: AdversarialMode,
        lr: f64,
        name: &str,
    ) -> Result<f64> {
        let g = Graph::new();
        let p = d.params().bind(&g, true);
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let sr = d.forward(&g, &p, r)?;
        let sf = d.forward(&g, &p, f)?;
        let loss: Var = losses::discriminator_adversarial(&g, sr, sf, mode)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{name}: {what}")),
                other => other,
            })?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
        let grads = g.backward(loss)?;
        let gs = d.params().grads(&p, &grads);
        drop(g);
        opt.update(&mut [d.params_mut()], &gs, lr)?;
        Ok(value)
    }

    /// `D_Y` then `D_X`, each on buffer-queried detached fakes. Returns `(d_x, d_y)`.
    pub fn update_discriminators(&mut self, x: &Tensor, y: &Tensor, fakes: &Fakes, lr: f64) -> Result<(f64, f64)> {
        let mode = self.config.adversarial_mode;
        let fake_y = self.buffer_y.query_batch(&fakes.sketch)?;
        let d_y = Self::update_discriminator(&mut self.d_y, &mut self.opt_d_y, y, &fake_y, mode, lr, "d_y")?;
        let fake_x = self.buffer_x.query_batch(&fakes.photo)?;
        let d_x = Self::update_discriminator(&mut self.d_x, &mut self.opt_d_x, x, &fake_x, mode, lr, "d_x")?;
        Ok((d_x, d_y))
    }

    /// Generators, then both discriminators, on one preprocessed batch.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, recognizers: Option<Recognizers>) -> Result<StepRecord> {
        let lr = lr_at_epoch(self.epoch, &self.config)?;
        let (parts, total, fakes) = self.update_generators(x, y, recognizers, lr)?;
        let (d_x, d_y) = self.update_discriminators(x, y, &fakes, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            gan_x: parts.gan_x,
            gan_y: parts.gan_y,
            cyc: parts.cyc,
            ip: parts.ip,
            im: parts.im,
            total,
            d_x,
            d_y,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.total_epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Run the remaining epochs over `cache`, reporting each step to `on_step`.
    /// A run stopped by `max_steps` continues mid-epoch where it left off, so
    /// raising `max_steps` and calling again matches an uninterrupted run.
    pub fn run(
        &mut self,
        cache: &PairCache,
        recognizers: Option<Recognizers>,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        if let Some(r) = recognizers {
            self.recognizer_hashes = Some((r.photo.params().hash(), r.sketch.params().hash()));
        }
        while !self.finished() {
            let batches = epoch_batches(cache.len(), self.config.batch_size, true, self.config.seed, self.epoch);
            let done = self.step.saturating_sub(self.epoch * batches.len() as u64) as usize;
            for batch in batches.into_iter().skip(done) {
                let pairs = batch
                    .iter()
                    .map(|&i| cache.pair(i, &self.config.preprocess, true, &mut self.rng))
                    .collect::<Result<Vec<_>>>()?;
                let (x, y) = stack_pairs(&pairs)?;
                let rec = self.train_step(&x, &y, recognizers)?;
                on_step(&rec)?;
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(());
                }
            }
            self.epoch += 1;
        }
        Ok(())
    }

    /// Translate a batch with the frozen generators.
    pub fn photo_to_sketch(&self, photos: &Tensor) -> Result<Tensor> {
        self.g_x.apply(photos)
    }

    pub fn sketch_to_photo(&self, sketches: &Tensor) -> Result<Tensor> {
        self.g_y.apply(sketches)
    }
}

/// Append-only JSON-lines step log.
pub struct StepLog {
    out: BufWriter<File>,
}

impl StepLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::Invalid(format!("writing step log: {e}")))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| Error::Invalid(format!("flushing step log: {e}")))
    }
}

/// Train from scratch on the manifest's train split.
pub fn train(
    manifest: &Manifest,
    config: &TrainConfig,
    recognizers: Option<Recognizers>,
    log: Option<&Path>,
) -> Result<TrainState> {
    let cache = PairCache::load(manifest, Split::Train)?;
    let mut state = TrainState::new(config.clone())?;
    let mut log = log.map(StepLog::create).transpose()?;
    state.run(&cache, recognizers, |r| match log.as_mut() {
        Some(l) => l.append(r),
        None => Ok(()),
    })?;
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Checkpoints

fn write_adam(w: &mut Writer, a: &Adam) {
    w.u64(a.step);
    w.tensors(&a.first);
    w.tensors(&a.second);
}

fn read_adam(r: &mut Reader, a: &mut Adam) -> Result<()> {
    a.step = r.u64()?;
    let first = r.tensors()?;
    let second = r.tensors()?;
    let shapes_match = |ts: &[Tensor], like: &[Tensor]| {
        ts.len() == like.len() && ts.iter().zip(like).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(&first, &a.first) || !shapes_match(&second, &a.second) {
        return Err(Error::CheckpointCorrupt("optimizer moments do not match the networks".into()));
    }
    a.first = first;
    a.second = second;
    Ok(())
}

fn write_buffer(w: &mut Writer, b: &ImageBuffer) {
    w.u64(b.capacity as u64);
    w.rng(&b.rng);
    w.tensors(&b.stored);
}

fn read_buffer(r: &mut Reader) -> Result<ImageBuffer> {
    let capacity = r.u64()? as usize;
    let rng = r.rng()?;
    let stored = r.tensors()?;
    if stored.len() > capacity {
        return Err(Error::CheckpointCorrupt("image buffer exceeds its capacity".into()));
    }
    Ok(ImageBuffer { capacity, stored, rng })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = Writer::new(Kind::Synthesis);
    w.str(&serde_json::to_string(&state.config).expect("config serializes"));
    w.u64(state.epoch);
    w.u64(state.step);
    for p in [state.g_x.params(), state.g_y.params(), state.d_x.params(), state.d_y.params()] {
        w.params(p);
    }
    for a in [&state.opt_g, &state.opt_d_x, &state.opt_d_y] {
        write_adam(&mut w, a);
    }
    write_buffer(&mut w, &state.buffer_x);
    write_buffer(&mut w, &state.buffer_y);
    w.rng(&state.rng);
    match &state.recognizer_hashes {
        Some((p, s)) => {
            w.u8(1);
            w.str(p);
            w.str(s);
        }
        None => w.u8(0),
    }
    w.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = checkpoint::read_file(path)?;
    let mut r = Reader::open(&bytes, Kind::Synthesis)?;
    let config: TrainConfig = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::CheckpointCorrupt(format!("config: {e}")))?;
    let mut state = TrainState::new(config)?;
    state.epoch = r.u64()?;
    state.step = r.u64()?;
    r.params_into(state.g_x.params_mut())?;
    r.params_into(state.g_y.params_mut())?;
    r.params_into(state.d_x.params_mut())?;
    r.params_into(state.d_y.params_mut())?;
    read_adam(&mut r, &mut state.opt_g)?;
    read_adam(&mut r, &mut state.opt_d_x)?;
    read_adam(&mut r, &mut state.opt_d_y)?;
    state.buffer_x = read_buffer(&mut r)?;
    state.buffer_y = read_buffer(&mut r)?;
    state.rng = r.rng()?;
    state.recognizer_hashes = match r.u8()? {
        0 => None,
        1 => Some((r.str()?, r.str()?)),
        t => return Err(Error::CheckpointCorrupt(format!("bad provenance tag {t}"))),
    };
    r.finish()?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Synthesis

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Photo to sketch.
    P2s,
    /// Sketch to photo.
    S2p,
    Both,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p2s" => Ok(Direction::P2s),
            "s2p" => Ok(Direction::S2p),
            "both" => Ok(Direction::Both),
            other => Err(Error::Invalid(format!("unknown direction {other:?}"))),
        }
    }
}

/// A real pair together with the fakes generated from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub id: String,
    pub split: Split,
    pub photo: PathBuf,
    pub sketch: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fake_photo: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fake_sketch: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedManifest {
    pub entries: Vec<GeneratedEntry>,
}

impl GeneratedManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
        let base = abs(path.parent().unwrap_or(Path::new("")))?;
        let rel = |p: &Path| -> Result<PathBuf> {
            let p = abs(p)?;
            Ok(p.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(p))
        };
        let mut out = String::new();
        for e in &self.entries {
            let mut e = e.clone();
            e.photo = rel(&e.photo)?;
            e.sketch = rel(&e.sketch)?;
            e.fake_photo = e.fake_photo.as_deref().map(rel).transpose()?;
            e.fake_sketch = e.fake_sketch.as_deref().map(rel).transpose()?;
            out.push_str(&serde_json::to_string(&e).expect("entries serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: GeneratedEntry = serde_json::from_str(line).map_err(|err| Error::ManifestParse {
                line: i + 1,
                message: err.to_string(),
            })?;
            e.photo = dataset::resolve(base, &e.photo);
            e.sketch = dataset::resolve(base, &e.sketch);
            e.fake_photo = e.fake_photo.map(|p| dataset::resolve(base, &p));
            e.fake_sketch = e.fake_sketch.map(|p| dataset::resolve(base, &p));
            for p in [Some(&e.photo), Some(&e.sketch), e.fake_photo.as_ref(), e.fake_sketch.as_ref()]
                .into_iter()
                .flatten()
            {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }

    /// The real pairs as a plain manifest.
    pub fn real_manifest(&self) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| dataset::ManifestEntry {
                    id: e.id.clone(),
                    photo: e.photo.clone(),
                    sketch: e.sketch.clone(),
                    split: e.split,
                })
                .collect(),
        }
    }

    /// The fakes as a plain manifest; a missing direction falls back to the real image.
    pub fn fake_manifest(&self) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| dataset::ManifestEntry {
                    id: e.id.clone(),
                    photo: e.fake_photo.clone().unwrap_or_else(|| e.photo.clone()),
                    sketch: e.fake_sketch.clone().unwrap_or_else(|| e.sketch.clone()),
                    split: e.split,
                })
                .collect(),
        }
    }
}

/// Translate every manifest image (both splits) and write 8-bit PNGs under
/// `out_dir/fake_sketch` and `out_dir/fake_photo`, plus `out_dir/manifest.jsonl`.
pub fn synthesize_dataset(
    state: &TrainState,
    manifest: &Manifest,
    direction: Direction,
    out_dir: &Path,
) -> Result<GeneratedManifest> {
    let want_sketch = matches!(direction, Direction::P2s | Direction::Both);
    let want_photo = matches!(direction, Direction::S2p | Direction::Both);
    for (want, sub) in [(want_sketch, "fake_sketch"), (want_photo, "fake_photo")] {
        if want {
            let d = out_dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let pre = &state.config.preprocess;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lift = |t: Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    };
    let mut entries = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let mut g = GeneratedEntry {
            id: e.id.clone(),
            split: e.split,
            photo: e.photo.clone(),
            sketch: e.sketch.clone(),
            fake_photo: None,
            fake_sketch: None,
        };
        if want_sketch {
            let x = lift(dataset::preprocess(&dataset::load_image(&e.photo)?, pre, false, &mut rng)?)?;
            let path = out_dir.join("fake_sketch").join(format!("{}.png", e.id));
            dataset::save_png(&state.photo_to_sketch(&x)?, &path)?;
            g.fake_sketch = Some(path);
        }
        if want_photo {
            let y = lift(dataset::preprocess(&dataset::load_image(&e.sketch)?, pre, false, &mut rng)?)?;
            let path = out_dir.join("fake_photo").join(format!("{}.png", e.id));
            dataset::save_png(&state.sketch_to_photo(&y)?, &path)?;
            g.fake_photo = Some(path);
        }
        entries.push(g);
    }
    let generated = GeneratedManifest { entries };
    generated.save(&out_dir.join("manifest.jsonl"))?;
    Ok(generated)
}
