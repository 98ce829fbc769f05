//! Recognizer fine-tuning with hard-mined triplets, embedding galleries,
//! score matrices, the two matching protocols and score fusion, plus an
//! eigenface baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{self, Kind, Reader, Writer};
use crate::dataset::{self, Manifest, PreprocessConfig, Split};
use crate::error::{Error, Result};
use crate::losses::{self, TripletConfig};
use crate::nets::{build_recognizer, Recognizer, RecognizerConfig};
use crate::optim::Sgd;
use crate::tensor::Tensor;
use crate::trainer::GeneratedManifest;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    First,
    Subsequent,
}

/// `lr = base_lr * gamma^floor(iter / stepsize)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPolicy {
    pub base_lr: f64,
    pub stepsize: u64,
    pub gamma: f64,
}

impl StepPolicy {
    pub fn lr_at(&self, iter: u64) -> f64 {
        self.base_lr * self.gamma.powi((iter / self.stepsize) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_policy: StepPolicy,
    pub iterations: u64,
    pub triplet: TripletConfig,
    pub stage: Stage,
    /// Distinct identities drawn per batch; every image of each is included.
    pub batch_identities: usize,
    pub preprocess: PreprocessConfig,
}

impl FineTuneConfig {
    pub fn first() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 2e-4,
            lr_policy: StepPolicy {
                base_lr: 0.3,
                stepsize: 100,
                gamma: 0.96,
            },
            iterations: 1000,
            triplet: TripletConfig::default(),
            stage: Stage::First,
            batch_identities: 4,
            preprocess: PreprocessConfig::default(),
        }
    }

    pub fn subsequent() -> Self {
        Self {
            lr_policy: StepPolicy {
                base_lr: 0.01,
                stepsize: 200,
                gamma: 0.96,
            },
            stage: Stage::Subsequent,
            ..Self::first()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.lr_policy;
        if !(p.gamma > 0.0 && p.gamma <= 1.0) {
            return Err(Error::Config(format!("lr_policy.gamma must lie in (0, 1], got {}", p.gamma)));
        }
        if !(p.base_lr > 0.0 && p.base_lr.is_finite()) || p.stepsize == 0 {
            return Err(Error::Config("lr_policy needs positive base_lr and stepsize".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_identities < 2 {
            return Err(Error::Config("batch_identities must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        self.triplet.validate()?;
        self.preprocess.validate()
    }
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self::first()
    }
}

// ---------------------------------------------------------------------------
// Training data

/// Which images of a paired manifest a recognizer sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Photo,
    Sketch,
    FakePhoto,
    FakeSketch,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Photo => 0,
            Domain::Sketch => 1,
            Domain::FakePhoto => 2,
            Domain::FakeSketch => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Domain::Photo,
            1 => Domain::Sketch,
            2 => Domain::FakePhoto,
            3 => Domain::FakeSketch,
            _ => return Err(Error::CheckpointCorrupt(format!("unknown domain tag {t}"))),
        })
    }
}

/// Labelled, preprocessed images; real and fake images of one identity share a label.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub images: Vec<Tensor>,
}

impl TrainingSet {
    pub fn new(items: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut images = Vec::new();
        for (id, img) in items {
            let next = index.len();
            let l = *index.entry(id.clone()).or_insert(next);
            labels.push(l);
            ids.push(id);
            images.push(lift(img)?);
        }
        Ok(Self { ids, labels, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Real and fake images of one modality for the given split.
    pub fn from_generated(
        generated: &GeneratedManifest,
        modality: Modality,
        split: Split,
        preprocess: &PreprocessConfig,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut items = Vec::new();
        for e in generated.entries.iter().filter(|e| e.split == split) {
            let (real, fake) = match modality {
                Modality::Photo => (&e.photo, e.fake_photo.as_ref()),
                Modality::Sketch => (&e.sketch, e.fake_sketch.as_ref()),
            };
            let fake = fake.ok_or_else(|| Error::Invalid(format!("{} lacks a fake {modality:?}", e.id)))?;
            for p in [real, fake] {
                items.push((e.id.clone(), dataset::preprocess(&dataset::load_image(p)?, preprocess, false, &mut rng)?));
            }
        }
        Self::new(items)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Photo,
    Sketch,
}

fn lift(t: Tensor) -> Result<Tensor> {
    if t.shape().len() == 4 {
        return Ok(t);
    }
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

// ---------------------------------------------------------------------------
// Triplet batches

/// One anchor with its positive and candidate negatives, as batch-local indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorPlan {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// A batch of training-set images and the triplets drawn on it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    /// Indices into the training set.
    pub images: Vec<usize>,
    pub anchors: Vec<AnchorPlan>,
}

/// Draw `batch_identities` identities, take all their images, and make every
/// image with a same-identity partner an anchor. Positives are uniform among
/// partners; every other-identity image is a candidate negative.
pub fn plan_batch(set: &TrainingSet, batch_identities: usize, rng: &mut ChaCha8Rng) -> Result<TripletBatch> {
    let n_ids = set.num_identities();
    if n_ids < 2 {
        return Err(Error::Invalid(format!(
            "triplet fine-tuning needs at least 2 identities, found {n_ids}"
        )));
    }
    let mut labels: Vec<usize> = (0..n_ids).collect();
    labels.shuffle(rng);
    labels.truncate(batch_identities.min(n_ids));
    labels.sort_unstable();
    let images: Vec<usize> = (0..set.len()).filter(|&i| labels.contains(&set.labels[i])).collect();
    let local_label: Vec<usize> = images.iter().map(|&i| set.labels[i]).collect();
    let mut anchors = Vec::new();
    for a in 0..images.len() {
        let partners: Vec<usize> = (0..images.len())
            .filter(|&j| j != a && local_label[j] == local_label[a])
            .collect();
        let Some(&positive) = partners.choose(rng) else {
            continue;
        };
        let negatives = (0..images.len()).filter(|&j| local_label[j] != local_label[a]).collect();
        anchors.push(AnchorPlan {
            anchor: a,
            positive,
            negatives,
        });
    }
    if anchors.is_empty() {
        return Err(Error::Invalid("no identity in the batch has two images".into()));
    }
    Ok(TripletBatch { images, anchors })
}

fn stack_batch(set: &TrainingSet, idx: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = idx.iter().map(|&i| set.images[i].clone()).collect();
    Tensor::stack(&parts)
}

/// Mean over anchors of the hard-mined triplet loss, as used by [`fine_tune`].
pub fn batch_triplet_loss(recognizer: &Recognizer, set: &TrainingSet, batch: &TripletBatch, cfg: &TripletConfig) -> Result<f64> {
    let g = Graph::new();
    let p = recognizer.params().bind(&g, false);
    let x = g.constant(stack_batch(set, &batch.images)?);
    let emb = recognizer.embed_var(&g, &p, x)?;
    let loss = mined_mean(&g, emb, batch, cfg)?;
    Ok(g.scalar(loss))
}

fn mined_mean(g: &Graph, emb: crate::autograd::Var, batch: &TripletBatch, cfg: &TripletConfig) -> Result<crate::autograd::Var> {
    let mut terms = Vec::with_capacity(batch.anchors.len());
    for a in &batch.anchors {
        let l = losses::triplet_mined(g, emb, a.anchor, a.positive, &a.negatives, cfg)?;
        terms.push(g.reshape(l, &[1])?);
    }
    Ok(g.mean(g.concat(&terms)?))
}

/// Every image as anchor over the whole set, positives fixed by `seed`.
pub fn full_set_plan(set: &TrainingSet, seed: u64) -> Result<TripletBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan_batch(set, usize::MAX, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Momentum-SGD fine-tuning on triplet loss. `on_iter` sees each iteration's
/// record and the recognizer after its update.
pub fn fine_tune_with(
    recognizer: &Recognizer,
    set: &TrainingSet,
    config: &FineTuneConfig,
    seed: u64,
    mut on_iter: impl FnMut(&IterRecord, &Recognizer) -> Result<()>,
) -> Result<Recognizer> {
    config.validate()?;
    let mut net = recognizer.clone();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for iter in 0..config.iterations {
        let batch = plan_batch(set, config.batch_identities, &mut rng)?;
        let lr = config.lr_policy.lr_at(iter);
        let g = Graph::new();
        let p = net.params().bind(&g, true);
        let x = g.constant(stack_batch(set, &batch.images)?);
        let emb = net.embed_var(&g, &p, x)?;
        let loss = mined_mean(&g, emb, &batch, &config.triplet)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("triplet loss at iteration {iter}")));
        }
        let grads = g.backward(loss)?;
        let gs = net.params().grads(&p, &grads);
        drop(g);
        sgd.update(net.params_mut(), &gs, lr)?;
        on_iter(&IterRecord { iter, lr, loss: value }, &net)?;
    }
    Ok(net)
}

pub fn fine_tune(recognizer: &Recognizer, set: &TrainingSet, config: &FineTuneConfig, seed: u64) -> Result<Recognizer> {
    fine_tune_with(recognizer, set, config, seed, |_, _| Ok(()))
}

/// A freshly initialized recognizer.
pub fn init_recognizer(config: &RecognizerConfig, seed: u64) -> Result<Recognizer> {
    let mut r = build_recognizer(config)?;
    r.params_mut().init(seed);
    Ok(r)
}

pub fn save_recognizer(r: &Recognizer, path: &Path) -> Result<()> {
    let mut w = Writer::new(Kind::Recognizer);
    w.str(&serde_json::to_string(r.config()).expect("config serializes"));
    w.params(r.params());
    w.write(path)
}

pub fn load_recognizer(path: &Path) -> Result<Recognizer> {
    let bytes = checkpoint::read_file(path)?;
    let mut rd = Reader::open(&bytes, Kind::Recognizer)?;
    let config: RecognizerConfig =
        serde_json::from_str(&rd.str()?).map_err(|e| Error::CheckpointCorrupt(format!("config: {e}")))?;
    let mut r = build_recognizer(&config)?;
    rd.params_into(r.params_mut())?;
    rd.finish()?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Galleries and scores

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub embedding: Vec<f64>,
    pub domain: Domain,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingGallery {
    pub entries: Vec<GalleryEntry>,
}

const GALLERY_MAGIC: &[u8; 4] = b"IDGL";
const GALLERY_VERSION: u32 = 1;

impl EmbeddingGallery {
    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.embedding.len())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(GALLERY_MAGIC);
        b.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.dim().unwrap_or(0) as u64).to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            b.extend_from_slice(&(e.id.len() as u64).to_le_bytes());
            b.extend_from_slice(e.id.as_bytes());
            b.push(e.domain.tag());
            for v in &e.embedding {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointCorrupt(format!("gallery: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("unexpected end of data"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != GALLERY_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != GALLERY_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: GALLERY_VERSION,
            });
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        let dim = u64_at(take(8)?);
        let count = u64_at(take(8)?);
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u64_at(take(8)?);
            let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not utf-8"))?;
            let domain = Domain::from_tag(take(1)?[0])?;
            let embedding = take(dim.checked_mul(8).ok_or_else(|| bad("dimension overflow"))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(GalleryEntry { id, embedding, domain });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// Embed labelled images one by one (results do not depend on batching).
pub fn embed_images(recognizer: &Recognizer, images: &[(String, Tensor)], domain: Domain) -> Result<EmbeddingGallery> {
    let entries = images
        .iter()
        .map(|(id, img)| {
            let e = recognizer.embed(&lift(img.clone())?)?;
            Ok(GalleryEntry {
                id: id.clone(),
                embedding: e.into_data(),
                domain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingGallery { entries })
}

/// Embed the photo (for `Photo`/`FakePhoto`) or sketch images of a manifest.
pub fn embed_manifest(
    recognizer: &Recognizer,
    manifest: &Manifest,
    domain: Domain,
    preprocess: &PreprocessConfig,
) -> Result<EmbeddingGallery> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut images = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let path = match domain {
            Domain::Photo | Domain::FakePhoto => &e.photo,
            Domain::Sketch | Domain::FakeSketch => &e.sketch,
        };
        images.push((e.id.clone(), dataset::preprocess(&dataset::load_image(path)?, preprocess, false, &mut rng)?));
    }
    embed_images(recognizer, &images, domain)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Cosine,
    NegL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub probe_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    /// Row-major `probes x gallery`.
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(probe_ids: Vec<String>, gallery_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != probe_ids.len() * gallery_ids.len() {
            return Err(Error::Shape(format!(
                "{} scores for {}x{} labels",
                scores.len(),
                probe_ids.len(),
                gallery_ids.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score matrix entry".into()));
        }
        Ok(Self {
            probe_ids,
            gallery_ids,
            scores,
        })
    }

    pub fn rows(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            probe_ids: self.probe_ids.clone(),
            gallery_ids: self.gallery_ids.clone(),
            scores: self.scores.iter().map(|&s| f(s)).collect(),
        }
    }

    /// Header row of gallery ids, then one row per probe.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe");
        for g in &self.gallery_ids {
            s.push(',');
            s.push_str(g);
        }
        s.push('\n');
        for (i, p) in self.probe_ids.iter().enumerate() {
            s.push_str(p);
            for v in self.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn similarity(a: &[f64], b: &[f64], sim: Similarity) -> f64 {
    match sim {
        Similarity::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        }
        Similarity::NegL2 => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
    }
}

pub fn score_matrix(probes: &EmbeddingGallery, gallery: &EmbeddingGallery, sim: Similarity) -> Result<ScoreMatrix> {
    let dims = probes
        .entries
        .iter()
        .chain(&gallery.entries)
        .map(|e| e.embedding.len())
        .collect::<std::collections::BTreeSet<_>>();
    if dims.len() > 1 {
        return Err(Error::Shape(format!("embedding dimensions differ: {dims:?}")));
    }
    let mut scores = Vec::with_capacity(probes.entries.len() * gallery.entries.len());
    for p in &probes.entries {
        for g in &gallery.entries {
            scores.push(similarity(&p.embedding, &g.embedding, sim));
        }
    }
    ScoreMatrix::new(probes.ids(), gallery.ids(), scores)
}

/// Gallery indices by descending score, ties toward the lower index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    losses::top_k_indices(row, row.len())
}

/// Fraction of probes whose identity appears among the `k` best gallery entries.
pub fn rank_k_accuracy(scores: &ScoreMatrix, k: usize) -> Result<f64> {
    if scores.rows() == 0 {
        return Err(Error::Invalid("no probes to rank".into()));
    }
    let mut hits = 0usize;
    for (i, pid) in scores.probe_ids.iter().enumerate() {
        if !scores.gallery_ids.contains(pid) {
            return Err(Error::Invalid(format!("probe id {pid} is absent from the gallery")));
        }
        let order = ranking(scores.row(i));
        if order.iter().take(k).any(|&j| &scores.gallery_ids[j] == pid) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.rows() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionRule {
    /// Per-matrix min-max to [0, 1], then the elementwise mean.
    #[default]
    MinMaxMean,
    /// Raw elementwise sum.
    Sum,
    /// Per-matrix standardization, then the elementwise mean.
    ZScore,
}

fn min_max(m: &ScoreMatrix) -> ScoreMatrix {
    let lo = m.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 {
        m.map(|s| (s - lo) / range)
    } else {
        m.map(|_| 0.0)
    }
}

fn z_score(m: &ScoreMatrix) -> ScoreMatrix {
    let n = m.scores.len() as f64;
    let mean = m.scores.iter().sum::<f64>() / n;
    let sd = (m.scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        m.map(|s| (s - mean) / sd)
    } else {
        m.map(|_| 0.0)
    }
}

pub fn fuse_scores_with(a: &ScoreMatrix, b: &ScoreMatrix, rule: FusionRule) -> Result<ScoreMatrix> {
    if a.probe_ids != b.probe_ids || a.gallery_ids != b.gallery_ids {
        return Err(Error::Invalid("fused score matrices must share labels and order".into()));
    }
    let (na, nb, scale) = match rule {
        FusionRule::MinMaxMean => (min_max(a), min_max(b), 0.5),
        FusionRule::ZScore => (z_score(a), z_score(b), 0.5),
        FusionRule::Sum => (a.clone(), b.clone(), 1.0),
    };
    let scores = na.scores.iter().zip(&nb.scores).map(|(x, y)| scale * (x + y)).collect();
    ScoreMatrix::new(a.probe_ids.clone(), a.gallery_ids.clone(), scores)
}

pub fn fuse_scores(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<ScoreMatrix> {
    fuse_scores_with(a, b, FusionRule::MinMaxMean)
}

// ---------------------------------------------------------------------------
// Matching protocols

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Real query sketches against synthesized sketches.
    Sketch,
    /// Synthesized photos against real photos.
    Photo,
    Fused,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Protocol::Sketch),
            "photo" => Ok(Protocol::Photo),
            "fused" => Ok(Protocol::Fused),
            other => Err(Error::Invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

fn expect_domain(g: &EmbeddingGallery, want: Domain, role: &str) -> Result<()> {
    if let Some(e) = g.entries.iter().find(|e| e.domain != want) {
        return Err(Error::Invalid(format!(
            "{role} entry {} has domain {:?}, expected {want:?}",
            e.id, e.domain
        )));
    }
    Ok(())
}

/// Sketch matching: probes are real sketches, the gallery synthesized sketches.
pub fn sketch_matching_scores(probes: &EmbeddingGallery, gallery: &EmbeddingGallery, sim: Similarity) -> Result<ScoreMatrix> {
    expect_domain(probes, Domain::Sketch, "probe")?;
    expect_domain(gallery, Domain::FakeSketch, "gallery")?;
    score_matrix(probes, gallery, sim)
}

/// Photo matching: probes are synthesized photos, the gallery real photos.
pub fn photo_matching_scores(probes: &EmbeddingGallery, gallery: &EmbeddingGallery, sim: Similarity) -> Result<ScoreMatrix> {
    expect_domain(probes, Domain::FakePhoto, "probe")?;
    expect_domain(gallery, Domain::Photo, "gallery")?;
    score_matrix(probes, gallery, sim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionRates {
    pub sketch_matching: f64,
    pub photo_matching: f64,
    pub fused: f64,
}

pub struct ProtocolScores {
    pub sketch: ScoreMatrix,
    pub photo: ScoreMatrix,
    pub fused: ScoreMatrix,
}

/// Both protocols and their fusion over one split of a generated manifest.
pub fn protocol_scores(
    phi_photo: &Recognizer,
    phi_sketch: &Recognizer,
    generated: &GeneratedManifest,
    split: Split,
    preprocess: &PreprocessConfig,
    sim: Similarity,
) -> Result<ProtocolScores> {
    let subset = GeneratedManifest {
        entries: generated.entries.iter().filter(|e| e.split == split).cloned().collect(),
    };
    if subset.entries.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let (real, fake) = (subset.real_manifest(), subset.fake_manifest());
    if subset.entries.iter().any(|e| e.fake_photo.is_none() || e.fake_sketch.is_none()) {
        return Err(Error::Invalid("recognition protocols need fakes in both directions".into()));
    }
    let sketch_probes = embed_manifest(phi_sketch, &real, Domain::Sketch, preprocess)?;
    let sketch_gallery = embed_manifest(phi_sketch, &fake, Domain::FakeSketch, preprocess)?;
    let photo_probes = embed_manifest(phi_photo, &fake, Domain::FakePhoto, preprocess)?;
    let photo_gallery = embed_manifest(phi_photo, &real, Domain::Photo, preprocess)?;
    let sketch = sketch_matching_scores(&sketch_probes, &sketch_gallery, sim)?;
    let photo = photo_matching_scores(&photo_probes, &photo_gallery, sim)?;
    let fused = fuse_scores(&sketch, &photo)?;
    Ok(ProtocolScores { sketch, photo, fused })
}

impl ProtocolScores {
    pub fn rank1(&self) -> Result<RecognitionRates> {
        Ok(RecognitionRates {
            sketch_matching: rank_k_accuracy(&self.sketch, 1)?,
            photo_matching: rank_k_accuracy(&self.photo, 1)?,
            fused: rank_k_accuracy(&self.fused, 1)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Eigenfaces

/// PCA basis from mean-centred training vectors.
#[derive(Clone, Debug)]
pub struct EigenBasis {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl EigenBasis {
    /// Snapshot PCA through the `N x N` Gram matrix. Components whose
    /// eigenvalue is negligible are dropped, so the basis may be shorter than
    /// `num_components` for degenerate data.
    pub fn fit(train: &[Vec<f64>], num_components: usize) -> Result<Self> {
        let n = train.len();
        if n == 0 || num_components == 0 || num_components > n {
            return Err(Error::Invalid(format!(
                "num_components must lie in 1..={n}, got {num_components}"
            )));
        }
        let d = train[0].len();
        if train.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("training vectors differ in length".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let centred: Vec<Vec<f64>> = train
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect())
            .collect();
        let gram = DMatrix::from_fn(n, n, |i, j| centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum());
        let eig: SymmetricEigen<f64, nalgebra::Dyn> = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-10 * n as f64;
        let mut components = Vec::new();
        let mut eigenvalues = Vec::new();
        for &k in order.iter().take(num_components) {
            let lambda = eig.eigenvalues[k];
            if lambda <= tol || lambda <= 0.0 {
                break;
            }
            let v = eig.eigenvectors.column(k);
            let mut u = vec![0.0; d];
            for (i, row) in centred.iter().enumerate() {
                for (uj, x) in u.iter_mut().zip(row) {
                    *uj += v[i] * x;
                }
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            components.push(u);
            eigenvalues.push(lambda / n as f64);
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|u| u.iter().zip(v.iter().zip(&self.mean)).map(|(a, (x, m))| a * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (u, c) in self.components.iter().zip(coeffs) {
            for (o, a) in out.iter_mut().zip(u) {
                *o += c * a;
            }
        }
        out
    }
}

/// Flattened pixel vector of an image tensor.
pub fn flatten(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// Eigenface matching: negative Euclidean distance between PCA coefficients.
pub fn eigenface_match(
    train: &[Vec<f64>],
    probes: &[(String, Vec<f64>)],
    gallery: &[(String, Vec<f64>)],
    num_components: usize,
) -> Result<ScoreMatrix> {
    let basis = EigenBasis::fit(train, num_components)?;
    let d = basis.mean.len();
    if probes.iter().chain(gallery).any(|(_, v)| v.len() != d) {
        return Err(Error::Shape("probe or gallery vector has the wrong length".into()));
    }
    let pc: Vec<Vec<f64>> = probes.iter().map(|(_, v)| basis.project(v)).collect();
    let gc: Vec<Vec<f64>> = gallery.iter().map(|(_, v)| basis.project(v)).collect();
    let mut scores = Vec::with_capacity(pc.len() * gc.len());
    for p in &pc {
        for g in &gc {
            scores.push(similarity(p, g, Similarity::NegL2));
        }
    }
    ScoreMatrix::new(
        probes.iter().map(|(id, _)| id.clone()).collect(),
        gallery.iter().map(|(id, _)| id.clone()).collect(),
        scores,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    fn gallery(vs: &[&[f64]], domain: Domain) -> EmbeddingGallery {
        EmbeddingGallery {
            entries: vs
                .iter()
                .enumerate()
                .map(|(i, v)| GalleryEntry {
                    id: format!("id{i}"),
                    embedding: v.to_vec(),
                    domain,
                })
                .collect(),
        }
    }

    #[test]
    fn step_policy() {
        let p = FineTuneConfig::first().lr_policy;
        assert_eq!(p.lr_at(0), 0.3);
        assert_eq!(p.lr_at(99), 0.3);
        assert!((p.lr_at(100) - 0.96 * 0.3).abs() < 1e-15);
        let s = FineTuneConfig::subsequent();
        assert_eq!((s.lr_policy.base_lr, s.lr_policy.stepsize), (0.01, 200));
        assert!(FineTuneConfig { iterations: 0, ..s.clone() }.validate().is_err());
    }

    #[test]
    fn cosine_scores() {
        let a = gallery(&[&[1.0, 0.0], &[0.0, 2.0]], Domain::Photo);
        let m = score_matrix(&a, &a, Similarity::Cosine).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(m.get(0, 1), 0.0);
        let bad = gallery(&[&[1.0, 0.0, 0.0]], Domain::Photo);
        assert!(score_matrix(&a, &bad, Similarity::Cosine).is_err());
    }

    #[test]
    fn rank_one_examples() {
        let m = ScoreMatrix::new(labels(2), labels(2), vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(rank_k_accuracy(&m, 1).unwrap(), 1.0);
        let m = ScoreMatrix::new(labels(2), labels(2), vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        assert_eq!(rank_k_accuracy(&m, 1).unwrap(), 0.5);
        let absent = ScoreMatrix::new(vec!["x".into()], labels(2), vec![0.0, 1.0]).unwrap();
        assert!(rank_k_accuracy(&absent, 1).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let m = ScoreMatrix::new(vec!["id1".into()], labels(2), vec![0.5, 0.5]).unwrap();
        assert_eq!(rank_k_accuracy(&m, 1).unwrap(), 0.0);
        assert_eq!(rank_k_accuracy(&m, 2).unwrap(), 1.0);
    }

    #[test]
    fn fusion_cases() {
        let perfect = ScoreMatrix::new(
            labels(4),
            labels(4),
            (0..16).map(|k| if k / 4 == k % 4 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let noise = ScoreMatrix::new(
            labels(4),
            labels(4),
            vec![0.9, 0.1, 0.3, 0.2, 0.4, 0.2, 0.8, 0.1, 0.7, 0.6, 0.1, 0.3, 0.2, 0.5, 0.4, 0.6],
        )
        .unwrap();
        let fused = fuse_scores(&perfect, &noise).unwrap();
        assert!(rank_k_accuracy(&fused, 1).unwrap() >= rank_k_accuracy(&noise, 1).unwrap());
        let flat = ScoreMatrix::new(labels(2), labels(2), vec![3.0; 4]).unwrap();
        assert_eq!(fuse_scores(&flat, &flat).unwrap().scores, vec![0.0; 4]);
        let other = ScoreMatrix::new(labels(2), vec!["a".into(), "b".into()], vec![0.0; 4]).unwrap();
        assert!(fuse_scores(&flat, &other).is_err());
        for rule in [FusionRule::Sum, FusionRule::ZScore] {
            assert_eq!(fuse_scores_with(&perfect, &perfect, rule).unwrap().rows(), 4);
        }
    }

    #[test]
    fn protocols_check_domains() {
        let real = gallery(&[&[1.0, 0.0]], Domain::Sketch);
        let fake = gallery(&[&[1.0, 0.0]], Domain::FakeSketch);
        assert!(sketch_matching_scores(&real, &fake, Similarity::Cosine).is_ok());
        assert!(sketch_matching_scores(&fake, &real, Similarity::Cosine).is_err());
        assert!(photo_matching_scores(&real, &fake, Similarity::Cosine).is_err());
    }

    #[test]
    fn gallery_round_trip_and_csv() {
        let g = gallery(&[&[1.0, -2.5], &[0.0, 3.0]], Domain::FakePhoto);
        let back = EmbeddingGallery::from_bytes(&g.to_bytes()).unwrap();
        assert_eq!(back, g);
        assert!(EmbeddingGallery::from_bytes(&g.to_bytes()[..10]).is_err());
        assert!(EmbeddingGallery::from_bytes(&EmbeddingGallery::default().to_bytes()).unwrap().entries.is_empty());
        let m = ScoreMatrix::new(labels(1), labels(2), vec![0.5, 1.0]).unwrap();
        assert_eq!(m.to_csv(), "probe,id0,id1\nid0,0.5,1\n");
    }

    #[test]
    fn two_sample_pca_matches_closed_form() {
        // two points differ only along e1 by 4: mean (1, 5), component ±e1, coefficients ±2
        let train = vec![vec![-1.0, 5.0], vec![3.0, 5.0]];
        let b = EigenBasis::fit(&train, 1).unwrap();
        assert_eq!(b.components.len(), 1);
        assert!((b.components[0][0].abs() - 1.0).abs() < 1e-12 && b.components[0][1].abs() < 1e-12);
        let c0 = b.project(&train[0])[0];
        let c1 = b.project(&train[1])[0];
        assert!((c0.abs() - 2.0).abs() < 1e-12 && (c0 + c1).abs() < 1e-12);
        assert!((b.eigenvalues[0] - 4.0).abs() < 1e-12);
        // a second component does not exist: rank truncation
        assert_eq!(EigenBasis::fit(&train, 2).unwrap().components.len(), 1);
    }

    #[test]
    fn eigenface_self_match_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train: Vec<Vec<f64>> = (0..6).map(|_| (0..20).map(|_| rng.random::<f64>()).collect()).collect();
        let items: Vec<(String, Vec<f64>)> = train.iter().enumerate().map(|(i, v)| (format!("id{i}"), v.clone())).collect();
        let m = eigenface_match(&train, &items, &items, 4).unwrap();
        for i in 0..6 {
            assert_eq!(ranking(m.row(i))[0], i);
            assert_eq!(m.get(i, i), 0.0);
        }
        let probe: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let b = EigenBasis::fit(&train, k).unwrap();
            let r = b.reconstruct(&b.project(&probe));
            let err: f64 = r.iter().zip(&probe).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(eigenface_match(&train, &items, &items, 7).is_err());
    }

    #[test]
    fn plan_batch_structure() {
        let items: Vec<(String, Tensor)> = (0..5)
            .flat_map(|i| (0..2).map(move |_| (format!("p{i}"), Tensor::zeros(&[3, 8, 8]))))
            .collect();
        let set = TrainingSet::new(items).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = plan_batch(&set, 3, &mut rng).unwrap();
        assert_eq!(b.images.len(), 6);
        assert_eq!(b.anchors.len(), 6);
        for a in &b.anchors {
            let la = set.labels[b.images[a.anchor]];
            assert_eq!(set.labels[b.images[a.positive]], la);
            assert_eq!(a.negatives.len(), 4);
            assert!(a.negatives.iter().all(|&n| set.labels[b.images[n]] != la));
        }
        let one = TrainingSet::new(vec![("a".into(), Tensor::zeros(&[3, 8, 8]))]).unwrap();
        assert!(plan_batch(&one, 2, &mut rng).is_err());
    }

    #[test]
    fn satisfied_margins_leave_parameters_unchanged() {
        let cfg = RecognizerConfig {
            embedding_dim: 4,
            base_filters: 2,
            num_identities: 2,
            input_size: 8,
            ..RecognizerConfig::default()
        };
        let r = init_recognizer(&cfg, 11).unwrap();
        let img = |v: f64| Tensor::full(&[3, 8, 8], v);
        let set = TrainingSet::new(vec![
            ("a".into(), img(-1.0)),
            ("a".into(), img(-1.0)),
            ("b".into(), img(1.0)),
            ("b".into(), img(1.0)),
        ])
        .unwrap();
        let e = r.embed(&Tensor::stack(&[lift(img(-1.0)).unwrap(), lift(img(1.0)).unwrap()]).unwrap()).unwrap();
        let gap: f64 = (0..4).map(|j| (e.data()[j] - e.data()[4 + j]).powi(2)).sum();
        assert!(gap > 1e-6);
        let ft = FineTuneConfig {
            weight_decay: 0.0,
            iterations: 3,
            batch_identities: 2,
            triplet: TripletConfig {
                margin_alpha: gap / 2.0,
                hard_k: 4,
            },
            ..FineTuneConfig::first()
        };
        let plan = full_set_plan(&set, 0).unwrap();
        assert_eq!(batch_triplet_loss(&r, &set, &plan, &ft.triplet).unwrap(), 0.0);
        let tuned = fine_tune(&r, &set, &ft, 0).unwrap();
        assert_eq!(tuned.params().hash(), r.params().hash());
    }

    proptest! {
        #[test]
        fn rank_k_is_monotone_and_transform_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let scores: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = ScoreMatrix::new(labels(n), labels(n), scores).unwrap();
            let mut last = 0.0;
            for k in 1..=n {
                let r = rank_k_accuracy(&m, k).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
            prop_assert_eq!(last, 1.0);
            let t = m.map(|s| (3.0 * s).exp() + 7.0);
            for k in 1..=n {
                prop_assert_eq!(rank_k_accuracy(&m, k).unwrap(), rank_k_accuracy(&t, k).unwrap());
            }
        }
    }
}
