//! Mutual cyclic optimization: a base synthesizer, then rounds of recognizer
//! fine-tuning on real plus fake data followed by identity-aware synthesis
//! training under the new recognizers.
//!
//! Layout under the output directory:
//!
//! ```text
//! out/progress.json                 completed stages and artifact hashes
//! out/rounds.json                   every RoundRecord so far
//! out/base/synth.ckpt, fake/, quality.json, phi_photo.ckpt, phi_sketch.ckpt
//! out/round_000/phi_photo.ckpt, phi_sketch.ckpt, synth.ckpt, fake/,
//!               quality.json, recognition.json, record.json
//! ```
//!
//! A stage is skipped on re-invocation when progress.json lists it and every
//! artifact on disk still hashes to the recorded value. All stage seeds are
//! derived from the run seed, so a resumed run reproduces an uninterrupted one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, QualityConfig, QualityTarget};
use crate::nets::{Recognizer, RecognizerConfig};
use crate::recognition::{self, FineTuneConfig, Modality, RecognitionRates, Similarity, TrainingSet};
use crate::trainer::{self, derive_seed, Direction, GeneratedManifest, Recognizers, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub seed: u64,
    pub max_rounds: usize,
    /// Stop once the relative round-over-round gain in fused rank-1 falls
    /// below this. A negative value disables the check.
    pub stability_epsilon: f64,
    pub eval_every_round: bool,
    /// Initialize each round's synthesizer from the previous one instead of from scratch.
    pub warm_start: bool,
    pub eval_split: Split,
    pub similarity: Similarity,
    pub synth_config: TrainConfig,
    pub recognizer: RecognizerConfig,
    pub finetune_first: FineTuneConfig,
    pub finetune_next: FineTuneConfig,
    pub quality: QualityConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_rounds: 2,
            stability_epsilon: 0.005,
            eval_every_round: true,
            warm_start: false,
            eval_split: Split::Test,
            similarity: Similarity::Cosine,
            synth_config: TrainConfig::default(),
            recognizer: RecognizerConfig::default(),
            finetune_first: FineTuneConfig::first(),
            finetune_next: FineTuneConfig::subsequent(),
            quality: QualityConfig::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds < 1 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if !self.stability_epsilon.is_finite() {
            return Err(Error::Config("stability_epsilon must be finite".into()));
        }
        let prefixed = |key: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{key}.{m}")),
                other => other,
            })
        };
        prefixed("synth_config", self.synth_config.validate())?;
        prefixed("recognizer", self.recognizer.validate())?;
        prefixed("finetune_first", self.finetune_first.validate())?;
        prefixed("finetune_next", self.finetune_next.validate())?;
        prefixed("quality", self.quality.validate())
    }

    fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// A file (or directory tree) produced by a stage, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ArtifactRef {
    fn new(out: &Path, rel: impl Into<PathBuf>) -> Result<Self> {
        let path = rel.into();
        let sha256 = artifact_hash(&out.join(&path))?;
        Ok(Self { path, sha256 })
    }

    pub fn verify(&self, out: &Path) -> Result<bool> {
        let p = out.join(&self.path);
        if !p.exists() {
            return Ok(false);
        }
        Ok(artifact_hash(&p)? == self.sha256)
    }
}

/// SHA-256 of a file, or of the sorted (relative name, file hash) list of a directory.
pub fn artifact_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return checkpoint::file_hash(path);
    }
    if !path.is_dir() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).expect("walked below root");
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(checkpoint::file_hash(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub sketch: MetricReport,
    pub photo: MetricReport,
}

/// Rank-1 rates under the recognizers a round started with and those it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionSummary {
    pub pre: RecognitionRates,
    pub post: RecognitionRates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub synth_checkpoint: ArtifactRef,
    pub recognizer_photo: ArtifactRef,
    pub recognizer_sketch: ArtifactRef,
    /// Parameter hashes of the recognizers the synthesizer was trained under,
    /// as stored inside the synthesis checkpoint.
    pub synth_recognizer_params: (String, String),
    pub fake_dataset: ArtifactRef,
    pub quality: Option<QualitySummary>,
    pub recognition: Option<RecognitionSummary>,
}

impl RoundRecord {
    /// Every referenced artifact exists with its recorded hash, and the
    /// synthesizer was trained under this round's recognizers.
    pub fn verify_provenance(&self, out: &Path) -> Result<()> {
        for a in [
            &self.synth_checkpoint,
            &self.recognizer_photo,
            &self.recognizer_sketch,
            &self.fake_dataset,
        ] {
            if !a.verify(out)? {
                return Err(Error::Invalid(format!(
                    "round {}: artifact {} is missing or modified",
                    self.round_index,
                    a.path.display()
                )));
            }
        }
        let state = trainer::load_checkpoint(&out.join(&self.synth_checkpoint.path))?;
        let p = recognition::load_recognizer(&out.join(&self.recognizer_photo.path))?;
        let s = recognition::load_recognizer(&out.join(&self.recognizer_sketch.path))?;
        let expected = (p.params().hash(), s.params().hash());
        if state.recognizer_hashes.as_ref() != Some(&expected) || self.synth_recognizer_params != expected {
            return Err(Error::Invalid(format!(
                "round {}: synthesizer was not trained under this round's recognizers",
                self.round_index
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageName {
    BaseTrain,
    BaseSynthesize,
    InitRecognizers,
    FineTune,
    Train,
    Synthesize,
    Evaluate,
}

impl StageName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::BaseTrain => "base_train",
            StageName::BaseSynthesize => "base_synthesize",
            StageName::InitRecognizers => "init_recognizers",
            StageName::FineTune => "finetune",
            StageName::Train => "train",
            StageName::Synthesize => "synthesize",
            StageName::Evaluate => "evaluate",
        }
    }
}

/// Reported after each stage; `round` is `None` for base stages.
#[derive(Clone, Debug)]
pub struct StageEvent {
    pub round: Option<usize>,
    pub stage: StageName,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    config_hash: String,
    stages: Vec<StageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageEntry {
    key: String,
    artifacts: Vec<ArtifactRef>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

struct Runner<'a> {
    out: PathBuf,
    progress: Progress,
    hook: &'a mut dyn FnMut(&StageEvent) -> Result<()>,
}

impl Runner<'_> {
    /// Run `body` unless the stage is already complete; `body` returns the
    /// artifact paths it produced, relative to the output directory.
    fn stage(
        &mut self,
        round: Option<usize>,
        stage: StageName,
        body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let key = match round {
            Some(r) => format!("{}/{}", round_dir(r), stage.as_str()),
            None => format!("base/{}", stage.as_str()),
        };
        let done = match self.progress.stages.iter().find(|s| s.key == key) {
            Some(entry) => {
                let mut ok = true;
                for a in &entry.artifacts {
                    ok &= a.verify(&self.out)?;
                }
                ok
            }
            None => false,
        };
        if done {
            log::info!("stage {key}: complete, skipping");
        } else {
            log::info!("stage {key}: running");
            self.progress.stages.retain(|s| s.key != key);
            let produced = body(&self.out).map_err(|e| Error::Stage {
                round,
                stage: stage.as_str().to_string(),
                source: Box::new(e),
            })?;
            let artifacts = produced
                .into_iter()
                .map(|p| ArtifactRef::new(&self.out, p))
                .collect::<Result<Vec<_>>>()?;
            self.progress.stages.push(StageEntry { key, artifacts });
            write_json(&self.out.join("progress.json"), &self.progress)?;
        }
        (self.hook)(&StageEvent {
            round,
            stage,
            skipped: done,
        })
    }
}

pub fn round_dir(round: usize) -> String {
    format!("round_{round:03}")
}

fn load_pair(out: &Path, dir: &str) -> Result<(Recognizer, Recognizer)> {
    Ok((
        recognition::load_recognizer(&out.join(dir).join("phi_photo.ckpt"))?,
        recognition::load_recognizer(&out.join(dir).join("phi_sketch.ckpt"))?,
    ))
}

fn quality(generated: &GeneratedManifest, split: Split, cfg: &QualityConfig) -> Result<QualitySummary> {
    let subset = GeneratedManifest {
        entries: generated.entries.iter().filter(|e| e.split == split).cloned().collect(),
    };
    let (real, fake) = (subset.real_manifest(), subset.fake_manifest());
    Ok(QualitySummary {
        sketch: metrics::evaluate_quality(&fake, &real, QualityTarget::Sketch, cfg)?,
        photo: metrics::evaluate_quality(&fake, &real, QualityTarget::Photo, cfg)?,
    })
}

fn synth_train(
    manifest: &Manifest,
    config: &TrainConfig,
    recognizers: Option<Recognizers>,
    warm_from: Option<&TrainState>,
    log: &Path,
) -> Result<TrainState> {
    let cache = crate::dataset::PairCache::load(manifest, Split::Train)?;
    let mut state = TrainState::new(config.clone())?;
    if let Some(prev) = warm_from {
        state.g_x.params_mut().load(&prev.g_x.params().named())?;
        state.g_y.params_mut().load(&prev.g_y.params().named())?;
        state.d_x.params_mut().load(&prev.d_x.params().named())?;
        state.d_y.params_mut().load(&prev.d_y.params().named())?;
    }
    let mut steps = trainer::StepLog::create(log)?;
    state.run(&cache, recognizers, |r| steps.append(r))?;
    steps.flush()?;
    Ok(state)
}

/// Run Algorithm-1 style optimization with default stage reporting.
pub fn mutual_optimize(manifest: &Manifest, config: &OptimizeConfig, out: &Path) -> Result<Vec<RoundRecord>> {
    mutual_optimize_with(manifest, config, out, &mut |_| Ok(()))
}

/// As [`mutual_optimize`]; `hook` runs after every stage and may abort the
/// run by returning an error (completed stages stay on disk for resume).
pub fn mutual_optimize_with(
    manifest: &Manifest,
    config: &OptimizeConfig,
    out: &Path,
    hook: &mut dyn FnMut(&StageEvent) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    manifest.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let progress_path = out.join("progress.json");
    let config_hash = config.hash();
    let progress = if progress_path.is_file() {
        let p: Progress = read_json(&progress_path)?;
        if p.config_hash != config_hash {
            return Err(Error::Config(format!(
                "{} was produced with a different configuration; use a fresh output directory",
                out.display()
            )));
        }
        p
    } else {
        Progress {
            config_hash,
            stages: Vec::new(),
        }
    };
    let mut run = Runner {
        out: out.to_path_buf(),
        progress,
        hook,
    };
    let seed = config.seed;

    // Base synthesizer without identity perception.
    let base_cfg = {
        let mut c = config.synth_config.clone();
        c.loss_weights.lambda_ip = 0.0;
        c.seed = derive_seed(seed, "base/train");
        c
    };
    run.stage(None, StageName::BaseTrain, |out| {
        let state = synth_train(manifest, &base_cfg, None, None, &out.join("base/steps.jsonl"))?;
        trainer::save_checkpoint(&state, &out.join("base/synth.ckpt"))?;
        Ok(vec!["base/synth.ckpt".into(), "base/steps.jsonl".into()])
    })?;
    run.stage(None, StageName::BaseSynthesize, |out| {
        let state = trainer::load_checkpoint(&out.join("base/synth.ckpt"))?;
        let fake = out.join("base/fake");
        if fake.exists() {
            fs::remove_dir_all(&fake).map_err(|e| Error::io(&fake, e))?;
        }
        let generated = trainer::synthesize_dataset(&state, manifest, Direction::Both, &fake)?;
        write_json(&out.join("base/quality.json"), &quality(&generated, config.eval_split, &config.quality)?)?;
        Ok(vec!["base/fake".into(), "base/quality.json".into()])
    })?;
    run.stage(None, StageName::InitRecognizers, |out| {
        for (name, tag) in [("phi_photo", "base/phi_photo"), ("phi_sketch", "base/phi_sketch")] {
            let r = recognition::init_recognizer(&config.recognizer, derive_seed(seed, tag))?;
            recognition::save_recognizer(&r, &out.join(format!("base/{name}.ckpt")))?;
        }
        Ok(vec!["base/phi_photo.ckpt".into(), "base/phi_sketch.ckpt".into()])
    })?;

    let mut records: Vec<RoundRecord> = Vec::new();
    let mut prev_dir = "base".to_string();
    for round in 0..config.max_rounds {
        let dir = round_dir(round);
        let ft = if round == 0 {
            &config.finetune_first
        } else {
            &config.finetune_next
        };

        // Fine-tune both recognizers on real plus the previous fakes.
        run.stage(Some(round), StageName::FineTune, |out| {
            let generated = GeneratedManifest::load(&out.join(&prev_dir).join("fake/manifest.jsonl"))?;
            let (p0, s0) = load_pair(out, &prev_dir)?;
            for (name, modality, init) in [("phi_photo", Modality::Photo, &p0), ("phi_sketch", Modality::Sketch, &s0)] {
                let set = TrainingSet::from_generated(&generated, modality, Split::Train, &ft.preprocess)?;
                let tuned = recognition::fine_tune(init, &set, ft, derive_seed(seed, &format!("{dir}/{name}")))?;
                recognition::save_recognizer(&tuned, &out.join(&dir).join(format!("{name}.ckpt")))?;
            }
            Ok(vec![
                PathBuf::from(&dir).join("phi_photo.ckpt"),
                PathBuf::from(&dir).join("phi_sketch.ckpt"),
            ])
        })?;

        // Identity-aware synthesis under the new recognizers.
        run.stage(Some(round), StageName::Train, |out| {
            let (p, s) = load_pair(out, &dir)?;
            let mut cfg = config.synth_config.clone();
            cfg.seed = derive_seed(seed, &format!("{dir}/train"));
            let prev = if config.warm_start {
                Some(trainer::load_checkpoint(&out.join(&prev_dir).join("synth.ckpt"))?)
            } else {
                None
            };
            let recs = Recognizers { photo: &p, sketch: &s };
            let state = synth_train(manifest, &cfg, Some(recs), prev.as_ref(), &out.join(&dir).join("steps.jsonl"))?;
            trainer::save_checkpoint(&state, &out.join(&dir).join("synth.ckpt"))?;
            Ok(vec![
                PathBuf::from(&dir).join("synth.ckpt"),
                PathBuf::from(&dir).join("steps.jsonl"),
            ])
        })?;

        run.stage(Some(round), StageName::Synthesize, |out| {
            let state = trainer::load_checkpoint(&out.join(&dir).join("synth.ckpt"))?;
            let fake = out.join(&dir).join("fake");
            if fake.exists() {
                fs::remove_dir_all(&fake).map_err(|e| Error::io(&fake, e))?;
            }
            trainer::synthesize_dataset(&state, manifest, Direction::Both, &fake)?;
            Ok(vec![PathBuf::from(&dir).join("fake")])
        })?;

        let last = round + 1 == config.max_rounds;
        let evaluate = config.eval_every_round || last;
        run.stage(Some(round), StageName::Evaluate, |out| {
            let rd = out.join(&dir);
            let generated = GeneratedManifest::load(&rd.join("fake/manifest.jsonl"))?;
            let state = trainer::load_checkpoint(&rd.join("synth.ckpt"))?;
            let (quality_summary, recognition_summary) = if evaluate {
                let q = quality(&generated, config.eval_split, &config.quality)?;
                let rates = |(p, s): &(Recognizer, Recognizer)| -> Result<RecognitionRates> {
                    let pre = &config.recognizer_preprocess();
                    recognition::protocol_scores(p, s, &generated, config.eval_split, pre, config.similarity)?.rank1()
                };
                let r = RecognitionSummary {
                    pre: rates(&load_pair(out, &prev_dir)?)?,
                    post: rates(&load_pair(out, &dir)?)?,
                };
                write_json(&rd.join("quality.json"), &q)?;
                write_json(&rd.join("recognition.json"), &r)?;
                (Some(q), Some(r))
            } else {
                (None, None)
            };
            let record = RoundRecord {
                round_index: round,
                synth_checkpoint: ArtifactRef::new(out, PathBuf::from(&dir).join("synth.ckpt"))?,
                recognizer_photo: ArtifactRef::new(out, PathBuf::from(&dir).join("phi_photo.ckpt"))?,
                recognizer_sketch: ArtifactRef::new(out, PathBuf::from(&dir).join("phi_sketch.ckpt"))?,
                synth_recognizer_params: state
                    .recognizer_hashes
                    .clone()
                    .ok_or_else(|| Error::Invalid("synthesis checkpoint lacks recognizer provenance".into()))?,
                fake_dataset: ArtifactRef::new(out, PathBuf::from(&dir).join("fake"))?,
                quality: quality_summary,
                recognition: recognition_summary,
            };
            write_json(&rd.join("record.json"), &record)?;
            let mut produced = vec![PathBuf::from(&dir).join("record.json")];
            if evaluate {
                produced.push(PathBuf::from(&dir).join("quality.json"));
                produced.push(PathBuf::from(&dir).join("recognition.json"));
            }
            Ok(produced)
        })?;

        let record: RoundRecord = read_json(&out.join(&dir).join("record.json"))?;
        let stop = match (records.last(), &record.recognition) {
            (Some(prev), Some(cur)) if config.stability_epsilon >= 0.0 => match &prev.recognition {
                Some(p) => {
                    let before = p.post.fused;
                    let gain = (cur.post.fused - before) / before.max(1e-12);
                    gain < config.stability_epsilon
                }
                None => false,
            },
            _ => false,
        };
        records.push(record);
        write_json(&out.join("rounds.json"), &records)?;
        if stop {
            log::info!("fused rank-1 stable after round {round}; stopping");
            break;
        }
        prev_dir = dir;
    }
    Ok(records)
}

impl OptimizeConfig {
    /// Preprocessing used to embed images for evaluation.
    pub fn recognizer_preprocess(&self) -> crate::dataset::PreprocessConfig {
        self.finetune_first.preprocess.clone()
    }
}

/// Load the records of a finished or partial run.
pub fn load_rounds(out: &Path) -> Result<Vec<RoundRecord>> {
    read_json(&out.join("rounds.json"))
}

/// Small networks and short schedules sized for the procedural 64×64 fixture
/// on a CPU. The identity-perception weight is rescaled for unit-norm
/// embeddings, whose squared distances never exceed 4.
pub fn desk_scale() -> OptimizeConfig {
    use crate::dataset::PreprocessConfig;
    use crate::nets::{DiscriminatorConfig, GeneratorConfig};

    let preprocess = PreprocessConfig {
        target_size: 64,
        flip_probability: 0.5,
    };
    let mut synth = TrainConfig {
        total_epochs: 40,
        constant_lr_epochs: 20,
        preprocess: preprocess.clone(),
        generator: GeneratorConfig {
            input_channels: 3,
            base_filters: 8,
            num_residual_blocks: 6,
        },
        discriminator: DiscriminatorConfig {
            input_channels: 3,
            base_filters: 8,
            num_downsampling_layers: 3,
        },
        ..TrainConfig::default()
    };
    synth.loss_weights.lambda_ip = 1.0;
    // unit-norm embeddings from a random init collapse to one point at the
    // full-scale rates, so the desk preset steps far smaller
    let finetune = |mut f: FineTuneConfig, base_lr: f64| {
        f.iterations = 200;
        f.lr_policy.base_lr = base_lr;
        f.preprocess = preprocess.clone();
        f
    };
    OptimizeConfig {
        synth_config: synth,
        recognizer: RecognizerConfig {
            input_size: 64,
            ..RecognizerConfig::default()
        },
        finetune_first: finetune(FineTuneConfig::first(), 1e-3),
        finetune_next: finetune(FineTuneConfig::subsequent(), 3e-4),
        ..OptimizeConfig::default()
    }
}
