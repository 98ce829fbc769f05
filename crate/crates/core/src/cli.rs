//! Command-line front end. `cli` parses arguments, runs one subcommand and
//! returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, Kind};
use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::fixture::{self, FixtureConfig};
use crate::metrics::{self, QualityTarget};
use crate::nets::count_parameters;
use crate::pipeline::{self, OptimizeConfig};
use crate::recognition::{self, Modality, Protocol, Similarity, TrainingSet};
use crate::trainer::{self, Direction, GeneratedManifest, Recognizers};

#[derive(Parser, Debug)]
#[command(name = "idcycle", version, about = "Identity-aware photo/sketch synthesis and recognition")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML file whose tables mirror the configuration types.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the full-scale defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the two-way synthesizer on a manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Photo and sketch recognizer checkpoints enabling identity perception.
        #[arg(long, num_args = 2, value_names = ["PHI_PHOTO", "PHI_SKETCH"])]
        recognizers: Option<Vec<PathBuf>>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Translate every manifest image with a trained synthesizer.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "both")]
        direction: Direction,
    },
    /// Fine-tune a recognizer with triplet loss on real plus synthesized images.
    FinetuneRecognizer {
        /// Manifest written by `synthesize`.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        /// Starting checkpoint; a fresh recognizer when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "first")]
        stage: StageArg,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// SSIM and FSIM of synthesized images against their references.
    EvaluateQuality {
        #[arg(long, requires = "real_dir", conflicts_with = "generated")]
        fake_dir: Option<PathBuf>,
        #[arg(long)]
        real_dir: Option<PathBuf>,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sketch")]
        target: TargetArg,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Rank-1 matching accuracy under one of the retrieval protocols.
    EvaluateRecognition {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        phi_photo: PathBuf,
        #[arg(long)]
        phi_sketch: PathBuf,
        #[arg(long, default_value = "fused")]
        protocol: Protocol,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum)]
        similarity: Option<SimilarityArg>,
    },
    /// Mutual cyclic optimization of synthesizer and recognizers.
    Optimize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        max_rounds: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        stability_epsilon: Option<f64>,
    },
    /// Print the header, configuration and parameter summary of a checkpoint.
    InspectCheckpoint { path: PathBuf },
    /// Write the procedural photo/sketch fixture.
    MakeFixture {
        #[arg(long)]
        train_identities: Option<usize>,
        #[arg(long)]
        test_identities: Option<usize>,
        #[arg(long)]
        size: Option<u32>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Photo,
    Sketch,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    First,
    Subsequent,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Sketch,
    Photo,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SimilarityArg {
    Cosine,
    NegL2,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(parsed.global.log_level)
        .format_timestamp(None)
        .try_init();
    match run(parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            1
        }
    }
}

/// Read a TOML configuration on top of the chosen base.
pub fn load_config(path: Option<&Path>, desk: bool) -> Result<OptimizeConfig> {
    let Some(path) = path else {
        return Ok(if desk { pipeline::desk_scale() } else { OptimizeConfig::default() });
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: OptimizeConfig = if desk {
        // overlay the file onto the preset
        let base = toml::Value::try_from(pipeline::desk_scale()).expect("preset serializes");
        let file: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(base, file)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = load_config(g.config.as_deref(), g.desk)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.synth_config.seed = seed;
    }
    let out = g.out;
    match cli.command {
        Command::Train {
            manifest,
            recognizers,
            max_steps,
        } => {
            let manifest = dataset::load_manifest(&manifest)?;
            if max_steps.is_some() {
                cfg.synth_config.max_steps = max_steps;
            }
            let loaded = match recognizers {
                Some(paths) => Some((
                    recognition::load_recognizer(&paths[0])?,
                    recognition::load_recognizer(&paths[1])?,
                )),
                None => {
                    cfg.synth_config.loss_weights.lambda_ip = 0.0;
                    None
                }
            };
            let recs = loaded.as_ref().map(|(p, s)| Recognizers { photo: p, sketch: s });
            let state = trainer::train(&manifest, &cfg.synth_config, recs, Some(&out.join("steps.jsonl")))?;
            trainer::save_checkpoint(&state, &out.join("synth.ckpt"))?;
            println!("trained {} steps; checkpoint {}", state.step, out.join("synth.ckpt").display());
        }
        Command::Synthesize {
            checkpoint,
            manifest,
            direction,
        } => {
            let state = trainer::load_checkpoint(&checkpoint)?;
            let manifest = dataset::load_manifest(&manifest)?;
            let generated = trainer::synthesize_dataset(&state, &manifest, direction, &out)?;
            println!("wrote {} entries to {}", generated.entries.len(), out.join("manifest.jsonl").display());
        }
        Command::FinetuneRecognizer {
            generated,
            modality,
            init,
            stage,
            iterations,
        } => {
            let generated = GeneratedManifest::load(&generated)?;
            let mut ft = match stage {
                StageArg::First => cfg.finetune_first.clone(),
                StageArg::Subsequent => cfg.finetune_next.clone(),
            };
            if let Some(n) = iterations {
                ft.iterations = n;
            }
            let (modality, name) = match modality {
                ModalityArg::Photo => (Modality::Photo, "phi_photo"),
                ModalityArg::Sketch => (Modality::Sketch, "phi_sketch"),
            };
            let start = match init {
                Some(p) => recognition::load_recognizer(&p)?,
                None => recognition::init_recognizer(&cfg.recognizer, trainer::derive_seed(cfg.seed, name))?,
            };
            let set = TrainingSet::from_generated(&generated, modality, Split::Train, &ft.preprocess)?;
            let mut log = String::new();
            let tuned = recognition::fine_tune_with(&start, &set, &ft, cfg.seed, |r, _| {
                log.push_str(&serde_json::to_string(r).expect("records serialize"));
                log.push('\n');
                Ok(())
            })?;
            let path = out.join(format!("{name}.ckpt"));
            recognition::save_recognizer(&tuned, &path)?;
            write_text(&out.join(format!("{name}_iterations.jsonl")), &log)?;
            println!("fine-tuned {} iterations; checkpoint {}", ft.iterations, path.display());
        }
        Command::EvaluateQuality {
            fake_dir,
            real_dir,
            generated,
            target,
            split,
        } => {
            let report = match (fake_dir, real_dir, generated) {
                (Some(f), Some(r), None) => metrics::evaluate_dirs(&f, &r, &cfg.quality)?,
                (None, None, Some(gen)) => {
                    let gm = GeneratedManifest::load(&gen)?;
                    let subset = GeneratedManifest {
                        entries: gm.entries.into_iter().filter(|e| e.split == split).collect(),
                    };
                    let target = match target {
                        TargetArg::Sketch => QualityTarget::Sketch,
                        TargetArg::Photo => QualityTarget::Photo,
                    };
                    metrics::evaluate_quality(&subset.fake_manifest(), &subset.real_manifest(), target, &cfg.quality)?
                }
                _ => {
                    return Err(Error::Invalid(
                        "give either --fake-dir with --real-dir, or --generated".into(),
                    ))
                }
            };
            write_text(&out.join("quality.json"), &to_json(&report))?;
            write_text(&out.join("quality.csv"), &report.to_csv())?;
            println!(
                "images {}  mean SSIM {:.6}  mean FSIM {:.6}",
                report.aggregates.count, report.aggregates.mean_ssim, report.aggregates.mean_fsim
            );
        }
        Command::EvaluateRecognition {
            generated,
            phi_photo,
            phi_sketch,
            protocol,
            split,
            similarity,
        } => {
            let gm = GeneratedManifest::load(&generated)?;
            let p = recognition::load_recognizer(&phi_photo)?;
            let s = recognition::load_recognizer(&phi_sketch)?;
            let sim = match similarity {
                Some(SimilarityArg::Cosine) => Similarity::Cosine,
                Some(SimilarityArg::NegL2) => Similarity::NegL2,
                None => cfg.similarity,
            };
            let scores = recognition::protocol_scores(&p, &s, &gm, split, &cfg.recognizer_preprocess(), sim)?;
            let matrix = match protocol {
                Protocol::Sketch => &scores.sketch,
                Protocol::Photo => &scores.photo,
                Protocol::Fused => &scores.fused,
            };
            let rank1 = recognition::rank_k_accuracy(matrix, 1)?;
            write_text(&out.join(format!("scores_{}.csv", protocol_name(protocol))), &matrix.to_csv())?;
            write_text(
                &out.join("recognition.json"),
                &to_json(&serde_json::json!({ "protocol": protocol, "split": split, "rank1": rank1 })),
            )?;
            println!("protocol {}  rank-1 {:.4}", protocol_name(protocol), rank1);
        }
        Command::Optimize {
            manifest,
            max_rounds,
            stability_epsilon,
        } => {
            if let Some(n) = max_rounds {
                cfg.max_rounds = n;
            }
            if let Some(e) = stability_epsilon {
                cfg.stability_epsilon = e;
            }
            cfg.validate()?;
            let manifest = dataset::load_manifest(&manifest)?;
            let records = pipeline::mutual_optimize(&manifest, &cfg, &out)?;
            for r in &records {
                match &r.recognition {
                    Some(rec) => println!(
                        "round {}: fused rank-1 {:.4} -> {:.4}",
                        r.round_index, rec.pre.fused, rec.post.fused
                    ),
                    None => println!("round {}: not evaluated", r.round_index),
                }
            }
        }
        Command::InspectCheckpoint { path } => inspect(&path)?,
        Command::MakeFixture {
            train_identities,
            test_identities,
            size,
        } => {
            let d = FixtureConfig::default();
            let fc = FixtureConfig {
                train_identities: train_identities.unwrap_or(d.train_identities),
                test_identities: test_identities.unwrap_or(d.test_identities),
                size: size.unwrap_or(d.size),
                seed: g.seed.unwrap_or(d.seed),
            };
            let path = fixture::write_fixture(&out, &fc)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Sketch => "sketch",
        Protocol::Photo => "photo",
        Protocol::Fused => "fused",
    }
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = checkpoint::read_file(path)?;
    let kind = bytes.get(8).copied().unwrap_or(0);
    println!("file      {}", path.display());
    println!("sha256    {}", checkpoint::file_hash(path)?);
    if kind == Kind::Synthesis as u8 {
        let s = trainer::load_checkpoint(path)?;
        println!("kind      synthesis");
        println!("epoch     {}", s.epoch);
        println!("step      {}", s.step);
        for (name, p) in [
            ("g_x", s.g_x.params()),
            ("g_y", s.g_y.params()),
            ("d_x", s.d_x.params()),
            ("d_y", s.d_y.params()),
        ] {
            println!("{name:<9} {} parameters, hash {}", count_parameters(p), p.hash());
        }
        if let Some((p, k)) = &s.recognizer_hashes {
            println!("phi_photo {p}");
            println!("phi_sketch {k}");
        }
        println!("config    {}", serde_json::to_string(&s.config).expect("config serializes"));
    } else {
        let r = recognition::load_recognizer(path)?;
        println!("kind      recognizer");
        println!("params    {} parameters, hash {}", count_parameters(r.params()), r.params().hash());
        println!("config    {}", serde_json::to_string(r.config()).expect("config serializes"));
    }
    Ok(())
}
