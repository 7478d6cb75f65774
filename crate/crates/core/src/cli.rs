//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::checkpoint::{file_sha256, Checkpoint};
use crate::config::C2eConfig;
use crate::data::{load_dataset, save_dataset, save_png, synth_dataset, LabeledImages, SynthKind};
use crate::error::{C2eError, Result};
use crate::ingest::{dedup, exclude, sample_frames, DEFAULT_DEDUP_THRESHOLD};
use crate::model::{C2eModel, STREAM_TRAIN};
use crate::patch::plan_mask;
use crate::probe::{export_attention, export_embeddings, extract_features, group_split, linear_probe, make_fewshot_splits};
use crate::rng::Rng;
use crate::train::{RunOptions, Trainer, CONFIG_FILE};

/// Images synthesized for pretraining when no dataset is given.
const DEFAULT_PRETRAIN_IMAGES: usize = 1024;

#[derive(Debug, Parser)]
#[command(name = "c2e", version, about = "Compress-to-Explore masked autoencoder toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its fields
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed override
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print a machine-readable JSON summary to stdout
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample frames from per-group directories, hash and deduplicate them
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Directory holding one subdirectory of ordered frames per group
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Keep every k-th frame of each group
        #[arg(long, value_name = "K", default_value_t = 1)]
        every_k: usize,
        /// Drop frames within this many hash bits of a kept frame
        #[arg(long, value_name = "BITS", default_value_t = DEFAULT_DEDUP_THRESHOLD)]
        threshold: u32,
        /// Groups to remove entirely (comma separated)
        #[arg(long, value_name = "GROUPS", value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Train from scratch on a dataset directory or frame manifest
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (labels.csv) or manifest CSV; synthetic textures when omitted
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Total optimizer steps (overrides the config)
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
        /// Write 0 in the ms column so metrics are byte-identical across runs
        #[arg(long)]
        no_timing: bool,
    },
    /// Continue training from a checkpoint
    Resume {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to resume from
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Dataset directory or manifest CSV; synthetic textures when omitted
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Total optimizer steps to reach (defaults to the checkpoint config)
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
        /// Write 0 in the ms column so metrics are byte-identical across runs
        #[arg(long)]
        no_timing: bool,
    },
    /// Reconstruct masked images and write original | masked | reconstruction panels
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Dataset directory or manifest CSV
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Number of images to reconstruct
        #[arg(long, value_name = "N", default_value_t = 8)]
        count: usize,
        /// Fraction of patches hidden (defaults to the checkpoint config)
        #[arg(long, value_name = "RATIO")]
        mask_ratio: Option<f64>,
    },
    /// Linear probe on frozen features with a group-disjoint split
    Probe {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint; an untrained encoder from --config when omitted
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
        /// Labeled dataset directory
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Seed choosing the held-out groups
        #[arg(long, value_name = "U64", default_value_t = 0)]
        split_seed: u64,
        /// Fraction of groups held out for testing
        #[arg(long, value_name = "FRAC", default_value_t = 0.25)]
        test_frac: f64,
        /// Task name recorded in the report
        #[arg(long, value_name = "NAME", default_value = "probe")]
        task: String,
    },
    /// Few-shot probes: k whole groups for training, the rest for testing
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint; an untrained encoder from --config when omitted
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
        /// Labeled dataset directory with group ids
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Groups used for training
        #[arg(long, value_name = "K")]
        k: usize,
        /// Split seeds (comma separated)
        #[arg(long, value_name = "SEEDS", value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Write per-image features as label,feat_0,... CSV
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Labeled dataset directory
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Write per-head attention saliency of one image as PGM files
    ExportAttention {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Dataset directory or manifest CSV
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Index of the image in the dataset
        #[arg(long, value_name = "I", default_value_t = 0)]
        index: usize,
        /// Encoder block, counted from the input
        #[arg(long, value_name = "L", default_value_t = 0)]
        layer: usize,
    },
    /// Generate a synthetic labeled dataset
    Synth {
        #[command(flatten)]
        common: Common,
        /// textures, shapes or phases
        #[arg(long, value_name = "KIND")]
        kind: SynthKind,
        /// Number of images
        #[arg(long, value_name = "N")]
        n: usize,
    },
}

impl clap::ValueEnum for SynthKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[SynthKind::Textures, SynthKind::Shapes, SynthKind::Phases]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            SynthKind::Textures => "textures",
            SynthKind::Shapes => "shapes",
            SynthKind::Phases => "phases",
        }))
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Ingest { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Resume { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Probe { common, .. }
            | Command::Fewshot { common, .. }
            | Command::ExportEmbeddings { common, .. }
            | Command::ExportAttention { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Pretrain { .. } => "pretrain",
            Command::Resume { .. } => "resume",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Probe { .. } => "probe",
            Command::Fewshot { .. } => "fewshot",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::ExportAttention { .. } => "export-attention",
            Command::Synth { .. } => "synth",
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Human-readable output goes to stdout, or a single JSON
/// object with `--json`; errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let json = cli.command.common().json;
    match execute(&cli.command) {
        Ok(summary) => {
            if json {
                println!("{summary}");
            } else if let Value::Object(map) = &summary {
                for (k, v) in map {
                    match v {
                        Value::String(s) => println!("{k}: {s}"),
                        other => println!("{k}: {other}"),
                    }
                }
            }
            0
        }
        Err(e) => {
            if json {
                println!("{}", json!({ "command": cli.command.name(), "error": e.to_string(), "exit_code": e.exit_code() }));
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Config from `--config` (or `base`), with the seed override applied.
fn resolve_config(common: &Common, base: Option<C2eConfig>) -> Result<C2eConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => C2eConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => C2eConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, fallback: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).map_err(|e| C2eError::io(&dir, e))?;
    Ok(dir)
}

fn echo_config(dir: &Path, cfg: &C2eConfig) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_json()).map_err(|e| C2eError::io(&p, e))
}

fn header(command: &str, cfg: &C2eConfig) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("seed".into(), json!(cfg.seed));
    m
}

fn training_data(data: Option<&Path>, cfg: &C2eConfig) -> Result<LabeledImages> {
    match data {
        Some(p) => load_dataset(p, cfg.image_size),
        None => synth_dataset(SynthKind::Textures, DEFAULT_PRETRAIN_IMAGES, cfg.seed),
    }
}

/// Model from a checkpoint, or an untrained one from the resolved config.
fn load_model(common: &Common, ckpt: Option<&Path>) -> Result<(C2eModel, Option<String>)> {
    match ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut model = ck.to_model()?;
            if let Some(s) = common.seed {
                model.cfg.seed = s;
            }
            Ok((model, Some(file_sha256(p)?)))
        }
        None => Ok((C2eModel::new(&resolve_config(common, None)?)?, None)),
    }
}

fn execute(cmd: &Command) -> Result<Value> {
    let common = cmd.common();
    let name = cmd.name();
    match cmd {
        Command::Synth { kind, n, .. } => {
            let cfg = resolve_config(common, None)?;
            let dir = out_dir(common, "data")?;
            let data = synth_dataset(*kind, *n, cfg.seed)?;
            save_dataset(&data, &dir)?;
            let mut m = header(name, &cfg);
            m.insert("kind".into(), serde_json::to_value(kind)?);
            m.insert("images".into(), json!(data.len()));
            m.insert("out".into(), json!(dir));
            Ok(Value::Object(m))
        }
        Command::Ingest {
            input,
            every_k,
            threshold,
            exclude: holdout,
            ..
        } => {
            let cfg = resolve_config(common, None)?;
            let dir = out_dir(common, "ingest")?;
            let sampled = sample_frames(input, *every_k)?;
            let (kept, warnings) = exclude(&sampled, holdout);
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let manifest = dedup(&kept, *threshold);
            let path = dir.join("manifest.csv");
            manifest.write_csv(&path)?;
            echo_config(&dir, &cfg)?;
            let mut m = header(name, &cfg);
            m.insert("sampled".into(), json!(sampled.entries.len()));
            m.insert("kept".into(), json!(manifest.kept().count()));
            m.insert("groups".into(), json!(manifest.groups()));
            m.insert("excluded".into(), json!(manifest.excluded));
            m.insert("warnings".into(), json!(warnings));
            m.insert("manifest".into(), json!(path));
            Ok(Value::Object(m))
        }
        Command::Pretrain {
            data, steps, no_timing, ..
        } => {
            let mut cfg = resolve_config(common, None)?;
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            let dir = out_dir(common, "run")?;
            let images = training_data(data.as_deref(), &cfg)?;
            let mut trainer = Trainer::new(&cfg)?;
            let summary = trainer.run(
                &images,
                &RunOptions {
                    out_dir: Some(dir),
                    record_time: !no_timing,
                },
            )?;
            let mut m = header(name, &cfg);
            m.insert("summary".into(), serde_json::to_value(summary)?);
            Ok(Value::Object(m))
        }
        Command::Resume {
            ckpt,
            data,
            steps,
            no_timing,
            ..
        } => {
            let ck = Checkpoint::load(ckpt)?;
            let mut trainer = Trainer::from_checkpoint(&ck)?;
            if let Some(s) = steps {
                trainer.model.cfg.steps = *s;
                trainer.opt.total_steps = *s;
            }
            let cfg = trainer.model.cfg.clone();
            let dir = out_dir(common, "run")?;
            let images = training_data(data.as_deref(), &cfg)?;
            let summary = trainer.run(
                &images,
                &RunOptions {
                    out_dir: Some(dir),
                    record_time: !no_timing,
                },
            )?;
            let mut m = header(name, &cfg);
            m.insert("summary".into(), serde_json::to_value(summary)?);
            Ok(Value::Object(m))
        }
        Command::Reconstruct {
            ckpt,
            data,
            count,
            mask_ratio,
            ..
        } => {
            let (model, hash) = load_model(common, Some(ckpt))?;
            let cfg = model.cfg.clone();
            let dir = out_dir(common, "reconstruct")?;
            let set = load_dataset(data, cfg.image_size)?;
            let idx: Vec<usize> = (0..(*count).min(set.len())).collect();
            let images = set.select(&idx);
            let ratio = mask_ratio.unwrap_or(cfg.mask_ratio);
            let mut rng = Rng::with_stream(cfg.seed, STREAM_TRAIN);
            let n = cfg.num_patches();
            let plans = idx.iter().map(|_| plan_mask(n, ratio, &mut rng)).collect::<Result<Vec<_>>>()?;
            let (recon, loss) = model.reconstruct(&images, &plans)?;
            let s = cfg.image_size;
            let p = cfg.patch_size;
            let per = s * s * 3;
            let mut files = Vec::new();
            for (k, plan) in plans.iter().enumerate() {
                let orig = &images.data()[k * per..(k + 1) * per];
                let rec = &recon.data()[k * per..(k + 1) * per];
                let mut panel = vec![0.0; per * 3];
                for y in 0..s {
                    for x in 0..s {
                        let hidden = plan.masked.contains(&((y / p) * (s / p) + x / p));
                        for c in 0..3 {
                            let v = orig[(y * s + x) * 3 + c];
                            let row = y * 3 * s;
                            panel[(row + x) * 3 + c] = v;
                            panel[(row + s + x) * 3 + c] = if hidden { 0.5 } else { v };
                            panel[(row + 2 * s + x) * 3 + c] = rec[(y * s + x) * 3 + c];
                        }
                    }
                }
                let path = dir.join(format!("reconstruction_{k:03}.png"));
                save_png(&path, &panel, s, 3 * s)?;
                files.push(path);
            }
            echo_config(&dir, &cfg)?;
            let mut m = header(name, &cfg);
            m.insert("checkpoint_hash".into(), json!(hash));
            m.insert("masked_loss".into(), json!(loss));
            m.insert("files".into(), json!(files));
            Ok(Value::Object(m))
        }
        Command::Probe {
            ckpt,
            data,
            split_seed,
            test_frac,
            task,
            ..
        } => {
            let (model, hash) = load_model(common, ckpt.as_deref())?;
            let cfg = model.cfg.clone();
            let dir = out_dir(common, "probe")?;
            let set = load_dataset(data, cfg.image_size)?;
            let features = extract_features(&model, &set.images)?;
            let split = group_split(&set.groups, *test_frac, *split_seed)?;
            let mut report = linear_probe(task, &features, &set.labels, &set.groups, &split, *split_seed)?;
            report.checkpoint_hash = hash;
            let path = dir.join("probe_report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| C2eError::io(&path, e))?;
            echo_config(&dir, &cfg)?;
            let mut m = header(name, &cfg);
            m.insert("report".into(), serde_json::to_value(&report)?);
            m.insert("path".into(), json!(path));
            Ok(Value::Object(m))
        }
        Command::Fewshot { ckpt, data, k, seeds, .. } => {
            let (model, hash) = load_model(common, ckpt.as_deref())?;
            let cfg = model.cfg.clone();
            let dir = out_dir(common, "fewshot")?;
            let set = load_dataset(data, cfg.image_size)?;
            let features = extract_features(&model, &set.images)?;
            let mut reports = Vec::new();
            for split in make_fewshot_splits(&set.groups, *k, seeds)? {
                let mut r = linear_probe(
                    &format!("fewshot-k{k}"),
                    &features,
                    &set.labels,
                    &set.groups,
                    &split.split,
                    split.seed,
                )?;
                r.checkpoint_hash = hash.clone();
                reports.push(json!({
                    "train_groups": split.train_groups,
                    "test_groups": split.test_groups,
                    "report": r,
                }));
            }
            let path = dir.join(format!("fewshot_k{k}.json"));
            fs::write(&path, serde_json::to_string_pretty(&reports)?).map_err(|e| C2eError::io(&path, e))?;
            echo_config(&dir, &cfg)?;
            let mut m = header(name, &cfg);
            m.insert("splits".into(), json!(reports));
            m.insert("path".into(), json!(path));
            Ok(Value::Object(m))
        }
        Command::ExportEmbeddings { ckpt, data, .. } => {
            let (model, hash) = load_model(common, Some(ckpt))?;
            let cfg = model.cfg.clone();
            let dir = out_dir(common, "embeddings")?;
            let set = load_dataset(data, cfg.image_size)?;
            let features = extract_features(&model, &set.images)?;
            let path = dir.join("embeddings.csv");
            export_embeddings(&features, &set.labels, &path)?;
            echo_config(&dir, &cfg)?;
            let mut m = header(name, &cfg);
            m.insert("checkpoint_hash".into(), json!(hash));
            m.insert("rows".into(), json!(features.rows()));
            m.insert("columns".into(), json!(features.cols() + 1));
            m.insert("path".into(), json!(path));
            Ok(Value::Object(m))
        }
        Command::ExportAttention {
            ckpt,
            data,
            index,
            layer,
            ..
        } => {
            let (model, hash) = load_model(common, Some(ckpt))?;
            let cfg = model.cfg.clone();
            let dir = out_dir(common, "attention")?;
            let set = load_dataset(data, cfg.image_size)?;
            if *index >= set.len() {
                return Err(C2eError::Config(format!("image index {index} out of range ({} images)", set.len())));
            }
            let heads = export_attention(&model, &set.select(&[*index]), *layer, &dir.join(format!("attention_l{layer}")))?;
            echo_config(&dir, &cfg)?;
            let mut m = header(name, &cfg);
            m.insert("checkpoint_hash".into(), json!(hash));
            m.insert(
                "heads".into(),
                json!(heads
                    .iter()
                    .map(|h| json!({ "head": h.head, "path": h.path, "gini": h.gini }))
                    .collect::<Vec<_>>()),
            );
            Ok(Value::Object(m))
        }
    }
}
