//! The command-line surface: `prepare`, `train`, `merge`, `generate`,
//! `eval`.
//!
//! Every subcommand reads the shared flat TOML config (see
//! [`crate::config::RunConfig`]), applies its own flag overrides on top,
//! and validates the result before touching the filesystem. Exit codes:
//! 0 success, 1 operational error, 2 data rejection under `--strict`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::captions::{vocab, LightingTag};
use crate::data::dataset::pixel_to_signal;
use crate::data::frame::{letterbox, Frame};
use crate::data::generator::{generate_corpus, StyleSpec};
use crate::data::manifest::{assemble_manifest, scan_clips, write_rejection_report, Manifest};
use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet};
use crate::metrics::{perceptual_proxy, style_distance, temporal_stability};
use crate::model::VideoDit;
use crate::shard::{divergence_vs_single, generate_full, GenRequest};
use crate::tensor::Tensor;
use crate::train::Trainer;

#[derive(Debug, Parser)]
#[command(
    name = "cinelora",
    version,
    about = "LoRA fine-tuning and temporally sharded sampling for a miniature video diffusion transformer"
)]
struct Cli {
    /// Flat TOML config file; command-line flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render (or ingest) styled clips and build the dataset manifest.
    Prepare(PrepareArgs),
    /// Fine-tune adapters against a frozen base model.
    Train(TrainArgs),
    /// Fold an adapter file into a base checkpoint.
    Merge(MergeArgs),
    /// Sample a clip from a conditioning image and a caption.
    Generate(GenerateArgs),
    /// Score a clip directory; add a reference and/or target style for the
    /// comparative metrics.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Dataset directory (clips, manifest, rejection report).
    #[arg(long, default_value = "data")]
    outdir: PathBuf,
    /// Ingest pre-extracted clip directories from here instead of rendering.
    #[arg(long, value_name = "DIR")]
    ingest: Option<PathBuf>,
    /// Number of clips to render.
    #[arg(long)]
    clips: Option<usize>,
    /// Frames per rendered clip.
    #[arg(long)]
    frames: Option<usize>,
    /// Fraction of clips assigned to the validation split.
    #[arg(long = "val_fraction")]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with code 2 when any clip is rejected.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest produced by `prepare`.
    #[arg(long, default_value = "data/manifest.json")]
    manifest: PathBuf,
    /// Run directory (base model, adapters, checkpoint, log).
    #[arg(long, default_value = "runs")]
    outdir: PathBuf,
    /// Base model checkpoint; a fresh seeded base is built when absent.
    #[arg(long, value_name = "FILE")]
    base: Option<PathBuf>,
    /// Resume from this trainer checkpoint.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Optimizer step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Temporal-consistency loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MergeArgs {
    /// Base model checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Adapter file to fold in.
    #[arg(long)]
    lora: PathBuf,
    /// Where to write the merged checkpoint.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Model checkpoint (base or merged).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapter file to attach on top of the checkpoint.
    #[arg(long, value_name = "FILE")]
    adapters: Option<PathBuf>,
    /// Conditioning image (letterboxed to the model's frame size).
    #[arg(long)]
    image: PathBuf,
    /// Caption text, tokenized against the built-in vocabulary.
    #[arg(long)]
    caption: String,
    /// Output directory for frames and report.json.
    #[arg(long, default_value = "out")]
    outdir: PathBuf,
    #[arg(long = "num_frames")]
    num_frames: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    cfg: Option<f64>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    fps: Option<u32>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also generate the single-shard reference and record the divergence.
    #[arg(long)]
    divergence: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of PNG frames to score.
    clip: PathBuf,
    /// Same-length reference clip for the perceptual metric.
    #[arg(long, value_name = "DIR")]
    reference: Option<PathBuf>,
    /// Target style (torch | day | fog | night) for the style metric.
    #[arg(long, value_name = "TAG")]
    style: Option<String>,
    /// Where to write the metric report.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

/// Parses the process arguments and runs the chosen command, returning the
/// process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are successes, not operational errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let config = match RunConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let outcome = match cli.command {
        Command::Prepare(args) => cmd_prepare(config, args),
        Command::Train(args) => cmd_train(config, args).map(|()| 0),
        Command::Merge(args) => cmd_merge(args).map(|()| 0),
        Command::Generate(args) => cmd_generate(config, args).map(|()| 0),
        Command::Eval(args) => cmd_eval(args).map(|()| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_prepare(mut config: RunConfig, args: PrepareArgs) -> Result<i32> {
    if let Some(v) = args.clips {
        config.clips = v;
    }
    if let Some(v) = args.frames {
        config.frames_per_clip = v;
    }
    if let Some(v) = args.val_fraction {
        config.val_fraction = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;

    let clip_dir = match &args.ingest {
        Some(dir) => dir.clone(),
        None => {
            let dir = args.outdir.join("clips");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            generate_corpus(&dir, &config.corpus_spec())?;
            dir
        }
    };

    let (accepted, rejections) = scan_clips(&clip_dir)?;
    std::fs::create_dir_all(&args.outdir).map_err(|e| Error::io(&args.outdir, e))?;
    let report_path = args.outdir.join("rejections.tsv");
    write_rejection_report(&report_path, &rejections)?;
    for r in &rejections {
        eprintln!("rejected {}: {}", r.clip_id, r.reason);
    }

    let assembled = assemble_manifest(accepted, &rejections, config.val_fraction, config.seed);
    let strict_code = if args.strict && !rejections.is_empty() {
        Some(2)
    } else {
        None
    };
    let manifest = match assembled {
        Ok(m) => m,
        Err(e) => {
            // Even a failed assembly leaves the rejection report behind;
            // under --strict the rejections themselves set the exit code.
            if let Some(code) = strict_code {
                eprintln!("error: {e}");
                return Ok(code);
            }
            return Err(e);
        }
    };
    let manifest_path = args.outdir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let train = manifest
        .records
        .iter()
        .filter(|r| r.split == crate::data::manifest::Split::Train)
        .count();
    println!(
        "prepared {} clips ({} train / {} val, {} rejected) -> {}",
        manifest.records.len(),
        train,
        manifest.records.len() - train,
        rejections.len(),
        manifest_path.display()
    );
    Ok(strict_code.unwrap_or(0))
}

fn cmd_train(mut config: RunConfig, args: TrainArgs) -> Result<()> {
    if let Some(v) = args.steps {
        config.total_steps = v;
        config.eval_interval = config.eval_interval.min(v);
    }
    if let Some(v) = args.lambda {
        config.lambda_temporal = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;

    let manifest = Manifest::load(&args.manifest)?;
    std::fs::create_dir_all(&args.outdir).map_err(|e| Error::io(&args.outdir, e))?;

    // The base backbone: a prior checkpoint, or a fresh seeded build that
    // is saved alongside so merge/generate can reference the exact weights.
    let model = match &args.base {
        Some(path) => VideoDit::<f32>::load(path)?,
        None => {
            let model = VideoDit::new(config.model_config(), config.seed)?;
            model.save(&args.outdir.join("base_model.bin"))?;
            model
        }
    };
    let train_config = config.train_config();
    let adapters = lora::inject(&model, train_config.rank, train_config.alpha, config.seed)?;
    let frozen: usize = model.named_parameters().iter().map(|(_, t)| t.numel()).sum();
    let trainable = adapters.trainable_count();
    println!(
        "trainable parameters: {} of {} ({:.4}% of the model)",
        trainable,
        frozen + trainable,
        100.0 * trainable as f64 / (frozen + trainable) as f64
    );

    let mut trainer = Trainer::new(&model, &adapters, &manifest, train_config)?;
    let checkpoint_path = args.outdir.join("checkpoint.json");
    let resuming = args.resume.is_some();
    if let Some(path) = &args.resume {
        trainer.resume(path)?;
    }

    let log_path = args.outdir.join("train_log.ndjson");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let report = trainer.run(&mut log, Some(&checkpoint_path))?;

    let adapters_path = args.outdir.join("adapters.bin");
    trainer.adapters().save(&adapters_path)?;
    println!(
        "trained {} steps ({} evaluations, best val {:.6}{}) -> {}",
        report.steps_completed,
        report.evaluations,
        report.best_val_metric,
        if report.stopped_early { ", stopped early" } else { "" },
        adapters_path.display()
    );
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let model = VideoDit::<f32>::load(&args.base)?;
    let adapters = AdapterSet::load(&args.lora)?;
    adapters.attach(&model)?;
    adapters.merge(&model)?;
    model.save(&args.output)?;
    println!(
        "merged {} into {} -> {}",
        args.lora.display(),
        args.base.display(),
        args.output.display()
    );
    Ok(())
}

fn cmd_generate(mut config: RunConfig, args: GenerateArgs) -> Result<()> {
    if let Some(v) = args.num_frames {
        config.num_frames = v;
    }
    if let Some(v) = args.cfg {
        config.cfg = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.fps {
        config.fps = v;
    }
    if let Some(v) = args.shards {
        config.shards = v;
    }
    if let Some(v) = args.overlap {
        config.overlap = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let model = VideoDit::<f32>::load(&args.checkpoint)?;
    if let Some(path) = &args.adapters {
        AdapterSet::load(path)?.attach(&model)?;
    }
    // The checkpoint's geometry is authoritative for generation limits.
    config.max_frames = model.config().max_frames;
    config.t_diff = model.config().t_diff;
    config.validate()?;

    let geo = model.config();
    let still = Frame::load_png(&args.image)?;
    let boxed = letterbox(&still, geo.frame_height, geo.frame_width)?;
    let first_frame = frame_to_signal(&boxed)?;
    let caption_ids = vocab().tokenize(&args.caption)?;

    let request = GenRequest {
        first_frame,
        caption_ids,
        num_frames: config.num_frames,
        cfg_scale: config.cfg,
        steps: config.steps,
        seed: config.seed,
        shards: config.shards,
        overlap: config.overlap,
        fps: config.fps,
    };
    let (clip, mut report) = generate_full(&model, &request)?;
    if args.divergence {
        report.divergence = Some(divergence_vs_single(&model, &request, &clip)?);
    }

    std::fs::create_dir_all(&args.outdir).map_err(|e| Error::io(&args.outdir, e))?;
    write_clip_frames(&clip, &args.outdir)?;
    report.save(&args.outdir.join("report.json"))?;
    println!(
        "generated {} frames in {} shards -> {}",
        config.num_frames,
        report.plan.intervals.len(),
        args.outdir.display()
    );
    Ok(())
}

/// The applicable metrics for one eval invocation; comparative fields stay
/// out of the document when their inputs were not given.
#[derive(Debug, Serialize)]
struct EvalDoc {
    frames: usize,
    temporal_stability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    perceptual_proxy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    style_distance: Option<f64>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let clip = load_clip_dir(&args.clip)?;
    let doc = EvalDoc {
        frames: clip.shape()[0],
        temporal_stability: temporal_stability(&clip)?,
        perceptual_proxy: match &args.reference {
            Some(dir) => Some(perceptual_proxy(&clip, &load_clip_dir(dir)?)?),
            None => None,
        },
        style_distance: match &args.style {
            Some(tag) => {
                let style = StyleSpec::for_tag(LightingTag::parse(tag)?);
                Some(style_distance(&clip, &style)?)
            }
            None => None,
        },
    };
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    print!("{json}");
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))
}

/// Maps a `[0, 1]` frame into a `(c, h, w)` signal tensor in `[-1, 1]`.
fn frame_to_signal(frame: &Frame) -> Result<Tensor<f32>> {
    let data: Vec<f32> = frame.data().iter().map(|&v| pixel_to_signal(v)).collect();
    Tensor::from_vec(&[crate::data::frame::CHANNELS, frame.height(), frame.width()], data)
}

/// Loads a directory of PNG frames (sorted by name) as a `(frames, c, h,
/// w)` signal tensor.
fn load_clip_dir(dir: &Path) -> Result<Tensor<f32>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no PNG frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut dims = None;
    for path in &paths {
        let frame = Frame::load_png(path)?;
        let d = (frame.height(), frame.width());
        match dims {
            None => dims = Some(d),
            Some(expect) if expect == d => {}
            Some(expect) => {
                return Err(Error::Dataset(format!(
                    "inconsistent frame dimensions in {}: {:?} is {d:?}, expected {expect:?}",
                    dir.display(),
                    path.file_name().unwrap_or_default()
                )));
            }
        }
        frames.push(frame);
    }
    let (h, w) = dims.expect("at least one frame");
    let mut data = Vec::with_capacity(frames.len() * crate::data::frame::CHANNELS * h * w);
    for frame in &frames {
        data.extend(frame.data().iter().map(|&v| pixel_to_signal(v)));
    }
    Tensor::from_vec(&[frames.len(), crate::data::frame::CHANNELS, h, w], data)
}

/// Writes a `(frames, c, h, w)` signal clip as numbered PNGs.
fn write_clip_frames(clip: &Tensor<f32>, outdir: &Path) -> Result<()> {
    let shape = clip.shape().to_vec();
    let (frames, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert_eq!(c, crate::data::frame::CHANNELS);
    let stride = c * h * w;
    let data = clip.to_vec();
    for t in 0..frames {
        let pixels: Vec<f32> = data[t * stride..(t + 1) * stride]
            .iter()
            .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        let frame = Frame::from_planar(h, w, pixels)?;
        frame.save_png(&outdir.join(format!("frame_{t:05}.png")))?;
    }
    Ok(())
}
