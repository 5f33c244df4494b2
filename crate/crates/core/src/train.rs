//! The fine-tuning loop: loss assembly, gradient accumulation, LR
//! scheduling, fixed-draw validation, early stopping, and bit-exact
//! checkpoint/resume.
//!
//! Each training step draws `grad_accum` micro-batches (one clip window
//! each), accumulates gradients of the scaled total loss, and applies one
//! AdamW update to the adapter parameters only. Validation inputs (window
//! offsets, timesteps, noise) are drawn once up front from dedicated
//! streams, so the metric is comparable across evaluations and identical
//! under re-evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::dataset::ClipStore;
use crate::data::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::metrics::perceptual_proxy;
use crate::model::{CaptionEncoding, VideoDit};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, MomentState};
use crate::rng::StreamRng;
use crate::schedule::{forward_noise_closed, NoiseSchedule};
use crate::tensor::{no_grad, IndexMap, Tensor};

/// Mean squared error between the true and predicted noise.
pub fn diffusion_loss<E: crate::tensor::Scalar>(
    eps: &Tensor<E>,
    eps_hat: &Tensor<E>,
) -> Result<Tensor<E>> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_loss",
            details: format!("{:?} vs {:?}", eps.shape(), eps_hat.shape()),
        });
    }
    let diff = eps_hat.sub(eps)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// Temporal consistency loss on a `(T, ...)` prediction: the mean over
/// adjacent frame pairs of the element-averaged squared difference.
/// Gradients flow into the prediction through both slice views.
pub fn temporal_loss<E: crate::tensor::Scalar>(eps_hat: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = eps_hat.shape();
    if shape.is_empty() || shape[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal loss needs at least 2 frames, got shape {shape:?}"
        )));
    }
    let frames = shape[0];
    let prev = eps_hat.gather(&Rc::new(IndexMap::slice_rows(shape, 0, frames - 1)?))?;
    let next = eps_hat.gather(&Rc::new(IndexMap::slice_rows(shape, 1, frames)?))?;
    let diff = next.sub(&prev)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// `L_total = L_diff + λ·L_temp` as a graph node.
pub fn total_loss<E: crate::tensor::Scalar>(
    l_diff: &Tensor<E>,
    l_temp: &Tensor<E>,
    lambda: f64,
) -> Result<Tensor<E>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    l_diff.add(&l_temp.scale(E::from_f64_lossy(lambda)))
}

/// Hyperparameters of the fine-tuning loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Optimizer steps; each consumes `grad_accum` micro-batches.
    pub total_steps: usize,
    pub lr_peak: f64,
    pub warmup_fraction: f64,
    pub grad_accum: usize,
    pub lambda_temporal: f64,
    /// Steps between validation evaluations.
    pub eval_interval: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub rank: usize,
    pub alpha: f64,
    /// Probability of replacing the caption with the null embedding, so the
    /// unconditional branch used by guidance gets trained.
    pub caption_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 4000,
            lr_peak: 3e-5,
            warmup_fraction: 0.05,
            grad_accum: 4,
            lambda_temporal: 0.1,
            eval_interval: 250,
            patience: 3,
            seed: 0,
            rank: 8,
            alpha: 16.0,
            caption_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be positive".into()));
        }
        if self.grad_accum == 0 {
            return Err(Error::InvalidConfig("grad_accum must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.eval_interval == 0 || self.eval_interval > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "eval_interval must be in [1, total_steps], got {}",
                self.eval_interval
            )));
        }
        if !(self.lambda_temporal >= 0.0 && self.lambda_temporal.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_temporal must be finite and non-negative, got {}",
                self.lambda_temporal
            )));
        }
        if !(0.0..1.0).contains(&self.caption_dropout) {
            return Err(Error::InvalidConfig(format!(
                "caption_dropout must be in [0, 1), got {}",
                self.caption_dropout
            )));
        }
        if self.rank == 0 || self.alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "rank and alpha must be positive, got r={} alpha={}",
                self.rank, self.alpha
            )));
        }
        LrSchedule::new(self.lr_peak, self.total_steps, self.warmup_fraction).map(|_| ())
    }
}

/// Plateau detector: strict improvement of the (lower-is-better) metric
/// resets the counter; `patience` consecutive non-improvements stop the run.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_improve: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since_improve: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn evals_since_improve(&self) -> usize {
        self.since_improve
    }

    /// Feeds one validation metric; returns `true` when the run should stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        self.since_improve >= self.patience
    }
}

/// Mutable progress of a run, small enough to checkpoint as JSON.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed optimizer steps (0 before training).
    pub step: usize,
    pub best_val_metric: f64,
    pub evals_since_improve: usize,
}

/// What a finished (or early-stopped) run reports back.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_completed: usize,
    pub best_val_metric: f64,
    pub evaluations: usize,
    pub stopped_early: bool,
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    lr: f64,
    l_diff: f64,
    l_temp: f64,
    l_total: f64,
}

#[derive(Serialize)]
struct EvalRecord {
    step: usize,
    val_metric: f64,
    best: f64,
    evals_since_improve: usize,
}

/// The five deterministic streams the loop draws from, in a fixed order.
struct TrainRngs {
    clip: StreamRng,
    window: StreamRng,
    timestep: StreamRng,
    noise: StreamRng,
    dropout: StreamRng,
}

impl TrainRngs {
    const NAMES: [&'static str; 5] = [
        "train/clip",
        "train/window",
        "train/timestep",
        "train/noise",
        "train/dropout",
    ];

    fn new(seed: u64) -> Self {
        TrainRngs {
            clip: StreamRng::new(seed, Self::NAMES[0]),
            window: StreamRng::new(seed, Self::NAMES[1]),
            timestep: StreamRng::new(seed, Self::NAMES[2]),
            noise: StreamRng::new(seed, Self::NAMES[3]),
            dropout: StreamRng::new(seed, Self::NAMES[4]),
        }
    }

    fn cursors(&self) -> BTreeMap<String, String> {
        let positions = [
            self.clip.word_pos(),
            self.window.word_pos(),
            self.timestep.word_pos(),
            self.noise.word_pos(),
            self.dropout.word_pos(),
        ];
        Self::NAMES
            .iter()
            .zip(positions)
            .map(|(name, pos)| (name.to_string(), pos.to_string()))
            .collect()
    }

    fn restore(&mut self, cursors: &BTreeMap<String, String>) -> Result<()> {
        let streams: [&mut StreamRng; 5] = [
            &mut self.clip,
            &mut self.window,
            &mut self.timestep,
            &mut self.noise,
            &mut self.dropout,
        ];
        for (name, rng) in Self::NAMES.iter().zip(streams) {
            let pos = cursors
                .get(*name)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("checkpoint is missing rng cursor {name:?}"))
                })?
                .parse::<u128>()
                .map_err(|_| {
                    Error::InvalidConfig(format!("checkpoint rng cursor {name:?} is not a number"))
                })?;
            rng.set_word_pos(pos);
        }
        Ok(())
    }
}

/// One pre-drawn validation case: everything needed to score the model on
/// a frozen input.
struct ValCase {
    window: Tensor<f32>,
    first_frame: Tensor<f32>,
    caption: CaptionEncoding<f32>,
    timestep: usize,
    noise: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    step: usize,
    opt_steps: u64,
    best_val_metric: f64,
    evals_since_improve: usize,
    config_digest: String,
    adapter_values: BTreeMap<String, Vec<f32>>,
    moments: Vec<MomentState>,
    rng_cursors: BTreeMap<String, String>,
}

/// SHA-256 over the base (non-adapter) parameters in canonical order; used
/// to prove training never touches the frozen weights.
pub fn base_parameter_hash(model: &VideoDit<f32>) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in model.named_parameters() {
        hasher.update(name.as_bytes());
        tensor.with_data(|d| {
            for v in d {
                hasher.update(v.to_le_bytes());
            }
        });
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Owns the run: model + adapters (borrowed), stores, optimizer, streams.
pub struct Trainer<'m> {
    model: &'m VideoDit<f32>,
    adapters: &'m AdapterSet<f32>,
    config: TrainConfig,
    schedule: NoiseSchedule,
    lr: LrSchedule,
    optimizer: AdamW,
    /// Trainable tensors in the adapters' canonical order.
    params: Vec<(String, Tensor<f32>)>,
    train_store: ClipStore,
    val_cases: Vec<ValCase>,
    rngs: TrainRngs,
    state: TrainState,
    base_hash: String,
}

impl<'m> Trainer<'m> {
    /// Builds a fresh run: loads both splits, pre-draws the validation
    /// fixture, and records the base-parameter hash for the freeze check.
    pub fn new(
        model: &'m VideoDit<f32>,
        adapters: &'m AdapterSet<f32>,
        manifest: &Manifest,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let train_store = ClipStore::load(manifest, Split::Train)?;
        let val_store = ClipStore::load(manifest, Split::Val)?;
        let schedule = NoiseSchedule::linear(model.config().t_diff, 1e-4, 0.02)?;
        let lr = LrSchedule::new(config.lr_peak, config.total_steps, config.warmup_fraction)?;
        let params = adapters.trainable_parameters();
        if params.is_empty() {
            return Err(Error::InvalidConfig(
                "adapter set has no trainable parameters".into(),
            ));
        }
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        let optimizer = AdamW::new(AdamWConfig::default(), &sizes);

        // Frozen validation fixture: one window + timestep + noise per
        // validation clip, drawn from per-clip streams.
        let bucket = manifest.frame_bucket;
        let mut val_cases = Vec::with_capacity(val_store.len());
        for i in 0..val_store.len() {
            let offset = val_store.sample_offset(
                i,
                bucket,
                &mut StreamRng::new(config.seed, &format!("val/window/{i}")),
            )?;
            let window: Tensor<f32> = val_store.window(i, offset, bucket)?;
            let first_frame = frame_of(&window, 0)?;
            let caption = model.encode_caption(&val_store.record(i).caption_ids)?;
            let timestep = StreamRng::new(config.seed, &format!("val/timestep/{i}"))
                .uniform_usize(model.config().t_diff);
            let noise = normal_like(
                &window,
                &mut StreamRng::new(config.seed, &format!("val/noise/{i}")),
            )?;
            val_cases.push(ValCase {
                window,
                first_frame,
                caption,
                timestep,
                noise,
            });
        }

        Ok(Trainer {
            base_hash: base_parameter_hash(model),
            rngs: TrainRngs::new(config.seed),
            state: TrainState {
                step: 0,
                best_val_metric: f64::INFINITY,
                evals_since_improve: 0,
            },
            model,
            adapters,
            config,
            schedule,
            lr,
            optimizer,
            params,
            train_store,
            val_cases,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// The adapter set being trained (shared with the model's slots).
    pub fn adapters(&self) -> &AdapterSet<f32> {
        self.adapters
    }

    /// The frozen-draw validation metric: for every validation case, noise
    /// the window at its fixed timestep, denoise, reconstruct the clean
    /// window from the prediction, and take the perceptual proxy against
    /// the true window. Lower is better.
    pub fn validation_metric(&self) -> Result<f64> {
        let _guard = no_grad();
        let mut total = 0.0;
        for case in &self.val_cases {
            let x_t = forward_noise_closed(&case.window, case.timestep, &case.noise, &self.schedule)?;
            let eps_hat = self
                .model
                .denoise(&x_t, case.timestep, &case.caption, &case.first_frame)?;
            // x̂₀ = (x_t − √(1−ᾱ)·ε̂)/√ᾱ.
            let ab = self.schedule.alpha_bar(case.timestep);
            let x0_hat = x_t
                .add(&eps_hat.scale(-((1.0 - ab).sqrt() as f32)))?
                .scale(1.0 / ab.sqrt() as f32);
            total += perceptual_proxy(&x0_hat, &case.window)?;
        }
        Ok(total / self.val_cases.len() as f64)
    }

    /// One optimizer step (1-based index): `grad_accum` micro-batches, each
    /// backpropagating `L_total / grad_accum`, then a single AdamW update at
    /// `lr_at(step)`. Returns the mean per-micro-batch loss components.
    fn train_step(&mut self, step: usize) -> Result<(f64, f64, f64)> {
        let accum = self.config.grad_accum;
        let mut sums = (0.0, 0.0, 0.0);
        for micro in 0..accum {
            let clip = self.rngs.clip.uniform_usize(self.train_store.len());
            let (window, _offset) =
                self.train_store
                    .sample_window::<f32>(clip, self.window_len(), &mut self.rngs.window)?;
            let first_frame = frame_of(&window, 0)?;
            let timestep = self.rngs.timestep.uniform_usize(self.model.config().t_diff);
            let noise = normal_like(&window, &mut self.rngs.noise)?;
            let caption = if self.rngs.dropout.uniform() < self.config.caption_dropout {
                self.model.null_caption()?
            } else {
                self.model
                    .encode_caption(&self.train_store.record(clip).caption_ids)?
            };

            let x_t = forward_noise_closed(&window, timestep, &noise, &self.schedule)?;
            let eps_hat = self.model.denoise(&x_t, timestep, &caption, &first_frame)?;
            let l_diff = diffusion_loss(&noise, &eps_hat)?;
            let l_temp = temporal_loss(&eps_hat)?;
            let l_total = total_loss(&l_diff, &l_temp, self.config.lambda_temporal)?;

            let (d, t, tot) = (
                l_diff.item()? as f64,
                l_temp.item()? as f64,
                l_total.item()? as f64,
            );
            if !tot.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    micro,
                    video_id: self.train_store.record(clip).video_id.clone(),
                    timestep,
                });
            }
            sums = (sums.0 + d, sums.1 + t, sums.2 + tot);

            l_total.scale(1.0 / accum as f32).backward()?;
        }
        self.optimizer
            .step(&param_tensors(&self.params), self.lr.lr_at(step.min(self.config.total_steps))?)?;
        for (_, p) in &self.params {
            p.clear_grad();
        }
        let n = accum as f64;
        Ok((sums.0 / n, sums.1 / n, sums.2 / n))
    }

    fn window_len(&self) -> usize {
        // The store was built from the manifest, whose bucket is the
        // training window length; every accepted clip can serve it.
        crate::data::manifest::FRAME_BUCKET
    }

    /// Runs from the current state to `stop_step` (clamped to the step
    /// budget), evaluating/checkpointing on the configured cadence. Lets
    /// tests interrupt a run mid-way; [`Trainer::run`] goes to the end.
    pub fn run_until(
        &mut self,
        stop_step: usize,
        log: &mut dyn Write,
        checkpoint: Option<&Path>,
    ) -> Result<TrainReport> {
        let stop = stop_step.min(self.config.total_steps);
        let mut stopper = EarlyStopper::new(self.config.patience);
        // Rehydrate the stopper from a resumed state.
        stopper.best = self.state.best_val_metric;
        stopper.since_improve = self.state.evals_since_improve;

        let mut evaluations = 0;
        let mut stopped_early = false;
        while self.state.step < stop {
            let step = self.state.step + 1;
            let (l_diff, l_temp, l_total) = self.train_step(step)?;
            self.state.step = step;

            let record = StepRecord {
                step,
                lr: self.lr.lr_at(step.min(self.config.total_steps))?,
                l_diff,
                l_temp,
                l_total,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)
                .map_err(|e| Error::io(Path::new("<train log>"), e))?;

            if step % self.config.eval_interval == 0 {
                let val_metric = self.validation_metric()?;
                let stop_now = stopper.observe(val_metric);
                self.state.best_val_metric = stopper.best();
                self.state.evals_since_improve = stopper.evals_since_improve();
                evaluations += 1;

                let record = EvalRecord {
                    step,
                    val_metric,
                    best: stopper.best(),
                    evals_since_improve: stopper.evals_since_improve(),
                };
                writeln!(log, "{}", serde_json::to_string(&record)?)
                    .map_err(|e| Error::io(Path::new("<train log>"), e))?;

                if let Some(path) = checkpoint {
                    self.checkpoint(path)?;
                }
                if stop_now {
                    stopped_early = true;
                    break;
                }
            }
        }

        if base_parameter_hash(self.model) != self.base_hash {
            return Err(Error::InvalidConfig(
                "base parameters changed during training; the freeze contract is broken".into(),
            ));
        }
        Ok(TrainReport {
            steps_completed: self.state.step,
            best_val_metric: self.state.best_val_metric,
            evaluations,
            stopped_early,
        })
    }

    /// Runs to the configured step budget (or an early stop).
    pub fn run(&mut self, log: &mut dyn Write, checkpoint: Option<&Path>) -> Result<TrainReport> {
        self.run_until(self.config.total_steps, log, checkpoint)
    }

    /// Serializes everything a bit-exact resume needs: adapter values,
    /// optimizer moments, rng cursors, and progress counters.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            step: self.state.step,
            opt_steps: self.optimizer.steps(),
            best_val_metric: self.state.best_val_metric,
            evals_since_improve: self.state.evals_since_improve,
            config_digest: self.model.config().digest(),
            adapter_values: self
                .params
                .iter()
                .map(|(name, t)| (name.clone(), t.to_vec()))
                .collect(),
            moments: self.optimizer.moments().to_vec(),
            rng_cursors: self.rngs.cursors(),
        };
        let mut json = serde_json::to_string(&doc)?;
        json.push('\n');
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never corrupts the
        // previous checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Restores a checkpoint written by [`Trainer::checkpoint`]. The run
    /// then continues exactly as if it had never been interrupted.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.config_digest != self.model.config().digest() {
            return Err(Error::DigestMismatch {
                expected: doc.config_digest,
                actual: self.model.config().digest(),
            });
        }
        for (name, tensor) in &self.params {
            let values = doc.adapter_values.get(name).ok_or_else(|| Error::Artifact {
                path: path.to_path_buf(),
                reason: format!("checkpoint is missing adapter tensor {name:?}"),
            })?;
            if values.len() != tensor.numel() {
                return Err(Error::Artifact {
                    path: path.to_path_buf(),
                    reason: format!(
                        "adapter tensor {name:?} holds {} values, expected {}",
                        values.len(),
                        tensor.numel()
                    ),
                });
            }
            tensor.with_data_mut(|d| d.copy_from_slice(values));
            tensor.clear_grad();
        }
        self.optimizer.restore(doc.opt_steps, doc.moments)?;
        self.rngs.restore(&doc.rng_cursors)?;
        self.state = TrainState {
            step: doc.step,
            best_val_metric: doc.best_val_metric,
            evals_since_improve: doc.evals_since_improve,
        };
        Ok(())
    }
}

fn param_tensors(params: &[(String, Tensor<f32>)]) -> Vec<Tensor<f32>> {
    params.iter().map(|(_, t)| t.clone()).collect()
}

/// Frame `i` of a `(frames, c, h, w)` window as a fresh `(c, h, w)` leaf.
fn frame_of(window: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let shape = window.shape();
    let frame: Vec<f32> = window.with_data(|d| {
        let stride: usize = shape[1..].iter().product();
        d[i * stride..(i + 1) * stride].to_vec()
    });
    Tensor::from_vec(&shape[1..], frame)
}

/// A fresh standard-normal tensor with `like`'s shape.
fn normal_like(like: &Tensor<f32>, rng: &mut StreamRng) -> Result<Tensor<f32>> {
    let data: Vec<f32> = (0..like.numel()).map(|_| rng.normal() as f32).collect();
    Tensor::from_vec(like.shape(), data)
}
