//! Flat run configuration shared by every subcommand.
//!
//! One TOML document carries the union of the model, training, data, and
//! generation knobs; each command reads the slice it needs through the
//! typed accessors below. Unknown keys are rejected, and the whole document
//! is validated before any command does filesystem work.

use std::path::Path;

use serde::Deserialize;

use crate::data::captions;
use crate::data::generator::CorpusSpec;
use crate::data::manifest::FRAME_BUCKET;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::shard::plan_shards;
use crate::train::TrainConfig;

/// Every tunable of the pipeline, with desk-scale defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model geometry.
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub max_caption_len: usize,
    pub max_frames: usize,
    pub t_diff: usize,
    pub lora_encoder_blocks: Vec<usize>,
    pub lora_decoder_blocks: Vec<usize>,

    // Training.
    pub total_steps: usize,
    pub lr_peak: f64,
    pub warmup_fraction: f64,
    pub grad_accum: usize,
    pub lambda_temporal: f64,
    pub eval_interval: usize,
    pub patience: usize,
    /// Adapter rank, under its conventional short name.
    pub r: usize,
    pub alpha: f64,
    pub caption_dropout: f64,

    // Dataset preparation.
    pub clips: usize,
    pub frames_per_clip: usize,
    pub val_fraction: f64,

    // Generation.
    pub num_frames: usize,
    pub cfg: f64,
    pub steps: usize,
    pub shards: usize,
    pub overlap: usize,
    pub fps: u32,

    /// Master seed; every stage derives named streams from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            frame_height: model.frame_height,
            frame_width: model.frame_width,
            channels: model.channels,
            patch_size: model.patch_size,
            d_model: model.d_model,
            n_heads: model.n_heads,
            encoder_blocks: model.encoder_blocks,
            decoder_blocks: model.decoder_blocks,
            max_caption_len: model.max_caption_len,
            max_frames: model.max_frames,
            t_diff: model.t_diff,
            lora_encoder_blocks: model.lora_encoder_blocks,
            lora_decoder_blocks: model.lora_decoder_blocks,
            total_steps: train.total_steps,
            lr_peak: train.lr_peak,
            warmup_fraction: train.warmup_fraction,
            grad_accum: train.grad_accum,
            lambda_temporal: train.lambda_temporal,
            eval_interval: train.eval_interval,
            patience: train.patience,
            r: train.rank,
            alpha: train.alpha,
            caption_dropout: train.caption_dropout,
            clips: 40,
            frames_per_clip: 48,
            val_fraction: 0.1,
            num_frames: 96,
            cfg: 3.8,
            steps: 30,
            shards: 2,
            overlap: 4,
            fps: 24,
            seed: train.seed,
        }
    }
}

impl RunConfig {
    /// Parses a TOML document; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    /// Loads a config file, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    /// The model slice. The vocabulary size always comes from the built-in
    /// tokenizer — it is derived state, not a knob.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frame_height: self.frame_height,
            frame_width: self.frame_width,
            channels: self.channels,
            patch_size: self.patch_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            vocab_size: captions::vocab().len(),
            max_caption_len: self.max_caption_len,
            max_frames: self.max_frames,
            t_diff: self.t_diff,
            lora_encoder_blocks: self.lora_encoder_blocks.clone(),
            lora_decoder_blocks: self.lora_decoder_blocks.clone(),
        }
    }

    /// The training slice.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            lr_peak: self.lr_peak,
            warmup_fraction: self.warmup_fraction,
            grad_accum: self.grad_accum,
            lambda_temporal: self.lambda_temporal,
            eval_interval: self.eval_interval,
            patience: self.patience,
            seed: self.seed,
            rank: self.r,
            alpha: self.alpha,
            caption_dropout: self.caption_dropout,
        }
    }

    /// The corpus-rendering slice. Scenes render at the stored frame size,
    /// so the default letterbox pass is a pure resize.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            clips: self.clips,
            frames_per_clip: self.frames_per_clip,
            render_h: self.frame_height,
            render_w: self.frame_width,
            frame_h: self.frame_height,
            frame_w: self.frame_width,
            seed: self.seed,
        }
    }

    /// Validates every slice against its owning module's constraints.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.clips == 0 {
            return Err(Error::InvalidConfig("clips must be positive".into()));
        }
        if self.frames_per_clip < FRAME_BUCKET {
            return Err(Error::InvalidConfig(format!(
                "frames_per_clip must be at least the {FRAME_BUCKET}-frame training window, got {}",
                self.frames_per_clip
            )));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must be in [0, 1], got {}",
                self.val_fraction
            )));
        }
        if self.steps == 0 || self.steps > self.t_diff {
            return Err(Error::InvalidConfig(format!(
                "steps must be in [1, t_diff], got {}",
                self.steps
            )));
        }
        if !(self.cfg >= 0.0 && self.cfg.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cfg must be finite and non-negative, got {}",
                self.cfg
            )));
        }
        if self.fps == 0 {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        let plan = plan_shards(self.num_frames, self.shards, self.overlap)
            .map_err(|e| Error::InvalidConfig(format!("sharding: {e}")))?;
        for &(s, e) in &plan.intervals {
            if e - s > self.max_frames {
                return Err(Error::InvalidConfig(format!(
                    "a shard of {} frames exceeds max_frames {}",
                    e - s,
                    self.max_frames
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_mirror_the_module_defaults() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.model_config(), ModelConfig::default());
        assert_eq!(config.clips, 40);
        assert_eq!(config.val_fraction, 0.1);
        assert_eq!(config.cfg, 3.8);
        assert_eq!(config.steps, 30);
        assert_eq!(config.fps, 24);
        assert_eq!(config.num_frames, 96);
        assert_eq!(config.shards, 2);
        assert_eq!(config.overlap, 4);
    }

    #[test]
    fn toml_round_trip_overrides_only_named_keys() {
        let config = RunConfig::from_toml(
            "r = 4\nalpha = 8.0\nclips = 6\nframe_height = 32\nlora_encoder_blocks = [0]\n",
        )
        .unwrap();
        assert_eq!(config.r, 4);
        assert_eq!(config.alpha, 8.0);
        assert_eq!(config.clips, 6);
        assert_eq!(config.frame_height, 32);
        assert_eq!(config.lora_encoder_blocks, vec![0]);
        // Untouched keys keep their defaults.
        assert_eq!(config.d_model, RunConfig::default().d_model);
        assert_eq!(config.train_config().rank, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("learning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn cross_module_constraints_are_enforced() {
        let mut config = RunConfig::default();
        config.frames_per_clip = 10;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.steps = 0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.overlap = 200;
        assert!(config.validate().is_err());

        // A shard longer than the temporal position table is caught here,
        // before any model is built.
        let mut config = RunConfig::default();
        config.max_frames = 33;
        config.shards = 1;
        assert!(config.validate().is_err());
    }
}
