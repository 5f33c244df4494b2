//! The miniature video diffusion transformer.
//!
//! A frame window is patchified into tokens, enriched with spatial/temporal
//! position tables and a sinusoidal timestep embedding, then run through a
//! stack of encoder blocks (per-frame self-attention + cross-attention over
//! the caption and first-frame tokens) and decoder blocks (cross-frame
//! temporal self-attention + caption cross-attention). A linear head
//! predicts the per-patch noise, which is unpatchified back to frames.
//!
//! All base parameters are frozen (`requires_grad = false`) — the only
//! trainable state this crate ever optimizes lives in LoRA adapters attached
//! to cross-attention projections.

mod blocks;

pub use blocks::{Projection, LAYER_NORM_EPS};
pub(crate) use blocks::{Attention, DecoderBlock, EncoderBlock, Geometry, LayerNormParams, MapCache, MapKey, Mlp};

use std::cell::Cell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::Artifact;
use crate::data::captions::{self, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{IndexMap, Scalar, Tensor};

/// Model geometry and conditioning limits. The serialized form of this
/// struct (canonical JSON) is hashed into the config digest that ties
/// checkpoints and adapter sets together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    /// Longest frame window the temporal position table supports.
    pub max_frames: usize,
    /// Diffusion horizon the timestep conditioning was built for.
    pub t_diff: usize,
    /// Encoder block indices (0-based) whose cross-attention q/k/v take
    /// LoRA adapters.
    pub lora_encoder_blocks: Vec<usize>,
    /// Decoder block indices (0-based) whose cross-attention q/k/v take
    /// LoRA adapters.
    pub lora_decoder_blocks: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_height: 16,
            frame_width: 16,
            channels: 3,
            patch_size: 4,
            d_model: 64,
            n_heads: 4,
            encoder_blocks: 4,
            decoder_blocks: 4,
            vocab_size: captions::vocab().len(),
            max_caption_len: 24,
            max_frames: 128,
            t_diff: 100,
            lora_encoder_blocks: vec![0, 1],
            lora_decoder_blocks: vec![0, 1],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("vocab_size", self.vocab_size),
            ("max_caption_len", self.max_caption_len),
            ("max_frames", self.max_frames),
            ("t_diff", self.t_diff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.frame_height % self.patch_size != 0 || self.frame_width % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "frame {}x{} not divisible by patch size {}",
                self.frame_height, self.frame_width, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be even for the sinusoidal timestep embedding".into(),
            ));
        }
        for (name, list, limit) in [
            ("lora_encoder_blocks", &self.lora_encoder_blocks, self.encoder_blocks),
            ("lora_decoder_blocks", &self.lora_decoder_blocks, self.decoder_blocks),
        ] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be strictly ascending, got {list:?}"
                )));
            }
            if let Some(&bad) = list.iter().find(|&&b| b >= limit) {
                return Err(Error::InvalidConfig(format!(
                    "{name} index {bad} out of range (stack has {limit} blocks)"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex-encoded. Artifacts carry
    /// this digest so mismatched model/adapter pairings fail fast.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn geometry(&self) -> Geometry {
        let patches = (self.frame_height / self.patch_size) * (self.frame_width / self.patch_size);
        Geometry {
            channels: self.channels,
            frame_h: self.frame_height,
            frame_w: self.frame_width,
            patch: self.patch_size,
            patches,
            patch_dim: self.channels * self.patch_size * self.patch_size,
            d_model: self.d_model,
            heads: self.n_heads,
            dk: self.d_model / self.n_heads,
            max_frames: self.max_frames,
        }
    }
}

/// Which stack a projection lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder,
    Decoder,
}

/// Which projection of a cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Q,
    K,
    V,
}

/// Stable name of a LoRA-targetable projection, e.g. `enc.1.cross.q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProjName {
    pub stage: Stage,
    pub block: usize,
    pub role: Role,
}

impl fmt::Display for ProjName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Encoder => "enc",
            Stage::Decoder => "dec",
        };
        let role = match self.role {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
        };
        write!(f, "{stage}.{}.cross.{role}", self.block)
    }
}

impl FromStr for ProjName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let err = || Error::InvalidArgument(format!("malformed projection name {s:?}"));
        if parts.len() != 4 || parts[2] != "cross" {
            return Err(err());
        }
        let stage = match parts[0] {
            "enc" => Stage::Encoder,
            "dec" => Stage::Decoder,
            _ => return Err(err()),
        };
        let block = parts[1].parse::<usize>().map_err(|_| err())?;
        let role = match parts[3] {
            "q" => Role::Q,
            "k" => Role::K,
            "v" => Role::V,
            _ => return Err(err()),
        };
        Ok(ProjName { stage, block, role })
    }
}

/// A caption ready for conditioning: token ids and their embeddings.
pub struct CaptionEncoding<E: Scalar> {
    pub ids: Vec<u32>,
    /// `(len, d_model)` embedding rows.
    pub tokens: Tensor<E>,
    /// True when this is the unconditional (null) caption.
    pub is_null: bool,
}

/// Where parameter values come from during construction.
enum ParamSource<'a> {
    /// Fresh init: truncated normal (σ = 0.02) weights from a per-name
    /// stream, zero biases, unit layer-norm scales.
    Seed(u64),
    /// A checkpoint artifact being loaded.
    Artifact {
        artifact: &'a Artifact,
        path: &'a Path,
        used: std::cell::RefCell<std::collections::BTreeSet<String>>,
    },
}

enum InitKind {
    Weight,
    Zeros,
    Ones,
}

impl ParamSource<'_> {
    fn tensor<E: Scalar>(&self, name: &str, shape: &[usize], kind: InitKind) -> Result<Tensor<E>> {
        match self {
            ParamSource::Seed(seed) => {
                let n: usize = shape.iter().product();
                let data = match kind {
                    InitKind::Weight => {
                        let mut rng = StreamRng::new(*seed, &format!("init/{name}"));
                        (0..n)
                            .map(|_| E::from_f64_lossy(rng.truncated_normal(0.02)))
                            .collect()
                    }
                    InitKind::Zeros => vec![E::zero(); n],
                    InitKind::Ones => vec![E::one(); n],
                };
                Tensor::from_vec(shape, data)
            }
            ParamSource::Artifact { artifact, path, used } => {
                let entry = artifact.tensor(name, path)?;
                if entry.shape != shape {
                    return Err(Error::artifact(
                        *path,
                        format!(
                            "tensor {name:?} has shape {:?}, model wants {shape:?}",
                            entry.shape
                        ),
                    ));
                }
                used.borrow_mut().insert(name.to_string());
                let data = entry.data.iter().map(|&v| E::from_f64_lossy(v as f64)).collect();
                Tensor::from_vec(shape, data)
            }
        }
    }
}

/// The denoiser. See the module docs for the architecture.
pub struct VideoDit<E: Scalar> {
    config: ModelConfig,
    geo: Geometry,
    cache: MapCache,
    patch_w: Tensor<E>,
    patch_b: Tensor<E>,
    pos_spatial: Tensor<E>,
    pos_temporal: Tensor<E>,
    caption_embed: Tensor<E>,
    encoder: Vec<EncoderBlock<E>>,
    decoder: Vec<DecoderBlock<E>>,
    head_ln: LayerNormParams<E>,
    head_w: Tensor<E>,
    head_b: Tensor<E>,
    /// Diagnostic switch: replace temporal attention with the identity.
    temporal_identity: Cell<bool>,
}

impl<E: Scalar> fmt::Debug for VideoDit<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VideoDit")
            .field("config", &self.config)
            .field("param_count", &self.param_count())
            .finish_non_exhaustive()
    }
}

impl<E: Scalar> VideoDit<E> {
    /// Builds a freshly initialized model. Initialization draws from
    /// per-parameter named streams, so it is independent of construction
    /// order and reproducible from the seed alone.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build(config, &ParamSource::Seed(seed))
    }

    fn build(config: ModelConfig, src: &ParamSource) -> Result<Self> {
        let geo = config.geometry();
        let d = geo.d_model;
        let pd = geo.patch_dim;

        let attention = |prefix: &str| -> Result<Attention<E>> {
            let proj = |role: &str| -> Result<Projection<E>> {
                let name = format!("{prefix}.{role}");
                Ok(Projection::new(
                    name.clone(),
                    src.tensor(&name, &[d, d], InitKind::Weight)?,
                ))
            };
            Ok(Attention {
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
                o: proj("o")?,
            })
        };
        let layer_norm = |prefix: &str| -> Result<LayerNormParams<E>> {
            Ok(LayerNormParams {
                gamma: src.tensor(&format!("{prefix}.g"), &[d], InitKind::Ones)?,
                beta: src.tensor(&format!("{prefix}.b"), &[d], InitKind::Zeros)?,
            })
        };
        let mlp = |prefix: &str| -> Result<Mlp<E>> {
            Ok(Mlp {
                w1: src.tensor(&format!("{prefix}.w1"), &[4 * d, d], InitKind::Weight)?,
                b1: src.tensor(&format!("{prefix}.b1"), &[4 * d], InitKind::Zeros)?,
                w2: src.tensor(&format!("{prefix}.w2"), &[d, 4 * d], InitKind::Weight)?,
                b2: src.tensor(&format!("{prefix}.b2"), &[d], InitKind::Zeros)?,
            })
        };

        let mut encoder = Vec::with_capacity(config.encoder_blocks);
        for i in 0..config.encoder_blocks {
            encoder.push(EncoderBlock {
                ln1: layer_norm(&format!("enc.{i}.ln1"))?,
                self_attn: attention(&format!("enc.{i}.self"))?,
                ln2: layer_norm(&format!("enc.{i}.ln2"))?,
                cross_attn: attention(&format!("enc.{i}.cross"))?,
                ln3: layer_norm(&format!("enc.{i}.ln3"))?,
                mlp: mlp(&format!("enc.{i}.mlp"))?,
            });
        }
        let mut decoder = Vec::with_capacity(config.decoder_blocks);
        for i in 0..config.decoder_blocks {
            decoder.push(DecoderBlock {
                ln1: layer_norm(&format!("dec.{i}.ln1"))?,
                temporal_attn: attention(&format!("dec.{i}.temporal"))?,
                ln2: layer_norm(&format!("dec.{i}.ln2"))?,
                cross_attn: attention(&format!("dec.{i}.cross"))?,
                ln3: layer_norm(&format!("dec.{i}.ln3"))?,
                mlp: mlp(&format!("dec.{i}.mlp"))?,
            });
        }

        Ok(VideoDit {
            patch_w: src.tensor("patch.w", &[d, pd], InitKind::Weight)?,
            patch_b: src.tensor("patch.b", &[d], InitKind::Zeros)?,
            pos_spatial: src.tensor("pos.spatial", &[geo.patches, d], InitKind::Weight)?,
            pos_temporal: src.tensor("pos.temporal", &[geo.max_frames, d], InitKind::Weight)?,
            caption_embed: src.tensor("caption.embed", &[config.vocab_size, d], InitKind::Weight)?,
            encoder,
            decoder,
            head_ln: layer_norm("head.ln")?,
            head_w: src.tensor("head.w", &[pd, d], InitKind::Weight)?,
            head_b: src.tensor("head.b", &[pd], InitKind::Zeros)?,
            cache: MapCache::new(geo),
            geo,
            config,
            temporal_identity: Cell::new(false),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces temporal attention with the identity (diagnostics only).
    pub fn set_temporal_attention_identity(&self, on: bool) {
        self.temporal_identity.set(on);
    }

    /// Visits every parameter in a fixed canonical order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<E>)) {
        let attn = |prefix: &str, a: &Attention<E>, f: &mut dyn FnMut(&str, &Tensor<E>)| {
            f(&format!("{prefix}.q"), &a.q.w);
            f(&format!("{prefix}.k"), &a.k.w);
            f(&format!("{prefix}.v"), &a.v.w);
            f(&format!("{prefix}.o"), &a.o.w);
        };
        f("patch.w", &self.patch_w);
        f("patch.b", &self.patch_b);
        f("pos.spatial", &self.pos_spatial);
        f("pos.temporal", &self.pos_temporal);
        f("caption.embed", &self.caption_embed);
        for (i, b) in self.encoder.iter().enumerate() {
            f(&format!("enc.{i}.ln1.g"), &b.ln1.gamma);
            f(&format!("enc.{i}.ln1.b"), &b.ln1.beta);
            attn(&format!("enc.{i}.self"), &b.self_attn, &mut f);
            f(&format!("enc.{i}.ln2.g"), &b.ln2.gamma);
            f(&format!("enc.{i}.ln2.b"), &b.ln2.beta);
            attn(&format!("enc.{i}.cross"), &b.cross_attn, &mut f);
            f(&format!("enc.{i}.ln3.g"), &b.ln3.gamma);
            f(&format!("enc.{i}.ln3.b"), &b.ln3.beta);
            f(&format!("enc.{i}.mlp.w1"), &b.mlp.w1);
            f(&format!("enc.{i}.mlp.b1"), &b.mlp.b1);
            f(&format!("enc.{i}.mlp.w2"), &b.mlp.w2);
            f(&format!("enc.{i}.mlp.b2"), &b.mlp.b2);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            f(&format!("dec.{i}.ln1.g"), &b.ln1.gamma);
            f(&format!("dec.{i}.ln1.b"), &b.ln1.beta);
            attn(&format!("dec.{i}.temporal"), &b.temporal_attn, &mut f);
            f(&format!("dec.{i}.ln2.g"), &b.ln2.gamma);
            f(&format!("dec.{i}.ln2.b"), &b.ln2.beta);
            attn(&format!("dec.{i}.cross"), &b.cross_attn, &mut f);
            f(&format!("dec.{i}.ln3.g"), &b.ln3.gamma);
            f(&format!("dec.{i}.ln3.b"), &b.ln3.beta);
            f(&format!("dec.{i}.mlp.w1"), &b.mlp.w1);
            f(&format!("dec.{i}.mlp.b1"), &b.mlp.b1);
            f(&format!("dec.{i}.mlp.w2"), &b.mlp.w2);
            f(&format!("dec.{i}.mlp.b2"), &b.mlp.b2);
        }
        f("head.ln.g", &self.head_ln.gamma);
        f("head.ln.b", &self.head_ln.beta);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.for_each_param(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Total number of base (frozen) parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    /// Every projection LoRA can target, in a stable order: encoder blocks
    /// then decoder blocks, q/k/v within each cross-attention.
    pub fn named_projections(&self) -> Vec<(ProjName, &Projection<E>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            for (role, proj) in [
                (Role::Q, &b.cross_attn.q),
                (Role::K, &b.cross_attn.k),
                (Role::V, &b.cross_attn.v),
            ] {
                out.push((ProjName { stage: Stage::Encoder, block: i, role }, proj));
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            for (role, proj) in [
                (Role::Q, &b.cross_attn.q),
                (Role::K, &b.cross_attn.k),
                (Role::V, &b.cross_attn.v),
            ] {
                out.push((ProjName { stage: Stage::Decoder, block: i, role }, proj));
            }
        }
        out
    }

    /// Finds one targetable projection by name.
    pub fn projection(&self, name: ProjName) -> Result<&Projection<E>> {
        self.named_projections()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::InvalidArgument(format!("no projection named {name}")))
    }

    /// Embeds caption token ids. Empty input becomes the null caption.
    pub fn encode_caption(&self, ids: &[u32]) -> Result<CaptionEncoding<E>> {
        let ids: Vec<u32> = if ids.is_empty() { vec![NULL_TOKEN] } else { ids.to_vec() };
        if ids.len() > self.config.max_caption_len {
            return Err(Error::InvalidArgument(format!(
                "caption of {} tokens exceeds max_caption_len {}",
                ids.len(),
                self.config.max_caption_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let map = IndexMap::select_rows(&[self.config.vocab_size, self.geo.d_model], &rows)?;
        let tokens = self.caption_embed.gather(&std::rc::Rc::new(map))?;
        let is_null = ids == [NULL_TOKEN];
        Ok(CaptionEncoding { ids, tokens, is_null })
    }

    /// The unconditional caption encoding.
    pub fn null_caption(&self) -> Result<CaptionEncoding<E>> {
        self.encode_caption(&[])
    }

    /// Sinusoidal embedding of the diffusion timestep, shape `(1, d_model)`:
    /// `sin(t·ω_i)` in the first half, `cos(t·ω_i)` in the second, with
    /// geometrically spaced frequencies.
    fn timestep_embedding(&self, t: usize) -> Result<Tensor<E>> {
        let d = self.geo.d_model;
        let half = d / 2;
        let mut v = vec![E::zero(); d];
        for i in 0..half {
            let omega = 10000f64.powf(-(i as f64) / half as f64);
            let angle = t as f64 * omega;
            v[i] = E::from_f64_lossy(angle.sin());
            v[half + i] = E::from_f64_lossy(angle.cos());
        }
        Tensor::from_vec(&[1, d], v)
    }

    /// Projects patchified tokens and adds spatial position embeddings —
    /// shared by the window path and the first-frame conditioning path.
    fn embed_frame_tokens(&self, patched: &Tensor<E>, frames: usize) -> Result<Tensor<E>> {
        let x = blocks::linear(patched, &self.patch_w, &self.patch_b, &self.cache)?;
        let pos_s = self.pos_spatial.gather(&self.cache.get(MapKey::PosSpatial { frames })?)?;
        x.add(&pos_s)
    }

    /// Predicts the noise in `window` at diffusion timestep `t`.
    ///
    /// * `window` — `(frames, c, h, w)` noisy frames
    /// * `caption` — conditioning text (or the null caption)
    /// * `first_frame` — `(c, h, w)` clean conditioning image
    ///
    /// Returns `(frames, c, h, w)` predicted noise.
    pub fn denoise(
        &self,
        window: &Tensor<E>,
        t: usize,
        caption: &CaptionEncoding<E>,
        first_frame: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let g = &self.geo;
        let want_frame = [g.channels, g.frame_h, g.frame_w];
        let shape = window.shape();
        if shape.len() != 4 || shape[1..] != want_frame {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                details: format!("window {shape:?}, expected (frames, {want_frame:?})"),
            });
        }
        let frames = shape[0];
        if frames > g.max_frames {
            return Err(Error::InvalidArgument(format!(
                "window of {frames} frames exceeds max_frames {}",
                g.max_frames
            )));
        }
        if first_frame.shape() != want_frame {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                details: format!(
                    "first_frame {:?}, expected {want_frame:?}",
                    first_frame.shape()
                ),
            });
        }
        if t >= self.config.t_diff {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside diffusion horizon {}",
                self.config.t_diff
            )));
        }

        let n = frames * g.patches;

        // Tokenize: patchify, project, add position and timestep signals.
        let patched = window.gather(&self.cache.get(MapKey::Patchify { frames })?)?;
        let mut x = self.embed_frame_tokens(&patched, frames)?;
        let pos_t = self.pos_temporal.gather(&self.cache.get(MapKey::PosTemporal { frames })?)?;
        x = x.add(&pos_t)?;
        let t_emb = self
            .timestep_embedding(t)?
            .gather(&self.cache.get(MapKey::Broadcast { cols: g.d_model, copies: n })?)?;
        x = x.add(&t_emb)?;

        // First-frame tokens (clean image, spatial positions only).
        let ff_patched = first_frame.gather(&self.cache.get(MapKey::Patchify { frames: 1 })?)?;
        let ff_tokens = self.embed_frame_tokens(&ff_patched, 1)?;

        // Encoder context: caption tokens then first-frame tokens.
        let enc_ctx = Tensor::concat_rows(&[caption.tokens.clone(), ff_tokens])?;
        for block in &self.encoder {
            x = block.forward(&x, &enc_ctx, frames, g, &self.cache)?;
        }
        for block in &self.decoder {
            x = block.forward(
                &x,
                &caption.tokens,
                frames,
                g,
                &self.cache,
                self.temporal_identity.get(),
            )?;
        }

        let y = x.layer_norm(&self.head_ln.gamma, &self.head_ln.beta, LAYER_NORM_EPS)?;
        let out = blocks::linear(&y, &self.head_w, &self.head_b, &self.cache)?;
        out.gather(&self.cache.get(MapKey::Unpatchify { frames })?)
    }

    /// Writes the model as a checkpoint artifact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut artifact = Artifact::new("checkpoint");
        artifact.set_meta("config", serde_json::to_value(&self.config)?);
        artifact.set_meta("config_digest", serde_json::Value::String(self.config.digest()));
        self.for_each_param(|name, t| {
            let data = t.with_data(|d| d.iter().map(|&v| v.to_f64_lossy() as f32).collect());
            artifact.insert_tensor(name, t.shape().to_vec(), data);
        });
        artifact.save(path)
    }
}

impl VideoDit<f32> {
    /// Loads a checkpoint written by [`VideoDit::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let artifact = Artifact::load(path)?;
        artifact.expect_kind("checkpoint", path)?;
        let config_value = artifact
            .meta("config")
            .ok_or_else(|| Error::artifact(path, "missing config metadata"))?;
        let config: ModelConfig = serde_json::from_value(config_value.clone())?;
        config.validate()?;
        let recorded = artifact.meta_str("config_digest", path)?;
        if recorded != config.digest() {
            return Err(Error::DigestMismatch {
                expected: recorded.to_string(),
                actual: config.digest(),
            });
        }
        let src = ParamSource::Artifact {
            artifact: &artifact,
            path,
            used: Default::default(),
        };
        let model = Self::build(config, &src)?;
        // Reject checkpoints carrying tensors this model has no slot for.
        let ParamSource::Artifact { used, .. } = src else { unreachable!() };
        let used = used.into_inner();
        let extras: Vec<&str> = artifact
            .tensor_names()
            .filter(|n| !used.contains(*n))
            .collect();
        if !extras.is_empty() {
            return Err(Error::artifact(
                path,
                format!("checkpoint carries unknown tensors: {extras:?}"),
            ));
        }
        Ok(model)
    }
}

#[cfg(test)]
pub(crate) mod tests;
