//! Low-rank adaptation of the frozen denoiser.
//!
//! Each targeted cross-attention projection `W ∈ R^{d_out×d_in}` gains a
//! pair of factors `A ∈ R^{d_out×r}` (truncated-normal init) and
//! `B ∈ R^{d_in×r}` (zero init), contributing `(α/r)·A·Bᵀ` on top of the
//! frozen weight. Because `B` starts at zero the adapted model is exactly
//! the base model at step 0, and after training the factors can be merged
//! into `W` so inference pays no adapter cost.

use std::path::Path;

use crate::artifact::Artifact;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProjName, Role, Stage, VideoDit};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};

/// One trained low-rank pair attached to a named projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter<E: Scalar> {
    /// Name of the projection this adapter belongs to, e.g. `enc.0.cross.q`.
    pub name: String,
    /// `(d_out, rank)` factor, truncated-normal initialized.
    pub a: Tensor<E>,
    /// `(d_in, rank)` factor, zero initialized.
    pub b: Tensor<E>,
    pub rank: usize,
    pub alpha: f64,
}

impl<E: Scalar> LoraAdapter<E> {
    /// The update is scaled by `α / r` so the effective magnitude is
    /// insensitive to the chosen rank.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// The full set of adapters for one model, in name order. This is the unit
/// of training, serialization, and merging.
#[derive(Debug)]
pub struct AdapterSet<E: Scalar> {
    adapters: Vec<LoraAdapter<E>>,
    rank: usize,
    alpha: f64,
    /// Digest of the base model config these adapters were created for.
    base_digest: String,
}

/// The projections adapted under a config, in canonical order: encoder
/// blocks ascending then decoder blocks, q/k/v within each.
pub fn target_names(config: &ModelConfig) -> Vec<ProjName> {
    let mut out = Vec::new();
    for (stage, blocks) in [
        (Stage::Encoder, &config.lora_encoder_blocks),
        (Stage::Decoder, &config.lora_decoder_blocks),
    ] {
        for &block in blocks {
            for role in [Role::Q, Role::K, Role::V] {
                out.push(ProjName { stage, block, role });
            }
        }
    }
    out
}

/// Creates fresh adapters for every configured target and attaches them to
/// the model. `A` draws from the per-adapter stream `lora/{name}/a`; `B`
/// starts at zero, so injection leaves model outputs untouched.
pub fn inject<E: Scalar>(
    model: &VideoDit<E>,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterSet<E>> {
    if rank == 0 {
        return Err(Error::InvalidArgument("LoRA rank must be positive".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "LoRA alpha must be positive and finite, got {alpha}"
        )));
    }
    let mut adapters = Vec::new();
    for name in target_names(model.config()) {
        let proj = model.projection(name)?;
        let shape = proj.weight().shape();
        let (d_out, d_in) = (shape[0], shape[1]);
        let name = name.to_string();
        let mut rng = StreamRng::new(seed, &format!("lora/{name}/a"));
        let a_data: Vec<E> = (0..d_out * rank)
            .map(|_| E::from_f64_lossy(rng.truncated_normal(0.02)))
            .collect();
        let adapter = LoraAdapter {
            a: Tensor::param(&[d_out, rank], a_data)?,
            b: Tensor::param(&[d_in, rank], vec![E::zero(); d_in * rank])?,
            rank,
            alpha,
            name,
        };
        set_slot(proj, adapter.clone())?;
        adapters.push(adapter);
    }
    Ok(AdapterSet {
        adapters,
        rank,
        alpha,
        base_digest: model.config().digest(),
    })
}

fn set_slot<E: Scalar>(proj: &crate::model::Projection<E>, adapter: LoraAdapter<E>) -> Result<()> {
    let mut slot = proj.adapter.borrow_mut();
    if slot.is_some() {
        return Err(Error::InvalidArgument(format!(
            "projection {} already has an adapter",
            proj.name()
        )));
    }
    *slot = Some(adapter);
    Ok(())
}

/// Removes every adapter from the model, restoring the pure base weights.
pub fn detach_all<E: Scalar>(model: &VideoDit<E>) {
    for (_, proj) in model.named_projections() {
        proj.adapter.borrow_mut().take();
    }
}

impl<E: Scalar> AdapterSet<E> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn base_digest(&self) -> &str {
        &self.base_digest
    }

    pub fn adapters(&self) -> &[LoraAdapter<E>] {
        &self.adapters
    }

    /// The trainable leaves, named `lora/{proj}/{a,b}`, in a stable order.
    /// These tensors are shared with the attached model, so optimizer steps
    /// are visible to the forward pass.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::with_capacity(2 * self.adapters.len());
        for ad in &self.adapters {
            out.push((format!("lora/{}/a", ad.name), ad.a.clone()));
            out.push((format!("lora/{}/b", ad.name), ad.b.clone()));
        }
        out
    }

    /// Number of trainable scalars: `Σ r·(d_out + d_in)` over the targets.
    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(|ad| ad.a.numel() + ad.b.numel()).sum()
    }

    fn check_digest(&self, model: &VideoDit<E>) -> Result<()> {
        let actual = model.config().digest();
        if self.base_digest != actual {
            return Err(Error::DigestMismatch {
                expected: self.base_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Attaches these adapters to a model with the matching config. The
    /// adapter tensors are shared, not copied.
    pub fn attach(&self, model: &VideoDit<E>) -> Result<()> {
        self.check_digest(model)?;
        for ad in &self.adapters {
            let proj_name: ProjName = ad.name.parse()?;
            let proj = model.projection(proj_name)?;
            let shape = proj.weight().shape();
            let (d_out, d_in) = (shape[0], shape[1]);
            if ad.a.shape() != [d_out, self.rank] || ad.b.shape() != [d_in, self.rank] {
                return Err(Error::ShapeMismatch {
                    op: "attach",
                    details: format!(
                        "adapter {} factors {:?}/{:?} do not fit weight {shape:?} at rank {}",
                        ad.name,
                        ad.a.shape(),
                        ad.b.shape(),
                        self.rank
                    ),
                });
            }
            set_slot(proj, ad.clone())?;
        }
        Ok(())
    }

    /// Folds every adapter into its base weight — `W += (α/r)·A·Bᵀ`,
    /// accumulated in f64 — and clears the adapter slots. Consumes the set:
    /// merged factors must not be applied a second time.
    pub fn merge(self, model: &VideoDit<E>) -> Result<()> {
        self.check_digest(model)?;
        for ad in &self.adapters {
            let proj_name: ProjName = ad.name.parse()?;
            let proj = model.projection(proj_name)?;
            {
                let slot = proj.adapter.borrow();
                match &*slot {
                    Some(attached) if attached.a.id() == ad.a.id() => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "adapter {} is not attached to the model being merged into",
                            ad.name
                        )));
                    }
                }
            }
            let shape = proj.weight().shape();
            let (d_out, d_in) = (shape[0], shape[1]);
            let scaling = ad.scaling();
            let a = ad.a.with_data(|d| d.iter().map(|&v| v.to_f64_lossy()).collect::<Vec<f64>>());
            let b = ad.b.with_data(|d| d.iter().map(|&v| v.to_f64_lossy()).collect::<Vec<f64>>());
            proj.weight().with_data_mut(|w| {
                for i in 0..d_out {
                    for j in 0..d_in {
                        let mut dot = 0.0;
                        for k in 0..ad.rank {
                            dot += a[i * ad.rank + k] * b[j * ad.rank + k];
                        }
                        let updated = w[i * d_in + j].to_f64_lossy() + scaling * dot;
                        w[i * d_in + j] = E::from_f64_lossy(updated);
                    }
                }
            });
            proj.adapter.borrow_mut().take();
        }
        Ok(())
    }

    /// Writes the set as an adapter artifact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut artifact = Artifact::new("adapters");
        artifact.set_meta("rank", serde_json::json!(self.rank));
        artifact.set_meta("alpha", serde_json::json!(self.alpha));
        artifact.set_meta(
            "base_config_digest",
            serde_json::Value::String(self.base_digest.clone()),
        );
        let targets: Vec<&str> = self.adapters.iter().map(|ad| ad.name.as_str()).collect();
        artifact.set_meta("targets", serde_json::json!(targets));
        for ad in &self.adapters {
            for (suffix, t) in [("a", &ad.a), ("b", &ad.b)] {
                let data = t.with_data(|d| d.iter().map(|&v| v.to_f64_lossy() as f32).collect());
                artifact.insert_tensor(&format!("lora/{}/{suffix}", ad.name), t.shape().to_vec(), data);
            }
        }
        artifact.save(path)
    }
}

impl AdapterSet<f32> {
    /// Loads a set written by [`AdapterSet::save`]. The factors come back
    /// as trainable leaves, ready for further tuning or merging.
    pub fn load(path: &Path) -> Result<Self> {
        let artifact = Artifact::load(path)?;
        artifact.expect_kind("adapters", path)?;
        let rank = artifact.meta_u64("rank", path)? as usize;
        let alpha = artifact.meta_f64("alpha", path)?;
        let base_digest = artifact.meta_str("base_config_digest", path)?.to_string();
        let targets = artifact
            .meta("targets")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::artifact(path, "missing or malformed targets list"))?;
        let mut adapters = Vec::with_capacity(targets.len());
        for target in targets {
            let name = target
                .as_str()
                .ok_or_else(|| Error::artifact(path, "non-string entry in targets list"))?;
            // Validate the name early so a corrupted list fails here, not
            // at attach time.
            let _: ProjName = name.parse()?;
            let factor = |suffix: &str| -> Result<Tensor<f32>> {
                let key = format!("lora/{name}/{suffix}");
                let entry = artifact.tensor(&key, path)?;
                if entry.shape.len() != 2 || entry.shape[1] != rank {
                    return Err(Error::artifact(
                        path,
                        format!("tensor {key:?} has shape {:?}, want (_, {rank})", entry.shape),
                    ));
                }
                Tensor::param(&entry.shape, entry.data.clone())
            };
            adapters.push(LoraAdapter {
                name: name.to_string(),
                a: factor("a")?,
                b: factor("b")?,
                rank,
                alpha,
            });
        }
        if artifact.tensor_count() != 2 * adapters.len() {
            return Err(Error::artifact(
                path,
                format!(
                    "artifact holds {} tensors but targets imply {}",
                    artifact.tensor_count(),
                    2 * adapters.len()
                ),
            ));
        }
        Ok(AdapterSet {
            adapters,
            rank,
            alpha,
            base_digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{random_frames, tiny_config};

    fn adapted_model() -> (VideoDit<f32>, AdapterSet<f32>) {
        let model = VideoDit::<f32>::new(tiny_config(), 7).unwrap();
        let set = inject(&model, 2, 4.0, 99).unwrap();
        (model, set)
    }

    fn denoise_once(model: &VideoDit<f32>) -> Vec<f32> {
        let cfg = model.config().clone();
        let window = random_frames::<f32>(3, &cfg, 11);
        let first = random_frames::<f32>(1, &cfg, 12).reshape(&[
            cfg.channels,
            cfg.frame_height,
            cfg.frame_width,
        ]).unwrap();
        let caption = model.encode_caption(&[2, 5, 9]).unwrap();
        let out = model.denoise(&window, 4, &caption, &first).unwrap();
        out.with_data(|d| d.to_vec())
    }

    #[test]
    fn zero_initialized_adapters_leave_outputs_unchanged() {
        let model = VideoDit::<f32>::new(tiny_config(), 7).unwrap();
        let before = denoise_once(&model);
        let _set = inject(&model, 2, 4.0, 99).unwrap();
        let after = denoise_once(&model);
        assert_eq!(before, after, "B = 0 must make the adapter a no-op");
    }

    #[test]
    fn scaling_is_alpha_over_rank() {
        let (_, set) = adapted_model();
        assert_eq!(set.adapters()[0].scaling(), 2.0);
    }

    #[test]
    fn trainable_count_matches_rank_times_dims() {
        let (model, set) = adapted_model();
        let d = model.config().d_model;
        let targets = target_names(model.config()).len();
        assert_eq!(set.trainable_count(), targets * 2 * (d * 2));
        assert_eq!(set.trainable_parameters().len(), 2 * targets);
    }

    #[test]
    fn base_parameters_stay_frozen_and_adapters_train() {
        let (model, set) = adapted_model();
        for (name, p) in model.named_parameters() {
            assert!(!p.requires_grad(), "base parameter {name} must be frozen");
        }
        for (name, p) in set.trainable_parameters() {
            assert!(p.requires_grad(), "adapter factor {name} must be trainable");
        }

        // Drive a backward pass: only adapter factors accumulate gradient.
        let cfg = model.config().clone();
        let window = random_frames::<f32>(2, &cfg, 21);
        let first = random_frames::<f32>(1, &cfg, 22)
            .reshape(&[cfg.channels, cfg.frame_height, cfg.frame_width])
            .unwrap();
        // Multi-token caption: with a single context row the decoder cross
        // softmax is constant and its q adapter legitimately gets no signal.
        let caption = model.encode_caption(&[3, 5, 8]).unwrap();
        let loss = model.denoise(&window, 1, &caption, &first).unwrap().mean_all();
        loss.backward().unwrap();
        for (name, p) in set.trainable_parameters() {
            let g = p.grad().unwrap_or_else(|| panic!("adapter {name} got no gradient"));
            // B factors of targeted projections sit upstream of the loss,
            // so at least those must receive nonzero signal.
            if name.ends_with("/b") {
                assert!(g.iter().any(|&v| v != 0.0), "gradient of {name} is all zeros");
            }
        }
        for (_, p) in model.named_parameters() {
            assert!(p.grad().is_none());
        }
    }

    #[test]
    fn merge_matches_adapter_forward() {
        let (model, set) = adapted_model();
        // Give B nonzero values so the adapters actually do something.
        let mut rng = StreamRng::new(5, "test/fill");
        for ad in set.adapters() {
            ad.b.with_data_mut(|d| {
                for v in d.iter_mut() {
                    *v = rng.normal() as f32 * 0.05;
                }
            });
        }
        let with_adapters = denoise_once(&model);
        set.merge(&model).unwrap();
        let merged = denoise_once(&model);
        let worst = with_adapters
            .iter()
            .zip(&merged)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-5, "merged forward deviates by {worst}");
        for (_, proj) in model.named_projections() {
            assert!(proj.adapter().is_none(), "merge must clear adapter slots");
        }
    }

    #[test]
    fn merge_in_f64_is_essentially_exact() {
        let config = tiny_config();
        let model = VideoDit::<f64>::new(config.clone(), 7).unwrap();
        let set = inject(&model, 2, 4.0, 99).unwrap();
        let mut rng = StreamRng::new(5, "test/fill");
        for ad in set.adapters() {
            ad.b.with_data_mut(|d| {
                for v in d.iter_mut() {
                    *v = rng.normal() * 0.05;
                }
            });
        }
        let window = random_frames::<f64>(2, &config, 31);
        let first = random_frames::<f64>(1, &config, 32)
            .reshape(&[config.channels, config.frame_height, config.frame_width])
            .unwrap();
        let caption = model.encode_caption(&[4, 6]).unwrap();
        let before = model
            .denoise(&window, 2, &caption, &first)
            .unwrap()
            .with_data(|d| d.to_vec());
        set.merge(&model).unwrap();
        let after = model
            .denoise(&window, 2, &caption, &first)
            .unwrap()
            .with_data(|d| d.to_vec());
        let worst = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "f64 merge deviates by {worst}");
    }

    #[test]
    fn adapter_gradients_survive_finite_difference_audit() {
        let config = tiny_config();
        let model = VideoDit::<f64>::new(config.clone(), 7).unwrap();
        let set = inject(&model, 1, 2.0, 99).unwrap();
        // Nonzero B so the A factors also sit on the gradient path.
        let mut rng = StreamRng::new(5, "test/fill");
        for ad in set.adapters() {
            ad.b.with_data_mut(|d| {
                for v in d.iter_mut() {
                    *v = rng.normal() * 0.05;
                }
            });
        }
        let window = random_frames::<f64>(2, &config, 41);
        let first = random_frames::<f64>(1, &config, 42)
            .reshape(&[config.channels, config.frame_height, config.frame_width])
            .unwrap();
        let caption = model.encode_caption(&[2, 7]).unwrap();

        // Audit one encoder and one decoder adapter, both factors each,
        // through the entire denoise graph.
        let ads = set.adapters();
        let inputs = [
            ads[0].a.clone(),
            ads[0].b.clone(),
            ads[3].a.clone(),
            ads[3].b.clone(),
        ];
        let report = crate::tensor::finite_difference_check(
            &inputs,
            |_| Ok(model.denoise(&window, 3, &caption, &first)?.mean_all()),
            1e-3,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 4 * config.d_model);
    }

    #[test]
    fn double_injection_is_rejected() {
        let (model, _set) = adapted_model();
        let err = inject(&model, 2, 4.0, 100).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn save_load_attach_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.bin");
        let (model, set) = adapted_model();
        let mut rng = StreamRng::new(5, "test/fill");
        for ad in set.adapters() {
            ad.b.with_data_mut(|d| {
                for v in d.iter_mut() {
                    *v = rng.normal() as f32 * 0.05;
                }
            });
        }
        let expected = denoise_once(&model);
        set.save(&path).unwrap();

        let fresh = VideoDit::<f32>::new(tiny_config(), 7).unwrap();
        let loaded = AdapterSet::<f32>::load(&path).unwrap();
        assert_eq!(loaded.rank(), 2);
        assert_eq!(loaded.alpha(), 4.0);
        loaded.attach(&fresh).unwrap();
        assert_eq!(denoise_once(&fresh), expected);
    }

    #[test]
    fn attach_rejects_mismatched_base_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.bin");
        let (_model, set) = adapted_model();
        set.save(&path).unwrap();

        let mut other_cfg = tiny_config();
        other_cfg.max_caption_len += 1;
        let other = VideoDit::<f32>::new(other_cfg, 7).unwrap();
        let loaded = AdapterSet::<f32>::load(&path).unwrap();
        let err = loaded.attach(&other).unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }));
    }

    #[test]
    fn merge_requires_attachment() {
        let (model, set) = adapted_model();
        detach_all(&model);
        let err = set.merge(&model).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn load_rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = VideoDit::<f32>::new(tiny_config(), 7).unwrap();
        model.save(&path).unwrap();
        assert!(AdapterSet::<f32>::load(&path).is_err());
    }
}
