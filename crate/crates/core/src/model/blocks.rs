//! Transformer building blocks: projections with optional LoRA adapters,
//! the three attention variants, MLPs, and the cached index maps that
//! implement patchification and head bookkeeping as gather ops.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::tensor::{IndexMap, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Static geometry derived from the model configuration.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub patch: usize,
    /// Patches per frame.
    pub patches: usize,
    /// Elements per patch token before projection (`c·patch²`).
    pub patch_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Per-head width (`d_model / heads`).
    pub dk: usize,
    pub max_frames: usize,
}

/// Keys for memoized index maps. Everything not in the key (patch size,
/// d_model, head width, ...) is fixed per model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum MapKey {
    Patchify { frames: usize },
    Unpatchify { frames: usize },
    Broadcast { cols: usize, copies: usize },
    PosSpatial { frames: usize },
    PosTemporal { frames: usize },
    /// One attention piece: rows of one frame, columns of one head.
    PieceSpatial { frames: usize, frame: usize, head: usize },
    /// One temporal piece: one patch position across frames, one head.
    PieceTemporal { frames: usize, pos: usize, head: usize },
    /// Full-row column slice for one head (cross-attention Q/K/V).
    HeadCols { rows: usize, head: usize },
    MergeSpatial { frames: usize },
    MergeTemporal { frames: usize },
    MergeCross { rows: usize },
}

/// Lazily built, per-model cache of gather maps.
pub(crate) struct MapCache {
    geo: Geometry,
    maps: RefCell<HashMap<MapKey, Rc<IndexMap>>>,
}

impl MapCache {
    pub fn new(geo: Geometry) -> Self {
        MapCache {
            geo,
            maps: RefCell::new(HashMap::new()),
        }
    }

    pub fn get(&self, key: MapKey) -> Result<Rc<IndexMap>> {
        if let Some(m) = self.maps.borrow().get(&key) {
            return Ok(Rc::clone(m));
        }
        let built = Rc::new(self.build(key)?);
        self.maps.borrow_mut().insert(key, Rc::clone(&built));
        Ok(built)
    }

    fn build(&self, key: MapKey) -> Result<IndexMap> {
        let g = &self.geo;
        let (pw, d, dk, p) = (g.frame_w / g.patch, g.d_model, g.dk, g.patches);
        match key {
            MapKey::Patchify { frames } => {
                // (frames, c, h, w) -> (frames·P, patch_dim), token-major,
                // channel-major inside the token.
                let mut map = vec![0u32; frames * p * g.patch_dim];
                for f in 0..frames {
                    for py in 0..g.frame_h / g.patch {
                        for px in 0..pw {
                            let token = f * p + py * pw + px;
                            for ch in 0..g.channels {
                                for dy in 0..g.patch {
                                    for dx in 0..g.patch {
                                        let col = (ch * g.patch + dy) * g.patch + dx;
                                        let src = ((f * g.channels + ch) * g.frame_h
                                            + py * g.patch
                                            + dy)
                                            * g.frame_w
                                            + px * g.patch
                                            + dx;
                                        map[token * g.patch_dim + col] = src as u32;
                                    }
                                }
                            }
                        }
                    }
                }
                IndexMap::new(
                    vec![frames * p, g.patch_dim],
                    frames * g.channels * g.frame_h * g.frame_w,
                    map,
                )
            }
            MapKey::Unpatchify { frames } => {
                // Exact inverse permutation of Patchify.
                let fwd = self.build(MapKey::Patchify { frames })?;
                let mut map = vec![0u32; fwd.map.len()];
                for (dst, &src) in fwd.map.iter().enumerate() {
                    map[src as usize] = dst as u32;
                }
                IndexMap::new(
                    vec![frames, g.channels, g.frame_h, g.frame_w],
                    frames * p * g.patch_dim,
                    map,
                )
            }
            MapKey::Broadcast { cols, copies } => IndexMap::broadcast_rows(cols, copies),
            MapKey::PosSpatial { frames } => {
                let ids: Vec<usize> = (0..frames).flat_map(|_| 0..p).collect();
                IndexMap::select_rows(&[p, d], &ids)
            }
            MapKey::PosTemporal { frames } => {
                let ids: Vec<usize> = (0..frames).flat_map(|f| std::iter::repeat(f).take(p)).collect();
                IndexMap::select_rows(&[g.max_frames, d], &ids)
            }
            MapKey::PieceSpatial { frames, frame, head } => {
                let rows: Vec<usize> = (frame * p..(frame + 1) * p).collect();
                IndexMap::rows_and_cols(frames * p, d, &rows, head * dk, dk)
            }
            MapKey::PieceTemporal { frames, pos, head } => {
                let rows: Vec<usize> = (0..frames).map(|f| f * p + pos).collect();
                IndexMap::rows_and_cols(frames * p, d, &rows, head * dk, dk)
            }
            MapKey::HeadCols { rows, head } => {
                let all: Vec<usize> = (0..rows).collect();
                IndexMap::rows_and_cols(rows, d, &all, head * dk, dk)
            }
            MapKey::MergeSpatial { frames } => {
                // Pieces concatenated in (frame, head) order, each (P, dk),
                // back to (frames·P, d_model).
                let n = frames * p;
                let mut map = vec![0u32; n * d];
                for f in 0..frames {
                    for pp in 0..p {
                        for h in 0..g.heads {
                            for j in 0..dk {
                                let src = ((f * g.heads + h) * p + pp) * dk + j;
                                map[(f * p + pp) * d + h * dk + j] = src as u32;
                            }
                        }
                    }
                }
                IndexMap::new(vec![n, d], n * d, map)
            }
            MapKey::MergeTemporal { frames } => {
                // Pieces in (pos, head) order, each (frames, dk).
                let n = frames * p;
                let mut map = vec![0u32; n * d];
                for pp in 0..p {
                    for h in 0..g.heads {
                        for f in 0..frames {
                            for j in 0..dk {
                                let src = ((pp * g.heads + h) * frames + f) * dk + j;
                                map[(f * p + pp) * d + h * dk + j] = src as u32;
                            }
                        }
                    }
                }
                IndexMap::new(vec![n, d], n * d, map)
            }
            MapKey::MergeCross { rows } => {
                // Pieces in head order, each (rows, dk).
                let mut map = vec![0u32; rows * d];
                for h in 0..g.heads {
                    for r in 0..rows {
                        for j in 0..dk {
                            map[r * d + h * dk + j] = ((h * rows + r) * dk + j) as u32;
                        }
                    }
                }
                IndexMap::new(vec![rows, d], rows * d, map)
            }
        }
    }
}

/// A bias-free linear projection that may carry a LoRA adapter. The base
/// weight is frozen; the adapter (when present) adds
/// `scaling·(x @ B) @ Aᵀ` to the output.
pub struct Projection<E: Scalar> {
    pub(crate) name: String,
    pub(crate) w: Tensor<E>,
    pub(crate) adapter: RefCell<Option<LoraAdapter<E>>>,
}

impl<E: Scalar> Projection<E> {
    pub(crate) fn new(name: String, w: Tensor<E>) -> Self {
        Projection {
            name,
            w,
            adapter: RefCell::new(None),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor<E> {
        &self.w
    }

    pub fn adapter(&self) -> Option<LoraAdapter<E>> {
        self.adapter.borrow().clone()
    }

    pub(crate) fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let base = x.matmul_nt(&self.w)?;
        match &*self.adapter.borrow() {
            None => Ok(base),
            Some(ad) => {
                let xb = x.matmul(&ad.b)?; // (n, r)
                let delta = xb.matmul_nt(&ad.a)?; // (n, d_out)
                base.add(&delta.scale(E::from_f64_lossy(ad.scaling())))
            }
        }
    }
}

/// Learned scale and shift for a layer norm.
pub(crate) struct LayerNormParams<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Scalar> LayerNormParams<E> {
    fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// `x @ W1ᵀ + b1 → GELU → @ W2ᵀ + b2` with hidden width `4·d_model`.
pub(crate) struct Mlp<E: Scalar> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

pub(crate) fn linear<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    cache: &MapCache,
) -> Result<Tensor<E>> {
    let y = x.matmul_nt(w)?;
    let rows = y.shape()[0];
    let cols = y.shape()[1];
    let bias = b.gather(&cache.get(MapKey::Broadcast { cols, copies: rows })?)?;
    y.add(&bias)
}

impl<E: Scalar> Mlp<E> {
    fn apply(&self, x: &Tensor<E>, cache: &MapCache) -> Result<Tensor<E>> {
        let h = linear(x, &self.w1, &self.b1, cache)?.gelu();
        linear(&h, &self.w2, &self.b2, cache)
    }
}

/// Multi-head attention parameters shared by the three attention patterns.
pub(crate) struct Attention<E: Scalar> {
    pub q: Projection<E>,
    pub k: Projection<E>,
    pub v: Projection<E>,
    pub o: Projection<E>,
}

impl<E: Scalar> Attention<E> {
    /// Scaled dot-product over already head-sliced pieces.
    fn attend(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, dk: usize) -> Result<Tensor<E>> {
        let scale = E::from_f64_lossy(1.0 / (dk as f64).sqrt());
        let scores = q.matmul_nt(k)?.scale(scale);
        scores.softmax_rows().matmul(v)
    }

    /// Self-attention within each frame: tokens attend only to tokens of
    /// the same frame.
    pub fn spatial(
        &self,
        x: &Tensor<E>,
        frames: usize,
        geo: &Geometry,
        cache: &MapCache,
    ) -> Result<Tensor<E>> {
        let q = self.q.apply(x)?;
        let k = self.k.apply(x)?;
        let v = self.v.apply(x)?;
        let mut pieces = Vec::with_capacity(frames * geo.heads);
        for frame in 0..frames {
            for head in 0..geo.heads {
                let map = cache.get(MapKey::PieceSpatial { frames, frame, head })?;
                let piece = Self::attend(&q.gather(&map)?, &k.gather(&map)?, &v.gather(&map)?, geo.dk)?;
                pieces.push(piece);
            }
        }
        let merged = Tensor::concat_rows(&pieces)?.gather(&cache.get(MapKey::MergeSpatial { frames })?)?;
        self.o.apply(&merged)
    }

    /// Self-attention across frames: each patch position attends to the
    /// same position in every other frame.
    pub fn temporal(
        &self,
        x: &Tensor<E>,
        frames: usize,
        geo: &Geometry,
        cache: &MapCache,
    ) -> Result<Tensor<E>> {
        let q = self.q.apply(x)?;
        let k = self.k.apply(x)?;
        let v = self.v.apply(x)?;
        let mut pieces = Vec::with_capacity(geo.patches * geo.heads);
        for pos in 0..geo.patches {
            for head in 0..geo.heads {
                let map = cache.get(MapKey::PieceTemporal { frames, pos, head })?;
                let piece = Self::attend(&q.gather(&map)?, &k.gather(&map)?, &v.gather(&map)?, geo.dk)?;
                pieces.push(piece);
            }
        }
        let merged = Tensor::concat_rows(&pieces)?.gather(&cache.get(MapKey::MergeTemporal { frames })?)?;
        self.o.apply(&merged)
    }

    /// Cross-attention: every query row attends to the shared context.
    pub fn cross(
        &self,
        x: &Tensor<E>,
        ctx: &Tensor<E>,
        geo: &Geometry,
        cache: &MapCache,
    ) -> Result<Tensor<E>> {
        let n = x.shape()[0];
        let m = ctx.shape()[0];
        let q = self.q.apply(x)?;
        let k = self.k.apply(ctx)?;
        let v = self.v.apply(ctx)?;
        let mut pieces = Vec::with_capacity(geo.heads);
        for head in 0..geo.heads {
            let qh = q.gather(&cache.get(MapKey::HeadCols { rows: n, head })?)?;
            let kv_map = cache.get(MapKey::HeadCols { rows: m, head })?;
            let piece = Self::attend(&qh, &k.gather(&kv_map)?, &v.gather(&kv_map)?, geo.dk)?;
            pieces.push(piece);
        }
        let merged = Tensor::concat_rows(&pieces)?.gather(&cache.get(MapKey::MergeCross { rows: n })?)?;
        self.o.apply(&merged)
    }
}

/// Pre-LN encoder block: per-frame self-attention, caption+first-frame
/// cross-attention, MLP — each with a residual connection.
pub(crate) struct EncoderBlock<E: Scalar> {
    pub ln1: LayerNormParams<E>,
    pub self_attn: Attention<E>,
    pub ln2: LayerNormParams<E>,
    pub cross_attn: Attention<E>,
    pub ln3: LayerNormParams<E>,
    pub mlp: Mlp<E>,
}

impl<E: Scalar> EncoderBlock<E> {
    pub fn forward(
        &self,
        x: &Tensor<E>,
        ctx: &Tensor<E>,
        frames: usize,
        geo: &Geometry,
        cache: &MapCache,
    ) -> Result<Tensor<E>> {
        let x = x.add(&self.self_attn.spatial(&self.ln1.apply(x)?, frames, geo, cache)?)?;
        let x = x.add(&self.cross_attn.cross(&self.ln2.apply(&x)?, ctx, geo, cache)?)?;
        let mlp_out = self.mlp.apply(&self.ln3.apply(&x)?, cache)?;
        x.add(&mlp_out)
    }
}

/// Pre-LN decoder block: cross-frame temporal self-attention, caption
/// cross-attention, MLP — each with a residual connection.
pub(crate) struct DecoderBlock<E: Scalar> {
    pub ln1: LayerNormParams<E>,
    pub temporal_attn: Attention<E>,
    pub ln2: LayerNormParams<E>,
    pub cross_attn: Attention<E>,
    pub ln3: LayerNormParams<E>,
    pub mlp: Mlp<E>,
}

impl<E: Scalar> DecoderBlock<E> {
    pub fn forward(
        &self,
        x: &Tensor<E>,
        caption: &Tensor<E>,
        frames: usize,
        geo: &Geometry,
        cache: &MapCache,
        temporal_identity: bool,
    ) -> Result<Tensor<E>> {
        let x = if temporal_identity {
            x.clone()
        } else {
            x.add(&self.temporal_attn.temporal(&self.ln1.apply(x)?, frames, geo, cache)?)?
        };
        let x = x.add(&self.cross_attn.cross(&self.ln2.apply(&x)?, caption, geo, cache)?)?;
        let mlp_out = self.mlp.apply(&self.ln3.apply(&x)?, cache)?;
        x.add(&mlp_out)
    }
}
