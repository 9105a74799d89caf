//! A small Vision Transformer encoder with a class token.
//!
//! Blocks are pre-norm (`x + MHSA(LN(x))`, then `x + MLP(LN(x))`) with a GELU
//! MLP. The forward pass records every block's output tokens and attention
//! so losses can attach to any block; [`Vit::backward`] accepts gradients for
//! any subset of those outputs and propagates them down to the weights and
//! the input image.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{self, LayerNormCache};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// 1-based index of the block feeding the auxiliary classifier.
    pub aux_block: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 6,
            dim: 96,
            heads: 4,
            mlp_ratio: 4.0,
            aux_block: 5,
            channels: 3,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.aux_block == 0 || self.aux_block > self.depth {
            return Err(Error::config(format!(
                "aux_block {} must lie in 1..={}",
                self.aux_block, self.depth
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.channels == 0 || !(self.mlp_ratio > 0.0) {
            return Err(Error::config("channels and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// 0-based position of the auxiliary block in a [`ForwardTrace`].
    pub fn aux_index(&self) -> usize {
        self.aux_block - 1
    }
}

/// Patch tokens laid out on their 2-D grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Array2<T>,
    pub grid: (usize, usize),
}

impl<T: Float> TokenGrid<T> {
    pub fn new(tokens: Array2<T>, grid: (usize, usize)) -> Result<Self> {
        if tokens.nrows() != grid.0 * grid.1 {
            return Err(Error::shape(format!(
                "{} tokens do not fill a {}x{} grid",
                tokens.nrows(),
                grid.0,
                grid.1
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: "token grid".into(),
                detail: "token matrix contains NaN or Inf".into(),
            });
        }
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    attn_out: Array2<T>,
    ln2: LayerNormCache<T>,
    h2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

#[derive(Clone, Debug)]
struct TraceCache<T> {
    patches: Array2<T>,
    pos_resample: Option<Array2<T>>,
    image_shape: (usize, usize, usize),
    blocks: Vec<BlockCache<T>>,
}

/// Per-block record of a forward pass. Row 0 of every token matrix is the
/// class token; rows `1..` are the patch tokens in grid order.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub grid: (usize, usize),
    pub tokens: Vec<Array2<T>>,
    /// `heads × (n+1) × (n+1)` row-stochastic attention per block.
    pub attentions: Vec<Array3<T>>,
    cache: TraceCache<T>,
}

impl<T: Float> ForwardTrace<T> {
    pub fn depth(&self) -> usize {
        self.tokens.len()
    }

    pub fn patch_tokens(&self, block: usize) -> TokenGrid<T> {
        TokenGrid {
            tokens: self.tokens[block].slice(s![1.., ..]).to_owned(),
            grid: self.grid,
        }
    }

    pub fn class_token(&self, block: usize) -> ArrayView1<'_, T> {
        self.tokens[block].row(0)
    }

    pub fn final_patch_tokens(&self) -> TokenGrid<T> {
        self.patch_tokens(self.depth() - 1)
    }

    pub fn final_class_token(&self) -> ArrayView1<'_, T> {
        self.class_token(self.depth() - 1)
    }
}

/// Rearranges a `C×H×W` image into one row per patch (row-major over the
/// patch grid), each row flattened channel-major as `(c, dy, dx)`.
pub fn extract_patches<T: Float>(image: ArrayView3<'_, T>, patch: usize) -> Result<Array2<T>> {
    let (c, h, w) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = image[[ch, gy * patch + dy, gx * patch + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn fold_patches<T: Float>(
    rows: ArrayView2<'_, T>,
    patch: usize,
    shape: (usize, usize, usize),
) -> Array3<T> {
    let (c, h, w) = shape;
    let gw = w / patch;
    let mut image = Array3::zeros((c, h, w));
    for (idx, row) in rows.rows().into_iter().enumerate() {
        let (gy, gx) = (idx / gw, idx % gw);
        let mut k = 0;
        for ch in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    image[[ch, gy * patch + dy, gx * patch + dx]] = row[k];
                    k += 1;
                }
            }
        }
    }
    image
}

/// Bilinear resize of a patch-position table laid out on `source` to
/// `target`, applied per feature channel. With `has_class_row`, row 0 is the
/// class-token entry and passes through unchanged.
pub fn interpolate_pos_embed<T: Float>(
    pos: ArrayView2<'_, T>,
    source: (usize, usize),
    target: (usize, usize),
    has_class_row: bool,
) -> Result<Array2<T>> {
    let offset = usize::from(has_class_row);
    if pos.nrows() != source.0 * source.1 + offset {
        return Err(Error::shape(format!(
            "position table has {} rows, expected {} for a {}x{} grid",
            pos.nrows(),
            source.0 * source.1 + offset,
            source.0,
            source.1
        )));
    }
    let grid_rows = pos.slice(s![offset.., ..]);
    let resized = if source == target {
        grid_rows.to_owned()
    } else {
        nn::bilinear_grid_matrix::<T>(target, source).dot(&grid_rows)
    };
    if has_class_row {
        let mut out = Array2::zeros((resized.nrows() + 1, pos.ncols()));
        out.row_mut(0).assign(&pos.row(0));
        out.slice_mut(s![1.., ..]).assign(&resized);
        Ok(out)
    } else {
        Ok(resized)
    }
}

/// Mean over heads of the class-token query's attention to each patch key,
/// on the patch grid.
pub fn class_attention_map<T: Float>(trace: &ForwardTrace<T>, block: usize) -> Array2<T> {
    let attn = &trace.attentions[block];
    let heads = T::of(attn.len_of(Axis(0)) as f64);
    let row = attn.slice(s![.., 0, 1..]).sum_axis(Axis(0)).mapv(|v| v / heads);
    row.into_shape_with_order(trace.grid).expect("grid matches token count")
}

/// Weights live in a [`ParamStore`]; this struct only records where.
#[derive(Clone, Debug)]
pub struct Vit {
    cfg: VitConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockIds>,
}

impl Vit {
    pub fn new<T: Float, R: Rng>(
        cfg: VitConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let g = cfg.grid_side();
        let hidden = cfg.mlp_hidden();
        let std = 0.02;
        let patch_w = store.trunc_normal("vit.patch_embed.weight", &[cfg.patch_dim(), d], std, rng);
        let patch_b = store.zeros("vit.patch_embed.bias", &[d]);
        let cls_token = store.trunc_normal("vit.cls_token", &[d], std, rng);
        let pos_embed = store.trunc_normal("vit.pos_embed", &[g * g + 1, d], std, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("vit.blocks.{i}");
            let ln1_g = store.push(format!("{p}.norm1.weight"), ndarray::ArrayD::ones(vec![d]));
            let ln1_b = store.zeros(format!("{p}.norm1.bias"), &[d]);
            let qkv_w = store.trunc_normal(format!("{p}.attn.qkv.weight"), &[d, 3 * d], std, rng);
            let qkv_b = store.zeros(format!("{p}.attn.qkv.bias"), &[3 * d]);
            let proj_w = store.trunc_normal(format!("{p}.attn.proj.weight"), &[d, d], std, rng);
            let proj_b = store.zeros(format!("{p}.attn.proj.bias"), &[d]);
            let ln2_g = store.push(format!("{p}.norm2.weight"), ndarray::ArrayD::ones(vec![d]));
            let ln2_b = store.zeros(format!("{p}.norm2.bias"), &[d]);
            let fc1_w = store.trunc_normal(format!("{p}.mlp.fc1.weight"), &[d, hidden], std, rng);
            let fc1_b = store.zeros(format!("{p}.mlp.fc1.bias"), &[hidden]);
            let fc2_w = store.trunc_normal(format!("{p}.mlp.fc2.weight"), &[hidden, d], std, rng);
            let fc2_b = store.zeros(format!("{p}.mlp.fc2.bias"), &[d]);
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        Ok(Self {
            cfg,
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
        })
    }

    /// Re-attaches to weights already present in `store` (e.g. loaded from a
    /// checkpoint), checking every expected tensor and its shape.
    pub fn bind<T: Float>(cfg: VitConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let g = cfg.grid_side();
        let hidden = cfg.mlp_hidden();
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id_of(&name)
                .ok_or_else(|| Error::shape(format!("missing tensor {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    shape
                )));
            }
            Ok(id)
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("vit.blocks.{i}");
            blocks.push(BlockIds {
                ln1_g: find(format!("{p}.norm1.weight"), &[d])?,
                ln1_b: find(format!("{p}.norm1.bias"), &[d])?,
                qkv_w: find(format!("{p}.attn.qkv.weight"), &[d, 3 * d])?,
                qkv_b: find(format!("{p}.attn.qkv.bias"), &[3 * d])?,
                proj_w: find(format!("{p}.attn.proj.weight"), &[d, d])?,
                proj_b: find(format!("{p}.attn.proj.bias"), &[d])?,
                ln2_g: find(format!("{p}.norm2.weight"), &[d])?,
                ln2_b: find(format!("{p}.norm2.bias"), &[d])?,
                fc1_w: find(format!("{p}.mlp.fc1.weight"), &[d, hidden])?,
                fc1_b: find(format!("{p}.mlp.fc1.bias"), &[hidden])?,
                fc2_w: find(format!("{p}.mlp.fc2.weight"), &[hidden, d])?,
                fc2_b: find(format!("{p}.mlp.fc2.bias"), &[d])?,
            });
        }
        Ok(Self {
            patch_w: find("vit.patch_embed.weight".into(), &[cfg.patch_dim(), d])?,
            patch_b: find("vit.patch_embed.bias".into(), &[d])?,
            cls_token: find("vit.cls_token".into(), &[d])?,
            pos_embed: find("vit.pos_embed".into(), &[g * g + 1, d])?,
            blocks,
            cfg,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Linear embedding of each patch (no position or class token).
    pub fn patchify<T: Float>(
        &self,
        store: &ParamStore<T>,
        image: ArrayView3<'_, T>,
    ) -> Result<TokenGrid<T>> {
        let (c, h, w) = image.dim();
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "image has {c} channels, model expects {}",
                self.cfg.channels
            )));
        }
        let p = self.cfg.patch_size;
        let patches = extract_patches(image, p)?;
        let tokens = nn::linear(
            patches.view(),
            store.mat(self.patch_w),
            Some(store.vec(self.patch_b)),
        );
        TokenGrid::new(tokens, (h / p, w / p))
    }

    pub fn forward<T: Float>(
        &self,
        store: &ParamStore<T>,
        image: ArrayView3<'_, T>,
    ) -> Result<ForwardTrace<T>> {
        let (c, h, w) = image.dim();
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "image has {c} channels, model expects {}",
                self.cfg.channels
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: "input image".into(),
                detail: "image contains NaN or Inf".into(),
            });
        }
        let p = self.cfg.patch_size;
        let patches = extract_patches(image, p)?;
        let grid = (h / p, w / p);
        let n = grid.0 * grid.1;
        let d = self.cfg.dim;
        let g = self.cfg.grid_side();

        let pos = store.mat(self.pos_embed);
        let pos_patch = pos.slice(s![1.., ..]);
        let pos_resample = (grid != (g, g)).then(|| nn::bilinear_grid_matrix::<T>(grid, (g, g)));
        let mut x = Array2::zeros((n + 1, d));
        {
            let mut body = x.slice_mut(s![1.., ..]);
            body.assign(&nn::linear(
                patches.view(),
                store.mat(self.patch_w),
                Some(store.vec(self.patch_b)),
            ));
            match &pos_resample {
                Some(r) => body += &r.dot(&pos_patch),
                None => body += &pos_patch,
            }
        }
        x.row_mut(0).assign(&(&store.vec(self.cls_token) + &pos.row(0)));

        let mut tokens = Vec::with_capacity(self.blocks.len());
        let mut attentions = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, ids) in self.blocks.iter().enumerate() {
            let (out, attn, cache) = self.block_forward(store, ids, x.view());
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("block {}", i + 1),
                    detail: format!(
                        "output max |x| = {:e}, attention finite = {}",
                        out.iter()
                            .filter(|v| v.is_finite())
                            .fold(0.0, |a: f64, v| a.max(v.as_f64().abs())),
                        attn.iter().all(|v| v.is_finite())
                    ),
                });
            }
            tokens.push(out.clone());
            attentions.push(attn);
            caches.push(cache);
            x = out;
        }
        Ok(ForwardTrace {
            grid,
            tokens,
            attentions,
            cache: TraceCache {
                patches,
                pos_resample,
                image_shape: (c, h, w),
                blocks: caches,
            },
        })
    }

    fn block_forward<T: Float>(
        &self,
        store: &ParamStore<T>,
        ids: &BlockIds,
        x: ArrayView2<'_, T>,
    ) -> (Array2<T>, Array3<T>, BlockCache<T>) {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let ntok = x.nrows();

        let (h1, ln1) = nn::layer_norm(x, store.vec(ids.ln1_g), store.vec(ids.ln1_b));
        let qkv = nn::linear(h1.view(), store.mat(ids.qkv_w), Some(store.vec(ids.qkv_b)));
        let mut attn = Array3::zeros((heads, ntok, ntok));
        let mut attn_out = Array2::zeros((ntok, d));
        for hd in 0..heads {
            let q = qkv.slice(s![.., hd * dh..(hd + 1) * dh]);
            let k = qkv.slice(s![.., d + hd * dh..d + (hd + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
            let mut a = attn.index_axis_mut(Axis(0), hd);
            ndarray::linalg::general_mat_mul(scale, &q, &k.t(), T::zero(), &mut a);
            nn::softmax_rows_inplace(a.view_mut());
            let mut o = attn_out.slice_mut(s![.., hd * dh..(hd + 1) * dh]);
            ndarray::linalg::general_mat_mul(T::one(), &a, &v, T::zero(), &mut o);
        }
        let x1 = &x + &nn::linear(attn_out.view(), store.mat(ids.proj_w), Some(store.vec(ids.proj_b)));
        let (h2, ln2) = nn::layer_norm(x1.view(), store.vec(ids.ln2_g), store.vec(ids.ln2_b));
        let pre_act = nn::linear(h2.view(), store.mat(ids.fc1_w), Some(store.vec(ids.fc1_b)));
        let act = pre_act.mapv(nn::gelu);
        let out = &x1 + &nn::linear(act.view(), store.mat(ids.fc2_w), Some(store.vec(ids.fc2_b)));
        let cache = BlockCache {
            ln1,
            h1,
            qkv,
            attn_out,
            ln2,
            h2,
            pre_act,
            act,
        };
        (out, attn, cache)
    }

    fn block_backward<T: Float>(
        &self,
        store: &ParamStore<T>,
        ids: &BlockIds,
        attn: &Array3<T>,
        cache: &BlockCache<T>,
        dout: Array2<T>,
        grads: &mut ParamStore<T>,
    ) -> Array2<T> {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        // MLP branch
        let dact = nn::linear_backward(
            cache.act.view(),
            store.mat(ids.fc2_w),
            dout.view(),
            grads.mat_mut(ids.fc2_w),
            None,
        );
        grads.vec_mut(ids.fc2_b).scaled_add(T::one(), &dout.sum_axis(Axis(0)));
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre_act)
            .for_each(|g, &u| *g *= nn::gelu_grad(u));
        let dh2 = nn::linear_backward(
            cache.h2.view(),
            store.mat(ids.fc1_w),
            dpre.view(),
            grads.mat_mut(ids.fc1_w),
            None,
        );
        grads.vec_mut(ids.fc1_b).scaled_add(T::one(), &dpre.sum_axis(Axis(0)));
        let (dg, db) = two_vec_mut(grads, ids.ln2_g, ids.ln2_b);
        let mut dx1 = nn::layer_norm_backward(&cache.ln2, store.vec(ids.ln2_g), dh2.view(), dg, db);
        dx1 += &dout;

        // attention branch
        let dattn_out = nn::linear_backward(
            cache.attn_out.view(),
            store.mat(ids.proj_w),
            dx1.view(),
            grads.mat_mut(ids.proj_w),
            None,
        );
        grads.vec_mut(ids.proj_b).scaled_add(T::one(), &dx1.sum_axis(Axis(0)));
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for hd in 0..heads {
            let (qs, ks, vs) = (hd * dh, d + hd * dh, 2 * d + hd * dh);
            let q = cache.qkv.slice(s![.., qs..qs + dh]);
            let k = cache.qkv.slice(s![.., ks..ks + dh]);
            let v = cache.qkv.slice(s![.., vs..vs + dh]);
            let a = attn.index_axis(Axis(0), hd);
            let do_h = dattn_out.slice(s![.., hd * dh..(hd + 1) * dh]);
            let da = do_h.dot(&v.t());
            dqkv.slice_mut(s![.., vs..vs + dh]).assign(&a.t().dot(&do_h));
            let mut ds = nn::softmax_rows_backward(a, da.view());
            ds.mapv_inplace(|x| x * scale);
            dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
        }
        let dh1 = nn::linear_backward(
            cache.h1.view(),
            store.mat(ids.qkv_w),
            dqkv.view(),
            grads.mat_mut(ids.qkv_w),
            None,
        );
        grads.vec_mut(ids.qkv_b).scaled_add(T::one(), &dqkv.sum_axis(Axis(0)));
        let (dg, db) = two_vec_mut(grads, ids.ln1_g, ids.ln1_b);
        let mut dx = nn::layer_norm_backward(&cache.ln1, store.vec(ids.ln1_g), dh1.view(), dg, db);
        dx += &dx1;
        dx
    }

    /// Backpropagates gradients attached to block outputs.
    ///
    /// `token_grads[k]`, when present, is dL/d(tokens of block k) with the
    /// same `(n+1) × d` layout as [`ForwardTrace::tokens`]. Parameter
    /// gradients are accumulated into `grads`; the image gradient is returned.
    pub fn backward<T: Float>(
        &self,
        store: &ParamStore<T>,
        trace: &ForwardTrace<T>,
        token_grads: &[Option<Array2<T>>],
        grads: &mut ParamStore<T>,
    ) -> Result<Array3<T>> {
        if token_grads.len() != trace.depth() {
            return Err(Error::shape(format!(
                "{} block gradients for a depth-{} trace",
                token_grads.len(),
                trace.depth()
            )));
        }
        let shape = trace.tokens[0].raw_dim();
        let mut g: Array2<T> = Array2::zeros(shape);
        for k in (0..trace.depth()).rev() {
            if let Some(ext) = &token_grads[k] {
                if ext.raw_dim() != shape {
                    return Err(Error::shape(format!(
                        "gradient for block {} has shape {:?}, expected {:?}",
                        k + 1,
                        ext.shape(),
                        shape
                    )));
                }
                g += ext;
            }
            g = self.block_backward(
                store,
                &self.blocks[k],
                &trace.attentions[k],
                &trace.cache.blocks[k],
                g,
                grads,
            );
        }

        let dcls = g.row(0).to_owned();
        grads.vec_mut(self.cls_token).scaled_add(T::one(), &dcls);
        let dbody = g.slice(s![1.., ..]);
        {
            let mut dpos = grads.mat_mut(self.pos_embed);
            let mut row0 = dpos.row_mut(0);
            row0 += &dcls;
            let mut rest = dpos.slice_mut(s![1.., ..]);
            match &trace.cache.pos_resample {
                Some(r) => rest += &r.t().dot(&dbody),
                None => rest += &dbody,
            }
        }
        let dpatches = nn::linear_backward(
            trace.cache.patches.view(),
            store.mat(self.patch_w),
            dbody,
            grads.mat_mut(self.patch_w),
            None,
        );
        grads.vec_mut(self.patch_b).scaled_add(T::one(), &dbody.sum_axis(Axis(0)));
        Ok(fold_patches(
            dpatches.view(),
            self.cfg.patch_size,
            trace.cache.image_shape,
        ))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w,
                b.fc1_b, b.fc2_w, b.fc2_b,
            ]);
        }
        ids
    }
}

fn two_vec_mut<T: Float>(
    store: &mut ParamStore<T>,
    a: ParamId,
    b: ParamId,
) -> (ndarray::ArrayViewMut1<'_, T>, ndarray::ArrayViewMut1<'_, T>) {
    assert_ne!(a, b);
    let values = store.values_mut();
    let (lo, hi, swap) = if a.index() < b.index() {
        (a.index(), b.index(), false)
    } else {
        (b.index(), a.index(), true)
    };
    let (left, right) = values.split_at_mut(hi);
    let x = left[lo]
        .view_mut()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("vector parameter");
    let y = right[0]
        .view_mut()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("vector parameter");
    if swap {
        (y, x)
    } else {
        (x, y)
    }
}

/// Mean over unordered pairs `i < j` of `cos(t_i, t_j)` for one token set.
pub fn mean_pairwise_cosine<T: Float>(tokens: ArrayView2<'_, T>) -> f64 {
    let n = tokens.nrows();
    if n < 2 {
        return 1.0;
    }
    let eps = T::of(1e-8);
    let norms: Array1<T> = tokens
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(eps))
        .collect();
    let unit = &tokens / &norms.insert_axis(Axis(1));
    let gram = unit.dot(&unit.t());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += gram[[i, j]].as_f64();
        }
    }
    total / (n * (n - 1) / 2) as f64
}
