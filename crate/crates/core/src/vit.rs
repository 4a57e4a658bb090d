//! Per-camera ViT encoder: patches → CLS-prefixed embedding → pre-LN blocks.
//!
//! Patch layout is fixed for checkpoint portability: patches are taken in
//! row-major order over the patch grid (top-left first), and each patch row
//! is flattened as `(py, px, c)` with the channel index fastest.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};
use crate::session::Session;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.patch_size == 0 || self.channels == 0 || self.embed_dim == 0 || self.heads == 0 {
            issues.push("patch_size, channels, embed_dim and heads must be positive".to_string());
        } else {
            if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
                issues.push(format!(
                    "image {}x{} not divisible by patch {}",
                    self.image_width, self.image_height, self.patch_size
                ));
            }
            if self.image_height == 0 || self.image_width == 0 {
                issues.push("image extents must be positive".to_string());
            }
            if self.embed_dim % self.heads != 0 {
                issues.push(format!(
                    "embed_dim {} not divisible by heads {}",
                    self.embed_dim, self.heads
                ));
            }
        }
        if self.ffn_ratio == 0 {
            issues.push("ffn_ratio must be positive".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Patch tokens per image.
    pub fn patch_count(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Patch tokens plus CLS.
    pub fn seq_len(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Pre-LN transformer block parameters. `qkv` is one fused `[D, 3D]` map.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let mut weight = |name: &str, shape: &[usize], rng: &mut R| {
            store.push(format!("{prefix}.{name}"), trunc_normal(shape, INIT_STD, rng), group, true)
        };
        let qkv_w = weight("attn.qkv.weight", &[dim, 3 * dim], rng);
        let proj_w = weight("attn.proj.weight", &[dim, dim], rng);
        let fc1_w = weight("mlp.fc1.weight", &[dim, hidden], rng);
        let fc2_w = weight("mlp.fc2.weight", &[hidden, dim], rng);
        let mut fixed = |name: &str, len: usize, v: f64| {
            store.push(
                format!("{prefix}.{name}"),
                Tensor::full(&[len], T::from_f64_lossy(v)),
                group,
                false,
            )
        };
        Self {
            ln1_gamma: fixed("norm1.weight", dim, 1.0),
            ln1_beta: fixed("norm1.bias", dim, 0.0),
            qkv_w,
            qkv_b: fixed("attn.qkv.bias", 3 * dim, 0.0),
            proj_w,
            proj_b: fixed("attn.proj.bias", dim, 0.0),
            ln2_gamma: fixed("norm2.weight", dim, 1.0),
            ln2_beta: fixed("norm2.bias", dim, 0.0),
            fc1_w,
            fc1_b: fixed("mlp.fc1.bias", hidden, 0.0),
            fc2_w,
            fc2_b: fixed("mlp.fc2.bias", dim, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// `E: [P²C, D]`
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    /// `E_pos: [N+1, D]`
    pub pos: ParamId,
    /// `x_cls: [D]`
    pub cls: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        let patch_w = store.push(
            format!("{prefix}.patch_embed.weight"),
            trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng),
            ParamGroup::Backbone,
            true,
        );
        let patch_b = store.push(
            format!("{prefix}.patch_embed.bias"),
            Tensor::zeros(&[d]),
            ParamGroup::Backbone,
            false,
        );
        let pos = store.push(
            format!("{prefix}.pos_embed"),
            trunc_normal(&[cfg.seq_len(), d], INIT_STD, rng),
            ParamGroup::Task,
            false,
        );
        let cls = store.push(
            format!("{prefix}.cls_token"),
            trunc_normal(&[d], INIT_STD, rng),
            ParamGroup::Task,
            false,
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                BlockParams::register(
                    store,
                    &format!("{prefix}.blocks.{i}"),
                    d,
                    cfg.ffn_ratio * d,
                    ParamGroup::Backbone,
                    rng,
                )
            })
            .collect();
        Self {
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
        }
    }
}

/// Split a `[C,H,W]` image into `[N, P²C]` patch rows.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected [C,H,W], got {:?}", image.shape()),
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}x{w} not divisible by patch {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                for px in 0..patch {
                    let x = gx * patch + px;
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out)
}

/// `z₀ = [x_cls; patches·E + b] + E_pos`, followed by embedding dropout.
pub fn embed<T: Scalar>(s: &mut Session<T>, patches: Var, p: &EncoderParams) -> Result<Var> {
    let d = s.tape.shape(s.param(p.patch_w))[1];
    let proj = s.affine(patches, p.patch_w, p.patch_b)?;
    let cls = s.tape.reshape(s.param(p.cls), &[1, d])?;
    let z = s.tape.concat_rows(&[cls, proj])?;
    let z = s.tape.add(z, s.param(p.pos))?;
    s.dropout(z)
}

/// Multi-head scaled dot-product self-attention on already-normalized input,
/// returning the concatenated heads before the output projection.
pub fn multi_head_attention<T: Scalar>(
    s: &mut Session<T>,
    x: Var,
    bp: &BlockParams,
    heads: usize,
) -> Result<Var> {
    let (_, d) = s.tape.value(x).dims2("attention")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("width {d} over {heads} heads")));
    }
    let dh = d / heads;
    let qkv = s.affine(x, bp.qkv_w, bp.qkv_b)?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = s.tape.slice_cols(qkv, h * dh, dh)?;
        let k = s.tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = s.tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let scores = s.tape.matmul_nt(q, k)?;
        let scores = s.tape.scale(scores, scale);
        let attn = s.tape.softmax_rows(scores)?;
        outs.push(s.tape.matmul(attn, v)?);
    }
    s.tape.concat_cols(&outs)
}

/// `z' = MHA(LN(z)) + z`, then `FFN(LN(z')) + z'`.
pub fn transformer_block<T: Scalar>(
    s: &mut Session<T>,
    z: Var,
    bp: &BlockParams,
    heads: usize,
) -> Result<Var> {
    let h = s.layer_norm(z, bp.ln1_gamma, bp.ln1_beta)?;
    let attn = multi_head_attention(s, h, bp, heads)?;
    let attn = s.affine(attn, bp.proj_w, bp.proj_b)?;
    let attn = s.dropout(attn)?;
    let z1 = s.tape.add(z, attn)?;

    let h = s.layer_norm(z1, bp.ln2_gamma, bp.ln2_beta)?;
    let f = s.affine(h, bp.fc1_w, bp.fc1_b)?;
    let f = s.gelu(f);
    let f = s.affine(f, bp.fc2_w, bp.fc2_b)?;
    let f = s.dropout(f)?;
    s.tape.add(z1, f)
}

/// Full encoder: `z_L ∈ [N+1, D]`. No normalization after the last block.
pub fn encode<T: Scalar>(
    s: &mut Session<T>,
    image: &Tensor<T>,
    cfg: &EncoderConfig,
    p: &EncoderParams,
) -> Result<Var> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("encode", format!("image {:?}", image.shape())));
    };
    if (c, h, w) != (cfg.channels, cfg.image_height, cfg.image_width) {
        return Err(Error::shape(
            "encode",
            format!(
                "image [{c},{h},{w}] vs config [{},{},{}]",
                cfg.channels, cfg.image_height, cfg.image_width
            ),
        ));
    }
    let patches = patchify(image, cfg.patch_size)?;
    let patches = s.tape.constant(patches);
    let mut z = embed(s, patches, p)?;
    for bp in &p.blocks {
        z = transformer_block(s, z, bp, cfg.heads)?;
    }
    Ok(z)
}
