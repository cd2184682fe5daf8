//! CLIP-style dual-tower model used as the frozen teacher.
//!
//! Faithful to the ViT-B architecture: non-overlapping patch embedding,
//! class token, pre-LN blocks with QuickGELU, a causal text tower, and
//! linear projections into the shared embedding space. Weights are plain
//! tensors (never Vars), so no gradient can reach them.

use candle_core::{DType, Device, IndexOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{causal_mask, Activation, EncoderBlock, LayerNorm, Linear};
use crate::params::{randn, trunc_normal, ParamSet};

/// CLIP pretraining channel statistics.
pub const IMAGE_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const IMAGE_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

#[derive(Debug, Clone)]
pub struct ClipDims {
    pub image_hw: (usize, usize),
    pub patch: usize,
    pub vision_width: usize,
    pub vision_heads: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub vocab: usize,
    pub n_ctx: usize,
    /// Side length of the square grid the stored positional table was
    /// pretrained at.
    pub pretrain_grid: usize,
}

impl ClipDims {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch, self.image_hw.1 / self.patch)
    }

    pub fn image_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c + 1
    }

    pub fn stage_boundaries(&self) -> [usize; 4] {
        let step = self.layers / 4;
        [step, 2 * step, 3 * step, 4 * step]
    }
}

/// Bilinear interpolation of a ViT positional table from a square pretrain
/// grid to the target grid; the class-token row is copied unchanged.
pub fn resize_positional_embeddings(
    table: &Tensor, // (S*S + 1, D)
    source_side: usize,
    target: (usize, usize),
) -> Result<Tensor> {
    let (rows, d) = table.dims2()?;
    if rows != source_side * source_side + 1 {
        return Err(Error::GridMismatch {
            rows: source_side,
            cols: source_side,
        });
    }
    let (tr, tc) = target;
    if tr == 0 || tc == 0 {
        return Err(Error::GridMismatch { rows: tr, cols: tc });
    }
    let cls = table.i((0..1, ..))?;
    let patches = table.i((1.., ..))?.to_dtype(DType::F64)?;
    let src: Vec<f64> = patches.flatten_all()?.to_vec1()?;
    let s = source_side;

    let coord = |i: usize, t: usize| -> f64 {
        if t == 1 {
            (s as f64 - 1.0) / 2.0
        } else {
            i as f64 * (s as f64 - 1.0) / (t as f64 - 1.0)
        }
    };
    let mut out = vec![0f64; tr * tc * d];
    for r in 0..tr {
        let y = coord(r, tr);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(s - 1);
        let fy = y - y0 as f64;
        for c in 0..tc {
            let x = coord(c, tc);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(s - 1);
            let fx = x - x0 as f64;
            for k in 0..d {
                let v00 = src[(y0 * s + x0) * d + k];
                let v01 = src[(y0 * s + x1) * d + k];
                let v10 = src[(y1 * s + x0) * d + k];
                let v11 = src[(y1 * s + x1) * d + k];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(r * tc + c) * d + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let resized = Tensor::from_vec(out, (tr * tc, d), table.device())?.to_dtype(table.dtype())?;
    Ok(Tensor::cat(&[cls, resized], 0)?)
}

pub struct ClipVision {
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    /// Stored at the pretrain grid; resized at construction.
    pub pos_table: Tensor,
    pub pos_resized: Tensor,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub ln_post: LayerNorm,
    pub proj: Tensor, // (vision_width, embed_dim)
    dims: ClipDims,
}

pub struct ClipText {
    pub token_embed: Tensor, // (vocab, text_width)
    pub pos_embed: Tensor,   // (n_ctx, text_width)
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: LayerNorm,
    pub proj: Tensor, // (text_width, embed_dim)
    dims: ClipDims,
}

pub struct ClipModel {
    pub vision: ClipVision,
    pub text: ClipText,
    pub dims: ClipDims,
}

impl ClipModel {
    /// Builds the model with seeded random weights. Real pretrained weights
    /// can then be loaded over these via a safetensors file.
    pub fn init_random(dims: &ClipDims, seed: u64, device: &Device) -> Result<(Self, ParamSet)> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dt = DType::F32;
        let patch_dim = 3 * dims.patch * dims.patch;

        let patch_embed = Linear::init(&mut ps, &mut rng, "vision/patch_embed", patch_dim, dims.vision_width, dt, device)?;
        let cls_token = ps.register("vision/cls_token", randn(&mut rng, &[1, 1, dims.vision_width], 0.02, dt, device)?)?;
        let n_pre = dims.pretrain_grid * dims.pretrain_grid + 1;
        let pos_table = ps.register("vision/pos_table", randn(&mut rng, &[n_pre, dims.vision_width], 0.02, dt, device)?)?;
        let ln_pre = LayerNorm::init(&mut ps, "vision/ln_pre", dims.vision_width, dt, device)?;
        let mut vblocks = Vec::new();
        for i in 0..dims.layers {
            vblocks.push(EncoderBlock::init(
                &mut ps, &mut rng, &format!("vision/block{i}"), dims.vision_width,
                dims.vision_heads, 4, Activation::QuickGelu, dt, device,
            )?);
        }
        let ln_post = LayerNorm::init(&mut ps, "vision/ln_post", dims.vision_width, dt, device)?;
        let vproj = ps.register(
            "vision/proj",
            trunc_normal(&mut rng, &[dims.vision_width, dims.embed_dim], (1.0 / dims.vision_width as f64).sqrt(), dt, device)?,
        )?;

        let token_embed = ps.register("text/token_embed", randn(&mut rng, &[dims.vocab, dims.text_width], 0.02, dt, device)?)?;
        let pos_embed = ps.register("text/pos_embed", randn(&mut rng, &[dims.n_ctx, dims.text_width], 0.01, dt, device)?)?;
        let mut tblocks = Vec::new();
        for i in 0..dims.layers {
            tblocks.push(EncoderBlock::init(
                &mut ps, &mut rng, &format!("text/block{i}"), dims.text_width,
                dims.text_heads, 4, Activation::QuickGelu, dt, device,
            )?);
        }
        let ln_final = LayerNorm::init(&mut ps, "text/ln_final", dims.text_width, dt, device)?;
        let tproj = ps.register(
            "text/proj",
            trunc_normal(&mut rng, &[dims.text_width, dims.embed_dim], (1.0 / dims.text_width as f64).sqrt(), dt, device)?,
        )?;

        let pos_resized = resize_positional_embeddings(pos_table.as_tensor(), dims.pretrain_grid, dims.grid())?;

        let model = Self {
            vision: ClipVision {
                patch_embed,
                cls_token: cls_token.as_tensor().clone(),
                pos_table: pos_table.as_tensor().clone(),
                pos_resized,
                ln_pre,
                blocks: vblocks,
                ln_post,
                proj: vproj.as_tensor().clone(),
                dims: dims.clone(),
            },
            text: ClipText {
                token_embed: token_embed.as_tensor().clone(),
                pos_embed: pos_embed.as_tensor().clone(),
                blocks: tblocks,
                ln_final,
                proj: tproj.as_tensor().clone(),
                dims: dims.clone(),
            },
            dims: dims.clone(),
        };
        Ok((model, ps))
    }
}

impl ClipVision {
    /// Splits `(B, 3, H, W)` into non-overlapping patches `(B, N, 3*p*p)`.
    fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let (b, ch, h, w) = image.dims4()?;
        let (eh, ew) = self.dims.image_hw;
        if ch != 3 || h != eh || w != ew {
            return Err(Error::BadImageShape {
                expected: format!("(B, 3, {eh}, {ew})"),
                got: format!("({b}, {ch}, {h}, {w})"),
            });
        }
        let p = self.dims.patch;
        let (gr, gc) = self.dims.grid();
        let x = image.reshape((b, ch, gr, p, gc, p))?;
        let x = x.permute([0, 2, 4, 1, 3, 5])?.contiguous()?;
        Ok(x.reshape((b, gr * gc, ch * p * p))?)
    }

    /// Per-stage hidden states plus the projected final embedding.
    /// Input is a raw `[0, 1]` image batch; CLIP channel statistics are
    /// applied here.
    pub fn forward_stages(&self, images01: &Tensor) -> Result<VisionOutput> {
        let dt = images01.dtype();
        let dev = images01.device();
        let mean = Tensor::from_vec(IMAGE_MEAN.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
        let std = Tensor::from_vec(IMAGE_STD.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
        let normed = images01.broadcast_sub(&mean)?.broadcast_div(&std)?;

        let patches = self.patchify(&normed)?;
        let b = patches.dims3()?.0;
        let x = self.patch_embed.forward(&patches)?;
        let cls = self.cls_token.broadcast_as((b, 1, self.dims.vision_width))?;
        let x = Tensor::cat(&[cls, x], 1)?;
        let x = x.broadcast_add(&self.pos_resized.unsqueeze(0)?)?;
        let mut x = self.ln_pre.forward(&x)?;

        let bounds = self.dims.stage_boundaries();
        let mut stages = Vec::with_capacity(4);
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(&x, None)?;
            if bounds.contains(&(i + 1)) {
                stages.push(x.clone());
            }
        }
        let cls_final = stages[3].i((.., 0, ..))?;
        let embed = self.ln_post.forward(&cls_final)?.matmul(&self.proj)?;
        Ok(VisionOutput {
            stages,
            cls: cls_final,
            embed,
        })
    }
}

pub struct VisionOutput {
    /// 4 x (B, N_img, vision_width), post-block hidden states.
    pub stages: Vec<Tensor>,
    /// (B, vision_width): stage-4 class token before ln_post/proj.
    pub cls: Tensor,
    /// (B, embed_dim): projected CLIP image embedding.
    pub embed: Tensor,
}

pub struct TextOutput {
    /// 4 x (B, n_ctx, text_width).
    pub stages: Vec<Tensor>,
    /// (B, text_width): end-of-text token of stage 4, before ln_final/proj.
    pub cls: Tensor,
    /// (B, embed_dim): projected CLIP text embedding.
    pub embed: Tensor,
}

impl ClipText {
    /// `ids` must already be padded to `n_ctx`; `eot_pos[b]` is the index of
    /// the end-of-text token in sample b.
    pub fn forward_stages(&self, ids: &Tensor, eot_pos: &[usize]) -> Result<TextOutput> {
        let (b, t) = ids.dims2()?;
        if t != self.dims.n_ctx {
            return Err(Error::ShapeMismatch(format!(
                "text input length {t} != n_ctx {}",
                self.dims.n_ctx
            )));
        }
        let flat = ids.reshape((b * t,))?;
        let x = self.token_embed.index_select(&flat, 0)?.reshape((b, t, self.dims.text_width))?;
        let mut x = x.broadcast_add(&self.pos_embed.unsqueeze(0)?)?;
        let mask = causal_mask(t, x.dtype(), x.device())?;

        let bounds = self.dims.stage_boundaries();
        let mut stages = Vec::with_capacity(4);
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(&x, Some(&mask))?;
            if bounds.contains(&(i + 1)) {
                stages.push(x.clone());
            }
        }
        let mut cls_rows = Vec::with_capacity(b);
        for (bi, &pos) in eot_pos.iter().enumerate() {
            cls_rows.push(stages[3].i((bi, pos, ..))?);
        }
        let cls = Tensor::stack(&cls_rows, 0)?;
        let embed = self.ln_final.forward(&cls)?.matmul(&self.proj)?;
        Ok(TextOutput {
            stages,
            cls,
            embed,
        })
    }
}
