//! The recognition model: a ViT-Small encoder split into 4 stages and a
//! 4-layer autoregressive transformer decoder with a character head.

use std::cell::RefCell;

use candle_core::{DType, Device, IndexOp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::charset::LabelCodec;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Activation, DecoderBlock, Embedding, EncoderBlock, LayerNorm, Linear};
use crate::params::{randn, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentConfig {
    pub enc_depth: usize,
    pub width: usize,
    pub enc_heads: usize,
    /// (patch_height, patch_width) over the 32x128 input.
    pub patch: (usize, usize),
    pub image_hw: (usize, usize),
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub vocab: usize,
    pub max_label_len: usize,
    pub dropout: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            enc_depth: 12,
            width: 384,
            enc_heads: 6,
            patch: (4, 8),
            image_hw: (32, 128),
            dec_depth: 4,
            dec_heads: 6,
            vocab: LabelCodec::VOCAB,
            max_label_len: 25,
            dropout: 0.0,
        }
    }
}

impl StudentConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch.0, self.image_hw.1 / self.patch.1)
    }

    /// Patch tokens plus the class token.
    pub fn enc_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c + 1
    }

    pub fn target_len(&self) -> usize {
        self.max_label_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_depth % 4 != 0 {
            return Err(Error::Config {
                key: "enc_depth".into(),
                reason: "encoder depth must be divisible by 4 for the stage split".into(),
            });
        }
        if self.dec_depth != 4 {
            return Err(Error::Config {
                key: "dec_depth".into(),
                reason: "decoder depth equals the number of distillation stages (4)".into(),
            });
        }
        Ok(())
    }
}

/// Per-stage activations of one teacher-forced forward pass.
pub struct StudentStages {
    /// 4 x (B, enc_tokens, width)
    pub enc: Vec<Tensor>,
    /// 4 x (B, width), the class token of each encoder stage.
    pub enc_cls: Vec<Tensor>,
    /// 4 x (B, T, width)
    pub dec: Vec<Tensor>,
    /// (B, T, vocab)
    pub logits: Tensor,
}

impl StudentStages {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.logits.dims3()?.0)
    }
}

pub struct Student {
    pub config: StudentConfig,
    patch_embed: Linear,
    cls_token: Tensor,
    enc_pos: Tensor,
    enc_blocks: Vec<EncoderBlock>,
    char_embed: Embedding,
    dec_pos: Tensor,
    dec_blocks: Vec<DecoderBlock>,
    head_ln: LayerNorm,
    head: Linear,
    codec: LabelCodec,
    dtype: DType,
    device: Device,
    /// Seeded stream for dropout masks; only consumed when dropout > 0 in
    /// training forwards, so inference stays deterministic.
    drop_rng: RefCell<ChaCha20Rng>,
}

impl Student {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        config: StudentConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let patch_dim = 3 * config.patch.0 * config.patch.1;
        let patch_embed = Linear::init(params, rng, "student/patch_embed", patch_dim, w, dtype, device)?;
        let cls_token = params
            .register("student/cls_token", randn(rng, &[1, 1, w], 0.02, dtype, device)?)?
            .as_tensor()
            .clone();
        let enc_pos = params
            .register(
                "student/enc_pos",
                randn(rng, &[config.enc_tokens(), w], 0.02, dtype, device)?,
            )?
            .as_tensor()
            .clone();
        let mut enc_blocks = Vec::new();
        for i in 0..config.enc_depth {
            enc_blocks.push(EncoderBlock::init(
                params, rng, &format!("student/enc{i}"), w, config.enc_heads, 4,
                Activation::Gelu, dtype, device,
            )?);
        }
        let char_embed = Embedding::init(params, rng, "student/char_embed", config.vocab, w, dtype, device)?;
        let dec_pos = params
            .register(
                "student/dec_pos",
                randn(rng, &[config.target_len(), w], 0.02, dtype, device)?,
            )?
            .as_tensor()
            .clone();
        let mut dec_blocks = Vec::new();
        for i in 0..config.dec_depth {
            dec_blocks.push(DecoderBlock::init(
                params, rng, &format!("student/dec{i}"), w, config.dec_heads, 4, dtype, device,
            )?);
        }
        let head_ln = LayerNorm::init(params, "student/head_ln", w, dtype, device)?;
        let head = Linear::init(params, rng, "student/head", w, config.vocab, dtype, device)?;
        Ok(Self {
            codec: LabelCodec::new(config.max_label_len),
            config,
            patch_embed,
            cls_token,
            enc_pos,
            enc_blocks,
            char_embed,
            dec_pos,
            dec_blocks,
            head_ln,
            head,
            dtype,
            device: device.clone(),
            drop_rng: RefCell::new(ChaCha20Rng::seed_from_u64(rng.gen())),
        })
    }

    fn dropout(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rate = self.config.dropout;
        if !train || rate <= 0.0 {
            return Ok(x.clone());
        }
        let n = x.elem_count();
        let keep = 1.0 - rate;
        let mut rng = self.drop_rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), &self.device)?.to_dtype(self.dtype)?;
        Ok((x * mask)?)
    }

    pub fn codec(&self) -> &LabelCodec {
        &self.codec
    }

    fn patchify(&self, images01: &Tensor) -> Result<Tensor> {
        let (b, ch, h, w) = images01.dims4()?;
        let (eh, ew) = self.config.image_hw;
        if ch != 3 || h != eh || w != ew {
            return Err(Error::BadImageShape {
                expected: format!("(B, 3, {eh}, {ew})"),
                got: format!("({b}, {ch}, {h}, {w})"),
            });
        }
        let (ph, pw) = self.config.patch;
        let (gr, gc) = self.config.grid();
        let x = images01.reshape((b, ch, gr, ph, gc, pw))?;
        let x = x.permute([0, 2, 4, 1, 3, 5])?.contiguous()?;
        Ok(x.reshape((b, gr * gc, ch * ph * pw))?)
    }

    /// Four stage outputs, each `(B, enc_tokens, width)`, plus per-stage
    /// class tokens. Input is `[0, 1]`; shifted to zero mean here.
    pub fn encode(&self, images01: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.encode_inner(images01, false)
    }

    fn encode_inner(&self, images01: &Tensor, train: bool) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let shifted = ((images01 - 0.5)? / 0.5)?;
        let patches = self.patchify(&shifted)?;
        let b = patches.dims3()?.0;
        let x = self.patch_embed.forward(&patches)?;
        let cls = self.cls_token.broadcast_as((b, 1, self.config.width))?;
        let x = Tensor::cat(&[cls, x], 1)?;
        let x = x.broadcast_add(&self.enc_pos.unsqueeze(0)?)?;
        let mut x = self.dropout(&x, train)?;

        let stage_step = self.config.enc_depth / 4;
        let mut stages = Vec::with_capacity(4);
        let mut cls_tokens = Vec::with_capacity(4);
        for (i, blk) in self.enc_blocks.iter().enumerate() {
            x = blk.forward(&x, None)?;
            if (i + 1) % stage_step == 0 {
                stages.push(x.clone());
                cls_tokens.push(x.i((.., 0, ..))?);
            }
        }
        Ok((stages, cls_tokens))
    }

    /// Final encoder output used as decoder memory.
    pub fn memory(&self, images01: &Tensor) -> Result<Tensor> {
        let (stages, _) = self.encode(images01)?;
        Ok(stages[3].clone())
    }

    /// Teacher-forced decode over full-length targets; `logits[b, t]`
    /// predicts `targets[b, t + 1]`.
    pub fn decode_teacher_forced(
        &self,
        memory: &Tensor,
        targets: &[Vec<u32>],
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let t_len = self.config.target_len();
        for seq in targets {
            if seq.len() != t_len {
                return Err(Error::BadTargetLength {
                    expected: t_len,
                    got: seq.len(),
                });
            }
        }
        let b = targets.len();
        let flat: Vec<u32> = targets.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (b, t_len), &self.device)?;
        self.decode_ids_tensor(memory, &ids)
    }

    fn decode_ids_tensor(&self, memory: &Tensor, ids: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let (_b, t_len) = ids.dims2()?;
        let x = self.char_embed.forward(ids)?;
        let pos = self.dec_pos.narrow(0, 0, t_len)?;
        let mut x = x.broadcast_add(&pos.unsqueeze(0)?)?;
        let mask = causal_mask(t_len, self.dtype, &self.device)?;
        let mut stages = Vec::with_capacity(self.dec_blocks.len());
        for blk in &self.dec_blocks {
            x = blk.forward(&x, memory, &mask)?;
            stages.push(x.clone());
        }
        let logits = self.head.forward(&self.head_ln.forward(&x)?)?;
        Ok((stages, logits))
    }

    /// Greedy autoregressive decoding from BOS; stops per sample at EOS or
    /// after `max_label_len` characters. BOS/PAD are never emitted.
    pub fn greedy_decode(&self, memory: &Tensor) -> Result<Vec<String>> {
        let b = memory.dims3()?.0;
        let mut seqs: Vec<Vec<u32>> = vec![vec![LabelCodec::BOS]; b];
        let mut done = vec![false; b];
        for _ in 0..self.config.max_label_len + 1 {
            let t = seqs[0].len();
            let flat: Vec<u32> = seqs.iter().flatten().copied().collect();
            let ids = Tensor::from_vec(flat, (b, t), &self.device)?;
            let (_stages, logits) = self.decode_ids_tensor(memory, &ids)?;
            let last = logits.i((.., t - 1, ..))?.to_dtype(DType::F32)?;
            let rows = last.to_vec2::<f32>()?;
            let mut all_done = true;
            for (bi, row) in rows.iter().enumerate() {
                if done[bi] {
                    // Keep lengths aligned across the batch.
                    seqs[bi].push(LabelCodec::PAD);
                    continue;
                }
                let next = argmax_excluding(row, &[LabelCodec::BOS, LabelCodec::PAD]);
                seqs[bi].push(next);
                if next == LabelCodec::EOS {
                    done[bi] = true;
                } else {
                    all_done = false;
                }
            }
            if all_done {
                break;
            }
        }
        Ok(seqs
            .iter()
            .map(|s| {
                let mut text = self.codec.decode_ids(&s[1..]);
                text.truncate(self.config.max_label_len);
                text
            })
            .collect())
    }

    /// One full teacher-forced training forward.
    pub fn forward_train(&self, images01: &Tensor, targets: &[Vec<u32>]) -> Result<StudentStages> {
        let (enc, enc_cls) = self.encode_inner(images01, true)?;
        let (dec, logits) = self.decode_teacher_forced(&enc[3], targets)?;
        Ok(StudentStages {
            enc,
            enc_cls,
            dec,
            logits,
        })
    }

    /// Recognize a batch of images end to end.
    pub fn recognize(&self, images01: &Tensor) -> Result<Vec<String>> {
        let memory = self.memory(images01)?;
        self.greedy_decode(&memory)
    }
}

fn argmax_excluding(row: &[f32], excluded: &[u32]) -> u32 {
    let mut best = 0u32;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if excluded.contains(&(i as u32)) {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i as u32;
        }
    }
    best
}
