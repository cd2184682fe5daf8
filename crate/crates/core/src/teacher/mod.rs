//! Frozen CLIP teacher: per-stage image and text features for distillation.
//!
//! The teacher is a dual-tower CLIP (ViT-B/16 by default, ViT-B/32
//! optional) whose positional table is resized for 32x128 inputs. Weights
//! come from a safetensors file named per [`crate::params::ParamSet`]
//! conventions; they never enter an optimizer and every feature handed to a
//! loss is detached.

mod cache;
mod clip;
mod tokenizer;

pub use cache::FeatureCache;
pub use clip::{resize_positional_embeddings, ClipDims, ClipModel, IMAGE_MEAN, IMAGE_STD};
pub use tokenizer::CharTokenizer;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::charset::LabelCodec;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherVariant {
    #[serde(rename = "vit-b-16")]
    VitB16,
    #[serde(rename = "vit-b-32")]
    VitB32,
}

impl TeacherVariant {
    pub fn patch(&self) -> usize {
        match self {
            TeacherVariant::VitB16 => 16,
            TeacherVariant::VitB32 => 32,
        }
    }

    /// Patch grid for 32x128 input.
    pub fn grid(&self) -> (usize, usize) {
        match self {
            TeacherVariant::VitB16 => (2, 8),
            TeacherVariant::VitB32 => (1, 4),
        }
    }

    pub fn image_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c + 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub variant: TeacherVariant,
    pub weights_path: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub max_label_len: usize,
}

impl TeacherConfig {
    pub fn dims(&self) -> ClipDims {
        ClipDims {
            image_hw: (32, 128),
            patch: self.variant.patch(),
            vision_width: 768,
            vision_heads: 12,
            text_width: 512,
            text_heads: 8,
            layers: 12,
            embed_dim: 512,
            vocab: tokenizer::VOCAB_SIZE,
            n_ctx: self.max_label_len + 2,
            pretrain_grid: 14,
        }
    }
}

/// Per-sample teacher features, the unit stored in the on-disk cache.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    /// 4 x (N_img, vision_width)
    pub image_stages: Vec<Tensor>,
    /// 4 x (N_ctx, text_width)
    pub text_stages: Vec<Tensor>,
    pub text_mask: Vec<bool>,
    /// (text_width,): end-of-text token of stage 4.
    pub text_cls: Tensor,
    /// (vision_width,): class token of stage 4.
    pub image_cls: Tensor,
}

/// Batched teacher features as consumed by the distillation loss.
pub struct TeacherBatch {
    /// 4 x (B, N_img, vision_width)
    pub image_stages: Vec<Tensor>,
    /// 4 x (B, N_ctx, text_width)
    pub text_stages: Vec<Tensor>,
    pub text_mask: Vec<Vec<bool>>,
    /// (B, text_width)
    pub text_cls: Tensor,
    /// (B, vision_width)
    pub image_cls: Tensor,
}

impl TeacherBatch {
    pub fn stack(samples: &[TeacherFeatures]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyEval);
        }
        let stack_stage = |pick: &dyn Fn(&TeacherFeatures) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
            (0..4)
                .map(|i| {
                    let rows: Vec<Tensor> = samples.iter().map(|s| pick(s)[i].clone()).collect();
                    Ok(Tensor::stack(&rows, 0)?)
                })
                .collect()
        };
        Ok(Self {
            image_stages: stack_stage(&|s| &s.image_stages)?,
            text_stages: stack_stage(&|s| &s.text_stages)?,
            text_mask: samples.iter().map(|s| s.text_mask.clone()).collect(),
            text_cls: Tensor::stack(
                &samples.iter().map(|s| s.text_cls.clone()).collect::<Vec<_>>(),
                0,
            )?,
            image_cls: Tensor::stack(
                &samples.iter().map(|s| s.image_cls.clone()).collect::<Vec<_>>(),
                0,
            )?,
        })
    }
}

pub struct Teacher {
    pub config: TeacherConfig,
    pub dims: ClipDims,
    model: ClipModel,
    params: ParamSet,
    tokenizer: CharTokenizer,
    codec: LabelCodec,
    device: Device,
}

impl Teacher {
    /// Builds a teacher with seeded random weights (no file involved).
    pub fn init_random(config: TeacherConfig, seed: u64, device: &Device) -> Result<Self> {
        let dims = config.dims();
        Self::init_random_with_dims(config, dims, seed, device)
    }

    /// Same as `init_random` but with explicit (possibly shrunk) dims.
    pub fn init_random_with_dims(
        config: TeacherConfig,
        dims: ClipDims,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        let (model, params) = ClipModel::init_random(&dims, seed, device)?;
        Ok(Self {
            codec: LabelCodec::new(config.max_label_len),
            config,
            dims,
            model,
            params,
            tokenizer: CharTokenizer::new(),
            device: device.clone(),
        })
    }

    /// Loads teacher weights from the configured safetensors file.
    pub fn load(config: TeacherConfig, device: &Device) -> Result<Self> {
        let dims = config.dims();
        Self::load_with_dims(config, dims, device)
    }

    pub fn load_with_dims(config: TeacherConfig, dims: ClipDims, device: &Device) -> Result<Self> {
        let path = config.weights_path.clone();
        let mut teacher = Self::init_random_with_dims(config, dims, 0, device)?;
        let tensors = candle_core::safetensors::load(&path, device).map_err(|e| {
            Error::BadCheckpoint {
                path: path.clone(),
                reason: e.to_string(),
            }
        })?;
        let map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for name in teacher.params.named().keys() {
            if !map.contains_key(name) {
                return Err(Error::BadCheckpoint {
                    path: path.clone(),
                    reason: format!("missing tensor {name}"),
                });
            }
        }
        teacher.params.load_from(&map)?;
        // The resized positional table depends on the loaded weights.
        teacher.model.vision.pos_resized = resize_positional_embeddings(
            &teacher.model.vision.pos_table,
            teacher.dims.pretrain_grid,
            teacher.dims.grid(),
        )?;
        Ok(teacher)
    }

    /// Overwrites named parameters in place. Used by teacher calibration;
    /// the positional table is re-resized in case it changed.
    pub fn override_tensors(
        &mut self,
        values: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.params.load_from(values)?;
        self.model.vision.pos_resized = resize_positional_embeddings(
            &self.model.vision.pos_table,
            self.dims.pretrain_grid,
            self.dims.grid(),
        )?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.params.named_tensors();
        candle_core::safetensors::save(&named.into_iter().collect(), path)?;
        Ok(())
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn n_ctx(&self) -> usize {
        self.dims.n_ctx
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn model(&self) -> &ClipModel {
        &self.model
    }

    /// CRC32 over every parameter tensor, used by the frozen-teacher check.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (name, var) in self.params.named() {
            hasher.update(name.as_bytes());
            let data: Vec<f32> = var
                .as_tensor()
                .flatten_all()
                .and_then(|t| t.to_dtype(DType::F32))
                .and_then(|t| t.to_vec1())
                .expect("parameter tensors are always readable");
            for v in data {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }

    /// Hidden states after blocks 3/6/9/12 plus the stage-4 class token.
    /// `images01` is `(B, 3, 32, 128)` in `[0, 1]`.
    pub fn encode_image_stages(&self, images01: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let out = self.model.vision.forward_stages(images01)?;
        Ok((out.stages, out.cls))
    }

    /// Projected CLIP image embedding `(B, embed_dim)`.
    pub fn image_embedding(&self, images01: &Tensor) -> Result<Tensor> {
        Ok(self.model.vision.forward_stages(images01)?.embed)
    }

    /// Character-splits, tokenizes and encodes a batch of normalized labels.
    pub fn encode_text_stages(
        &self,
        labels: &[&str],
    ) -> Result<(Vec<Tensor>, Vec<Vec<bool>>, Tensor)> {
        let (ids, masks, eots) = self.tokenize_batch(labels)?;
        let out = self.model.text.forward_stages(&ids, &eots)?;
        Ok((out.stages, masks, out.cls))
    }

    /// Projected CLIP text embedding `(B, embed_dim)`.
    pub fn text_embedding(&self, labels: &[&str]) -> Result<Tensor> {
        let (ids, _masks, eots) = self.tokenize_batch(labels)?;
        Ok(self.model.text.forward_stages(&ids, &eots)?.embed)
    }

    fn tokenize_batch(&self, labels: &[&str]) -> Result<(Tensor, Vec<Vec<bool>>, Vec<usize>)> {
        let n_ctx = self.dims.n_ctx;
        let mut all_ids = Vec::with_capacity(labels.len() * n_ctx);
        let mut masks = Vec::with_capacity(labels.len());
        let mut eots = Vec::with_capacity(labels.len());
        for label in labels {
            let split = self.codec.char_split(label)?;
            let (ids, mask, eot) = self.tokenizer.encode_padded(&split, n_ctx)?;
            all_ids.extend(ids);
            masks.push(mask);
            eots.push(eot);
        }
        let ids = Tensor::from_vec(all_ids, (labels.len(), n_ctx), &self.device)?;
        Ok((ids, masks, eots))
    }

    /// Full per-sample features for one image/label pair, detached.
    pub fn features(&self, image01: &Tensor, label: &str) -> Result<TeacherFeatures> {
        let batched = image01.unsqueeze(0)?;
        let (img_stages, img_cls) = self.encode_image_stages(&batched)?;
        let (txt_stages, masks, txt_cls) = self.encode_text_stages(&[label])?;
        Ok(TeacherFeatures {
            image_stages: img_stages
                .iter()
                .map(|s| s.i(0)?.detach().contiguous())
                .collect::<candle_core::Result<_>>()?,
            text_stages: txt_stages
                .iter()
                .map(|s| s.i(0)?.detach().contiguous())
                .collect::<candle_core::Result<_>>()?,
            text_mask: masks.into_iter().next().expect("one sample"),
            text_cls: txt_cls.i(0)?.detach().contiguous()?,
            image_cls: img_cls.i(0)?.detach().contiguous()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TeacherConfig {
        TeacherConfig {
            variant: TeacherVariant::VitB32,
            weights_path: PathBuf::from("unused"),
            cache_dir: None,
            max_label_len: 8,
        }
    }

    fn tiny_dims(config: &TeacherConfig) -> ClipDims {
        ClipDims {
            vision_width: 32,
            vision_heads: 4,
            text_width: 16,
            text_heads: 2,
            layers: 4,
            embed_dim: 16,
            ..config.dims()
        }
    }

    /// Shrunk dims so unit tests stay fast; same code path as full size.
    fn tiny_teacher() -> Teacher {
        let config = tiny_config();
        let dims = tiny_dims(&config);
        Teacher::init_random_with_dims(config, dims, 7, &Device::Cpu).unwrap()
    }

    #[test]
    fn image_stage_shapes_and_determinism() {
        let t = tiny_teacher();
        let img = Tensor::rand(0f32, 1f32, (2, 3, 32, 128), &Device::Cpu).unwrap();
        let (stages, cls) = t.encode_image_stages(&img).unwrap();
        assert_eq!(stages.len(), 4);
        for s in &stages {
            assert_eq!(s.dims(), &[2, 5, 32]); // 1x4 grid + cls for ViT-B/32
        }
        assert_eq!(cls.dims(), &[2, 32]);

        let (stages2, _) = t.encode_image_stages(&img).unwrap();
        let diff = (&stages[0] - &stages2[0]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn image_encoder_is_not_constant() {
        let t = tiny_teacher();
        let zero = Tensor::zeros((1, 3, 32, 128), DType::F32, &Device::Cpu).unwrap();
        let mut one_px = vec![0f32; 3 * 32 * 128];
        one_px[0] = 1.0;
        let perturbed = Tensor::from_vec(one_px, (1, 3, 32, 128), &Device::Cpu).unwrap();
        let (a, _) = t.encode_image_stages(&zero).unwrap();
        let (b, _) = t.encode_image_stages(&perturbed).unwrap();
        let diff = (&a[0] - &b[0]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn bad_image_shape() {
        let t = tiny_teacher();
        let img = Tensor::rand(0f32, 1f32, (1, 3, 32, 64), &Device::Cpu).unwrap();
        assert!(matches!(
            t.encode_image_stages(&img),
            Err(Error::BadImageShape { .. })
        ));
    }

    #[test]
    fn text_stage_shapes_and_mask() {
        let t = tiny_teacher();
        let (stages, masks, cls) = t.encode_text_stages(&["cat"]).unwrap();
        assert_eq!(stages.len(), 4);
        for s in &stages {
            assert_eq!(s.dims(), &[1, 10, 16]); // n_ctx = 8 + 2
        }
        assert_eq!(cls.dims(), &[1, 16]);
        let mask = &masks[0];
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5); // start + c a t + end
        assert!(mask[..5].iter().all(|&m| m));
        assert!(!mask[5..].iter().any(|&m| m));
    }

    #[test]
    fn checksum_is_stable() {
        let t = tiny_teacher();
        assert_eq!(t.checksum(), t.checksum());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.safetensors");
        let mut config = tiny_config();
        config.weights_path = path.clone();
        let dims = tiny_dims(&config);
        let t = Teacher::init_random_with_dims(config.clone(), dims.clone(), 11, &Device::Cpu).unwrap();
        t.save(&path).unwrap();
        let t2 = Teacher::load_with_dims(config, dims, &Device::Cpu).unwrap();
        assert_eq!(t.checksum(), t2.checksum());
    }
}
