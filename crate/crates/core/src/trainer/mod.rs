//! Training loop: config, metrics logging, the distillation trainer, and
//! ablation runs.

mod ablate;
mod opt;

pub use ablate::{render_table, run_table2, run_table3, AblationRow, TeacherFactory};
pub use opt::{lr_at, Adam};

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AlignDims, AlignParams};
use crate::charset::LabelCodec;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{augment, Dataset, Image32};
use crate::error::{Error, Result};
use crate::losses::{loss_sds, recognition_loss, LossWeights};
use crate::params::ParamSet;
use crate::student::{Student, StudentConfig};
use crate::teacher::{FeatureCache, Teacher, TeacherBatch, TeacherConfig, TeacherVariant};
use crate::tensor_util::scalar_f64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub teacher_weights: PathBuf,
    pub teacher_variant: TeacherVariant,
    pub student: StudentConfig,
    pub loss: LossWeights,
    /// Scales the distillation term; 0 turns distillation off entirely and
    /// matches the no-distillation baseline step for step.
    pub distill_lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    /// Fraction of the dataset held out for per-epoch validation.
    pub val_frac: f64,
    pub augment: bool,
    /// Feed the teacher the un-augmented image even when the student sees an
    /// augmented one. Required for the feature cache to be valid.
    pub clean_teacher_input: bool,
    pub use_cache: bool,
    pub cache_dir: Option<PathBuf>,
    /// Stop once held-out accuracy reaches this percentage.
    pub early_stop_acc: Option<f64>,
    /// Off by default so that reruns produce byte-identical logs.
    pub log_timestamps: bool,
}

impl TrainConfig {
    /// Full-scale recipe from the original training setup.
    pub fn paper(data_dir: PathBuf, out_dir: PathBuf, teacher_weights: PathBuf) -> Self {
        Self {
            data_dir,
            out_dir,
            teacher_weights,
            teacher_variant: TeacherVariant::VitB16,
            student: StudentConfig::default(),
            loss: LossWeights::default(),
            distill_lambda: 1.0,
            lr: 1.4e-3,
            batch_size: 320,
            epochs: 5,
            seed: 42,
            warmup_frac: 0.02,
            clip_norm: 5.0,
            val_frac: 0.1,
            augment: true,
            clean_teacher_input: true,
            use_cache: false,
            cache_dir: None,
            early_stop_acc: None,
            log_timestamps: true,
        }
    }

    /// Single-core smoke recipe: shrunk student, cached teacher features,
    /// no augmentation, early stop on validation accuracy.
    pub fn desk(data_dir: PathBuf, out_dir: PathBuf, teacher_weights: PathBuf) -> Self {
        Self {
            student: desk_student(),
            lr: 3e-4,
            batch_size: 32,
            epochs: 10,
            augment: false,
            use_cache: true,
            early_stop_acc: Some(95.0),
            log_timestamps: false,
            ..Self::paper(data_dir, out_dir, teacher_weights)
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the serialized config, for tagging ablation rows.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.loss.validate()?;
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad("val_frac", "must be in [0, 1)");
        }
        if self.distill_lambda < 0.0 {
            return bad("distill_lambda", "must be non-negative");
        }
        if self.use_cache && self.augment && !self.clean_teacher_input {
            return bad(
                "use_cache",
                "cached teacher features require clean_teacher_input when augmenting",
            );
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            variant: self.teacher_variant,
            weights_path: self.teacher_weights.clone(),
            cache_dir: self.cache_dir.clone(),
            max_label_len: self.student.max_label_len,
        }
    }

    fn distill_active(&self) -> bool {
        self.distill_lambda > 0.0 && !self.loss.distill_disabled()
    }
}

/// Shrunk student that trains in reasonable time on one CPU core.
pub fn desk_student() -> StudentConfig {
    StudentConfig {
        enc_depth: 8,
        width: 192,
        enc_heads: 6,
        dec_heads: 6,
        ..StudentConfig::default()
    }
}

/// One line of the line-delimited metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_reg: f64,
    pub loss_dis: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
}

struct MetricsLogger {
    file: std::fs::File,
    timestamps: bool,
}

impl MetricsLogger {
    fn create(path: &Path, timestamps: bool) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, timestamps })
    }

    fn log(&mut self, mut rec: MetricRecord) -> Result<()> {
        use std::io::Write;
        if self.timestamps {
            rec.ts = Some(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            );
        }
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io("metrics.jsonl", e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs_run: usize,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Fills the feature cache for every dataset entry that is missing from it.
/// Teacher inputs are the clean (un-augmented) images.
pub fn ensure_cache(teacher: &Teacher, dataset: &Dataset, cache_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut cache = FeatureCache::open(cache_dir, teacher.device())?;
    let mut written = 0usize;
    for (idx, entry) in dataset.entries.iter().enumerate() {
        if cache.contains(&entry.id) {
            continue;
        }
        let img = dataset.image(idx)?.to_tensor(teacher.device())?;
        let feats = teacher.features(&img, &entry.label)?;
        cache.write(&entry.id, &feats)?;
        written += 1;
    }
    Ok(written)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub student: Student,
    pub params: ParamSet,
    align: Option<AlignParams>,
    teacher: Option<Teacher>,
    cache: Option<FeatureCache>,
    codec: LabelCodec,
    device: Device,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    dataset: Dataset,
    images: Vec<Image32>,
}

impl Trainer {
    /// Loads the dataset and teacher per config. The teacher is only built
    /// when distillation is active.
    pub fn new(config: TrainConfig, device: &Device) -> Result<Self> {
        let teacher = if config.distill_active() {
            Some(Teacher::load(config.teacher_config(), device)?)
        } else {
            None
        };
        Self::with_teacher(config, teacher, device)
    }

    /// Same, but with a caller-supplied teacher (tests use shrunk dims).
    pub fn with_teacher(
        config: TrainConfig,
        teacher: Option<Teacher>,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let codec = LabelCodec::new(config.student.max_label_len);
        if !config.data_dir.exists() {
            return Err(Error::MissingDataset(config.data_dir.clone()));
        }
        let dataset = Dataset::load_with_codec(&config.data_dir, &codec)?;
        if dataset.is_empty() {
            return Err(Error::DatasetEmpty(config.data_dir.display().to_string()));
        }

        // Deterministic train/val split.
        let mut indices: Vec<usize> = (0..dataset.len()).collect();
        let mut split_rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
        indices.shuffle(&mut split_rng);
        let n_val = ((dataset.len() as f64 * config.val_frac) as usize).min(dataset.len() - 1);
        let (val_idx, train_idx) = indices.split_at(n_val);

        let mut params = ParamSet::new();
        let mut student_rng = ChaCha20Rng::seed_from_u64(config.seed);
        let student = Student::init(
            &mut params,
            &mut student_rng,
            config.student.clone(),
            DType::F32,
            device,
        )?;

        let (align, cache) = if config.distill_active() {
            let teacher_ref = teacher.as_ref().ok_or_else(|| Error::Config {
                key: "teacher".into(),
                reason: "distillation enabled but no teacher supplied".into(),
            })?;
            let mut align_rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(0xa11e));
            let dims = AlignDims {
                student_enc_tokens: config.student.enc_tokens(),
                student_width: config.student.width,
                teacher_image_tokens: teacher_ref.dims.image_tokens(),
                teacher_image_width: teacher_ref.dims.vision_width,
                decoder_len: codec.target_len(),
                teacher_ctx: teacher_ref.dims.n_ctx,
                teacher_text_width: teacher_ref.dims.text_width,
                gam_hidden: 768,
            };
            let align = AlignParams::init(&mut params, &mut align_rng, &dims, DType::F32, device)?;
            let cache = if config.use_cache {
                let dir = config
                    .cache_dir
                    .clone()
                    .unwrap_or_else(|| config.out_dir.join("teacher_cache"));
                ensure_cache(teacher_ref, &dataset, &dir)?;
                Some(FeatureCache::open(&dir, device)?)
            } else {
                None
            };
            (Some(align), cache)
        } else {
            (None, None)
        };

        // Images are small enough to hold in memory for desk-scale corpora.
        let mut images = Vec::with_capacity(dataset.len());
        for i in 0..dataset.len() {
            images.push(dataset.image(i)?);
        }

        Ok(Self {
            student,
            params,
            align,
            teacher,
            cache,
            codec,
            device: device.clone(),
            train_idx: train_idx.to_vec(),
            val_idx: val_idx.to_vec(),
            dataset,
            images,
            config,
        })
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    fn student_batch(&self, idxs: &[usize], epoch: usize) -> Result<(Tensor, Vec<Vec<u32>>)> {
        let mut imgs = Vec::with_capacity(idxs.len());
        let mut targets = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let img = if self.config.augment {
                let aug_seed = self
                    .config
                    .seed
                    .wrapping_mul(0x9e37_79b9)
                    .wrapping_add((epoch as u64) << 32)
                    .wrapping_add(i as u64);
                augment(&self.images[i], aug_seed)
            } else {
                self.images[i].clone()
            };
            imgs.push(img);
            targets.push(self.codec.encode_label(&self.dataset.entries[i].label)?);
        }
        Ok((Image32::batch(&imgs, &self.device)?, targets))
    }

    fn teacher_batch(&self, idxs: &[usize], images01: &Tensor) -> Result<TeacherBatch> {
        if let Some(cache) = &self.cache {
            let feats: Vec<_> = idxs
                .iter()
                .map(|&i| cache.read(&self.dataset.entries[i].id))
                .collect::<Result<_>>()?;
            return TeacherBatch::stack(&feats);
        }
        let teacher = self.teacher.as_ref().expect("teacher present when distilling");
        let mut feats = Vec::with_capacity(idxs.len());
        for (bi, &i) in idxs.iter().enumerate() {
            let img = if self.config.clean_teacher_input {
                self.images[i].to_tensor(&self.device)?
            } else {
                images01.get(bi)?
            };
            feats.push(teacher.features(&img, &self.dataset.entries[i].label)?);
        }
        TeacherBatch::stack(&feats)
    }

    /// Greedy-decode accuracy on the held-out split (train split when no
    /// samples are held out).
    pub fn validate(&self) -> Result<f64> {
        let idxs = if self.val_idx.is_empty() {
            &self.train_idx
        } else {
            &self.val_idx
        };
        let mut correct = 0usize;
        for chunk in idxs.chunks(self.config.batch_size.max(1)) {
            let imgs: Vec<Image32> = chunk.iter().map(|&i| self.images[i].clone()).collect();
            let batch = Image32::batch(&imgs, &self.device)?;
            let preds = self.student.recognize(&batch)?;
            for (&i, pred) in chunk.iter().zip(&preds) {
                if *pred == self.dataset.entries[i].label {
                    correct += 1;
                }
            }
        }
        Ok(100.0 * correct as f64 / idxs.len() as f64)
    }

    pub fn train(&mut self) -> Result<TrainOutcome> {
        std::fs::create_dir_all(&self.config.out_dir)
            .map_err(|e| Error::io(&self.config.out_dir, e))?;
        let metrics_path = self.config.out_dir.join("metrics.jsonl");
        let ckpt_path = self.config.out_dir.join("checkpoint.safetensors");
        let mut logger = MetricsLogger::create(&metrics_path, self.config.log_timestamps)?;
        let meta = CheckpointMeta::new(&self.config.student, &self.codec);

        let vars = self.params.vars();
        let mut optimizer = Adam::new(vars.len());
        let steps_per_epoch = self.train_idx.len().div_ceil(self.config.batch_size);
        let total_steps = steps_per_epoch * self.config.epochs;

        let mut step = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        let mut final_val = 0.0;
        let mut epochs_run = 0usize;
        'epochs: for epoch in 0..self.config.epochs {
            let mut order = self.train_idx.clone();
            let mut rng = ChaCha20Rng::seed_from_u64(
                self.config.seed.wrapping_add(1).wrapping_add(epoch as u64),
            );
            order.shuffle(&mut rng);

            for chunk in order.chunks(self.config.batch_size) {
                let lr = lr_at(step, total_steps, self.config.lr, self.config.warmup_frac);
                let (images01, targets) = self.student_batch(chunk, epoch)?;
                let stages = self.student.forward_train(&images01, &targets)?;
                let reg = recognition_loss(&stages.logits, &targets, LabelCodec::PAD)?;

                let (total, reg_v, dis_v) = if let Some(align) = &self.align {
                    let teacher_feats = self.teacher_batch(chunk, &images01)?;
                    let dis = loss_sds(&stages, &teacher_feats, align, &self.config.loss)?;
                    let dis = (dis * self.config.distill_lambda)?;
                    let reg_v = scalar_f64(&reg)?;
                    let dis_v = scalar_f64(&dis)?;
                    ((reg + dis)?, reg_v, dis_v)
                } else {
                    let reg_v = scalar_f64(&reg)?;
                    (reg, reg_v, 0.0)
                };
                let total_v = reg_v + dis_v;
                for (term, value) in [("recognition", reg_v), ("distill", dis_v)] {
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            step,
                            term: term.into(),
                            value,
                        });
                    }
                }

                let grads = total.backward()?;
                optimizer.step(&vars, &grads, lr, self.config.clip_norm)?;
                logger.log(MetricRecord {
                    step,
                    epoch,
                    lr,
                    loss_total: total_v,
                    loss_reg: reg_v,
                    loss_dis: dis_v,
                    val_acc: None,
                    ts: None,
                })?;
                step += 1;
            }

            epochs_run = epoch + 1;
            final_val = self.validate()?;
            logger.log(MetricRecord {
                step,
                epoch,
                lr: lr_at(step.saturating_sub(1), total_steps, self.config.lr, self.config.warmup_frac),
                loss_total: 0.0,
                loss_reg: 0.0,
                loss_dis: 0.0,
                val_acc: Some(final_val),
                ts: None,
            })?;
            if final_val > best_val {
                best_val = final_val;
                save_checkpoint(&ckpt_path, &self.params, &meta)?;
            }
            if let Some(target) = self.config.early_stop_acc {
                if final_val >= target {
                    break 'epochs;
                }
            }
        }
        if best_val == f64::NEG_INFINITY {
            save_checkpoint(&ckpt_path, &self.params, &meta)?;
            best_val = final_val;
        }

        Ok(TrainOutcome {
            steps: step,
            epochs_run,
            best_val_acc: best_val,
            final_val_acc: final_val,
            checkpoint: ckpt_path,
            metrics: metrics_path,
        })
    }
}
