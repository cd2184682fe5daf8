//! Distillation objectives.
//!
//! First-order baselines (L1, cosine, KL), the second-order linguistic
//! consistency loss (Gram-matrix intra term plus temperature-scaled
//! contrastive inter term), the seven-term stage-wise distillation total,
//! and the final training objective.
//!
//! All functions take `(N, D)` feature tensors whose rows have already been
//! unit-normalized by the alignment modules, return 0-dim tensors, and stay
//! on the autodiff graph.

use candle_core::{Tensor, D};
#[cfg(test)]
use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::align::AlignParams;
use crate::error::{Error, Result};
use crate::student::StudentStages;
use crate::teacher::TeacherBatch;
use crate::tensor_util::{check_same_shape, l2_normalize_rows, select_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    Lcl,
    L1,
    Cos,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GamLossMode {
    /// LCL over class tokens stacked across the batch (N = batch size).
    LclBatch,
    /// Plain point-wise L1 per sample.
    L1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub base_loss: BaseLoss,
    pub gam_loss: GamLossMode,
    /// Selects which of the seven stage terms are active, in the order given
    /// by [`stage_pairing`].
    pub stage_mask: [bool; 7],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 0.1,
            tau: 0.03,
            base_loss: BaseLoss::Lcl,
            gam_loss: GamLossMode::LclBatch,
            stage_mask: [true; 7],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::NonPositiveTau(self.tau));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config {
                key: "lambda".into(),
                reason: "loss weights must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// True when the distillation part of the objective is identically zero.
    pub fn distill_disabled(&self) -> bool {
        self.stage_mask.iter().all(|&m| !m)
    }
}

/// One term of the seven-term stage-wise distillation sum. Indices are
/// 1-based stage numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePair {
    /// Student encoder stage i against teacher image stage i, via AAM.
    EncoderImage { enc: usize, img: usize },
    /// Student encoder stage-4 class token against the teacher text class
    /// token, via GAM.
    EncoderClsText,
    /// Student decoder stage i against teacher text stage 4-i, via AAM.
    DecoderText { dec: usize, text: usize },
}

/// The fixed pairing table: three encoder/image terms, the GAM bridge, and
/// three decoder/text terms with the text stage order reversed.
pub fn stage_pairing() -> [StagePair; 7] {
    [
        StagePair::EncoderImage { enc: 1, img: 1 },
        StagePair::EncoderImage { enc: 2, img: 2 },
        StagePair::EncoderImage { enc: 3, img: 3 },
        StagePair::EncoderClsText,
        StagePair::DecoderText { dec: 1, text: 3 },
        StagePair::DecoderText { dec: 2, text: 2 },
        StagePair::DecoderText { dec: 3, text: 1 },
    ]
}

/// Point-wise L1: mean absolute elementwise difference.
pub fn loss_l1(f: &Tensor, big: &Tensor) -> Result<Tensor> {
    check_same_shape(f, big)?;
    Ok((f - big)?.abs()?.mean_all()?)
}

/// Intra-relationship term: L1 distance between the two Gram matrices with
/// coefficient 1/N^2.
pub fn loss_intra(f: &Tensor, big: &Tensor) -> Result<Tensor> {
    check_same_shape(f, big)?;
    let gram_f = f.matmul(&f.t()?)?;
    let gram_big = big.matmul(&big.t()?)?;
    Ok((gram_f - gram_big)?.abs()?.mean_all()?)
}

/// Inter-relationship term: cross-entropy over the temperature-scaled
/// cross-similarity matrix with diagonal targets, averaged over rows.
pub fn loss_inter(f: &Tensor, big: &Tensor, tau: f64) -> Result<Tensor> {
    check_same_shape(f, big)?;
    if tau <= 0.0 {
        return Err(Error::NonPositiveTau(tau));
    }
    let (n, _d) = f.dims2().map_err(|_| {
        Error::ShapeMismatch(format!("loss_inter expects 2-d input, got {:?}", f.dims()))
    })?;
    let logits = (f.matmul(&big.t()?)? / tau)?;
    let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let eye = Tensor::eye(n, f.dtype(), f.device())?;
    let diag_sum = (log_probs * eye)?.sum_all()?;
    Ok((diag_sum.neg()? / n as f64)?)
}

/// Linguistic consistency loss: lambda1 * intra + lambda2 * inter.
pub fn loss_lcl(f: &Tensor, big: &Tensor, lambda1: f64, lambda2: f64, tau: f64) -> Result<Tensor> {
    let intra = (loss_intra(f, big)? * lambda1)?;
    let inter = (loss_inter(f, big, tau)? * lambda2)?;
    Ok((intra + inter)?)
}

/// Mean over rows of (1 - cosine similarity).
pub fn loss_cos(f: &Tensor, big: &Tensor) -> Result<Tensor> {
    check_same_shape(f, big)?;
    let f_n = l2_normalize_rows(f)?;
    let big_n = l2_normalize_rows(big)?;
    let cos = (f_n * big_n)?.sum(D::Minus1)?;
    Ok((1.0 - cos.mean_all()?)?)
}

/// Mean over rows of KL(softmax(F_row) || softmax(f_row)), teacher as the
/// reference distribution.
pub fn loss_kl(f: &Tensor, big: &Tensor) -> Result<Tensor> {
    check_same_shape(f, big)?;
    let log_q = candle_nn::ops::log_softmax(f, D::Minus1)?;
    let log_p = candle_nn::ops::log_softmax(big, D::Minus1)?;
    let p = log_p.exp()?;
    let kl = (p * (log_p - log_q)?)?.sum(D::Minus1)?;
    Ok(kl.mean_all()?)
}

/// Applies the configured base consistency loss to one aligned pair.
pub fn apply_base_loss(f: &Tensor, big: &Tensor, w: &LossWeights) -> Result<Tensor> {
    match w.base_loss {
        BaseLoss::Lcl => loss_lcl(f, big, w.lambda1, w.lambda2, w.tau),
        BaseLoss::L1 => loss_l1(f, big),
        BaseLoss::Cos => loss_cos(f, big),
        BaseLoss::Kl => loss_kl(f, big),
    }
}

/// The stage-wise distillation total over a batch.
///
/// Encoder terms compare against teacher image stages, the GAM term bridges
/// the encoder class token to the teacher text class token, and decoder
/// terms compare against teacher text stages in reversed order. Teacher
/// text rows beyond the end-of-text are dropped before the loss; AAM/GAM
/// outputs come back row-normalized and the teacher side is normalized here.
pub fn loss_sds(
    student: &StudentStages,
    teacher: &TeacherBatch,
    align: &AlignParams,
    w: &LossWeights,
) -> Result<Tensor> {
    w.validate()?;
    let device = student.logits.device().clone();
    let dtype = student.logits.dtype();
    let mut total = Tensor::zeros((), dtype, &device)?;
    let batch = student.batch_size()?;

    for (term, pair) in stage_pairing().iter().enumerate() {
        if !w.stage_mask[term] {
            continue;
        }
        match *pair {
            StagePair::EncoderImage { enc, img } => {
                let f = student
                    .enc
                    .get(enc - 1)
                    .ok_or(Error::MissingStage(enc))?;
                let big = teacher
                    .image_stages
                    .get(img - 1)
                    .ok_or(Error::MissingStage(img))?;
                let proj = align.encoder_aam[enc - 1].project_batch(f)?;
                let big_n = l2_normalize_rows(&big.detach())?;
                let mut acc = Tensor::zeros((), dtype, &device)?;
                for b in 0..batch {
                    let l = apply_base_loss(&proj.get(b)?, &big_n.get(b)?, w)?;
                    acc = (acc + l)?;
                }
                total = (total + (acc / batch as f64)?)?;
            }
            StagePair::EncoderClsText => {
                let cls = student.enc_cls.get(3).ok_or(Error::MissingStage(4))?;
                let proj = align.gam.project(cls)?;
                let big_n = l2_normalize_rows(&teacher.text_cls.detach())?;
                let l = match w.gam_loss {
                    GamLossMode::LclBatch => {
                        loss_lcl(&proj, &big_n, w.lambda1, w.lambda2, w.tau)?
                    }
                    GamLossMode::L1 => loss_l1(&proj, &big_n)?,
                };
                total = (total + l)?;
            }
            StagePair::DecoderText { dec, text } => {
                let f = student
                    .dec
                    .get(dec - 1)
                    .ok_or(Error::MissingStage(dec))?;
                let big = teacher
                    .text_stages
                    .get(text - 1)
                    .ok_or(Error::MissingStage(text))?;
                let proj = align.decoder_aam[dec - 1].project_batch(f)?;
                let big_n = l2_normalize_rows(&big.detach())?;
                let mut acc = Tensor::zeros((), dtype, &device)?;
                for b in 0..batch {
                    let mask = &teacher.text_mask[b];
                    let l = apply_base_loss(
                        &select_rows(&proj.get(b)?, mask)?,
                        &select_rows(&big_n.get(b)?, mask)?,
                        w,
                    )?;
                    acc = (acc + l)?;
                }
                total = (total + (acc / batch as f64)?)?;
            }
        }
    }
    Ok(total)
}

/// Character cross-entropy over teacher-forced logits.
///
/// `logits[b, t]` predicts `targets[b, t + 1]`; PAD positions (and the final
/// position, which has no successor) are excluded from the mean.
pub fn recognition_loss(logits: &Tensor, targets: &[Vec<u32>], pad: u32) -> Result<Tensor> {
    let (b, t, v) = logits.dims3().map_err(|_| {
        Error::ShapeMismatch(format!("logits must be (B,T,V), got {:?}", logits.dims()))
    })?;
    if targets.len() != b || targets.iter().any(|s| s.len() != t) {
        return Err(Error::ShapeMismatch(format!(
            "targets do not match logits batch/length ({b},{t})"
        )));
    }
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    // Next-char targets with the tail padded out of the loss.
    let mut next: Vec<u32> = Vec::with_capacity(b * t);
    let mut mask: Vec<f32> = Vec::with_capacity(b * t);
    for seq in targets {
        for t_idx in 0..t {
            let tgt = if t_idx + 1 < t { seq[t_idx + 1] } else { pad };
            next.push(tgt.min(v as u32 - 1));
            mask.push(if tgt == pad { 0.0 } else { 1.0 });
        }
    }
    let next = Tensor::from_vec(next, (b, t, 1), logits.device())?;
    let mask_t = Tensor::from_vec(mask.clone(), (b, t), logits.device())?
        .to_dtype(logits.dtype())?;
    let picked = log_probs.gather(&next, D::Minus1)?.squeeze(D::Minus1)?;
    let n_real: f32 = mask.iter().sum();
    if n_real == 0.0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let summed = (picked * mask_t)?.sum_all()?;
    Ok((summed.neg()? / n_real as f64)?)
}

/// Final objective: recognition cross-entropy plus the distillation total,
/// unweighted sum.
pub fn loss_total(recognition: &Tensor, distill: &Tensor) -> Result<Tensor> {
    Ok((recognition + distill)?)
}
