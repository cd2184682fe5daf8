//! Alignment heads mapping student features into teacher feature spaces.
//!
//! AAM reshapes a token sequence with a trainable projection matrix P and a
//! linear map W1, then row-normalizes. GAM bridges the student class token
//! to the teacher text class token through a two-layer MLP with a ReLU.
//! Both are train-time only and are stored under the `distill/` namespace.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::params::{randn, trunc_normal, ParamSet};
use crate::tensor_util::l2_normalize_rows;

#[derive(Debug, Clone)]
pub struct AamParams {
    /// (N_F, N_f) token-count projection.
    pub p: Tensor,
    /// (D_f, D_F) feature-width projection.
    pub w1: Tensor,
}

impl AamParams {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        n_teacher: usize,
        n_student: usize,
        d_student: usize,
        d_teacher: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let p = params.register(
            &format!("distill/{name}/p"),
            randn(rng, &[n_teacher, n_student], 0.02, dtype, device)?,
        )?;
        let w1 = params.register(
            &format!("distill/{name}/w1"),
            trunc_normal(rng, &[d_student, d_teacher], 0.02, dtype, device)?,
        )?;
        Ok(Self {
            p: p.as_tensor().clone(),
            w1: w1.as_tensor().clone(),
        })
    }

    /// `norm(P x f x W1)` for one `(N_f, D_f)` sequence.
    pub fn project(&self, f: &Tensor) -> Result<Tensor> {
        l2_normalize_rows(&self.project_pre_norm(f)?)
    }

    /// The linear part of the projection, before row normalization.
    pub fn project_pre_norm(&self, f: &Tensor) -> Result<Tensor> {
        self.check(f, 0)?;
        Ok(self.p.matmul(f)?.matmul(&self.w1)?)
    }

    /// Batched projection: `(B, N_f, D_f)` -> `(B, N_F, D_F)`, rows unit-norm.
    pub fn project_batch(&self, f: &Tensor) -> Result<Tensor> {
        self.check(f, 1)?;
        let p = self.p.unsqueeze(0)?;
        let w1 = self.w1.unsqueeze(0)?;
        let out = p.broadcast_matmul(f)?.broadcast_matmul(&w1)?;
        l2_normalize_rows(&out)
    }

    fn check(&self, f: &Tensor, batch_dims: usize) -> Result<()> {
        let dims = f.dims();
        if dims.len() != 2 + batch_dims {
            return Err(Error::ShapeMismatch(format!(
                "aam input rank {} unexpected: {:?}",
                dims.len(),
                dims
            )));
        }
        let (n_f, d_f) = (dims[batch_dims], dims[batch_dims + 1]);
        let (_, p_nf) = self.p.dims2()?;
        let (w_df, _) = self.w1.dims2()?;
        if n_f != p_nf || d_f != w_df {
            return Err(Error::ShapeMismatch(format!(
                "aam expects ({p_nf}, {w_df}) features, got ({n_f}, {d_f})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GamParams {
    /// (D_student, hidden)
    pub w1: Tensor,
    /// (hidden, D_teacher_text)
    pub w2: Tensor,
}

impl GamParams {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        d_student: usize,
        hidden: usize,
        d_out: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let w1 = params.register(
            "distill/gam/w1",
            trunc_normal(rng, &[d_student, hidden], 0.02, dtype, device)?,
        )?;
        let w2 = params.register(
            "distill/gam/w2",
            trunc_normal(rng, &[hidden, d_out], 0.02, dtype, device)?,
        )?;
        Ok(Self {
            w1: w1.as_tensor().clone(),
            w2: w2.as_tensor().clone(),
        })
    }

    /// `norm(ReLU(cls x W1) x W2)`; accepts `(D,)` or batched `(B, D)`.
    pub fn project(&self, cls: &Tensor) -> Result<Tensor> {
        let batched = cls.dims().len() == 2;
        let cls2 = if batched { cls.clone() } else { cls.unsqueeze(0)? };
        let h = cls2.matmul(&self.w1)?.relu()?;
        let out = l2_normalize_rows(&h.matmul(&self.w2)?)?;
        Ok(if batched { out } else { out.squeeze(0)? })
    }
}

/// The full set of alignment heads for the seven-term distillation sum.
pub struct AlignParams {
    pub encoder_aam: Vec<AamParams>,
    pub gam: GamParams,
    pub decoder_aam: Vec<AamParams>,
}

pub struct AlignDims {
    pub student_enc_tokens: usize,
    pub student_width: usize,
    pub teacher_image_tokens: usize,
    pub teacher_image_width: usize,
    pub decoder_len: usize,
    pub teacher_ctx: usize,
    pub teacher_text_width: usize,
    pub gam_hidden: usize,
}

impl AlignParams {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        dims: &AlignDims,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut encoder_aam = Vec::new();
        for i in 1..=3 {
            encoder_aam.push(AamParams::init(
                params,
                rng,
                &format!("aam_enc{i}"),
                dims.teacher_image_tokens,
                dims.student_enc_tokens,
                dims.student_width,
                dims.teacher_image_width,
                dtype,
                device,
            )?);
        }
        let gam = GamParams::init(
            params,
            rng,
            dims.student_width,
            dims.gam_hidden,
            dims.teacher_text_width,
            dtype,
            device,
        )?;
        let mut decoder_aam = Vec::new();
        for i in 1..=3 {
            decoder_aam.push(AamParams::init(
                params,
                rng,
                &format!("aam_dec{i}"),
                dims.teacher_ctx,
                dims.decoder_len,
                dims.student_width,
                dims.teacher_text_width,
                dtype,
                device,
            )?);
        }
        Ok(Self {
            encoder_aam,
            gam,
            decoder_aam,
        })
    }
}
