//! Minimal transformer building blocks.
//!
//! Hand-rolled on top of candle Vars so that initialization comes from our
//! seeded RNG (bit-reproducible runs) and every module works in both f32
//! and f64 (the gradient checks run in double precision).

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::params::{randn, trunc_normal, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// x * sigmoid(1.702 x), the activation CLIP uses.
    QuickGelu,
    Relu,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu_erf()?,
            Activation::QuickGelu => (x * candle_nn::ops::sigmoid(&(x * 1.702)?)?)?,
            Activation::Relu => x.relu()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor, // (in, out)
    pub b: Tensor, // (out,)
}

impl Linear {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        let w = params.register(&format!("{name}/w"), trunc_normal(rng, &[d_in, d_out], std, dtype, device)?)?;
        let b = params.register(&format!("{name}/b"), Tensor::zeros((d_out,), dtype, device)?)?;
        Ok(Self {
            w: w.as_tensor().clone(),
            b: b.as_tensor().clone(),
        })
    }

    /// Forward over the last dim; any leading shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("linear input must have a last dim");
        let flat = x.reshape((dims[..dims.len() - 1].iter().product::<usize>(), d_in))?;
        let out = flat.matmul(&self.w)?.broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.w.dims2()?.1;
        Ok(out.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Tensor,
    pub b: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let g = params.register(&format!("{name}/g"), Tensor::ones((dim,), dtype, device)?)?;
        let b = params.register(&format!("{name}/b"), Tensor::zeros((dim,), dtype, device)?)?;
        Ok(Self {
            g: g.as_tensor().clone(),
            b: b.as_tensor().clone(),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        dim: usize,
        heads: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        assert_eq!(dim % heads, 0);
        Ok(Self {
            wq: Linear::init(params, rng, &format!("{name}/q"), dim, dim, dtype, device)?,
            wk: Linear::init(params, rng, &format!("{name}/k"), dim, dim, dtype, device)?,
            wv: Linear::init(params, rng, &format!("{name}/v"), dim, dim, dtype, device)?,
            wo: Linear::init(params, rng, &format!("{name}/o"), dim, dim, dtype, device)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        Ok(x.reshape((b, t, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention with queries from `q_in` and keys/values from `kv_in`.
    /// `mask` is an optional additive `(T_q, T_kv)` bias (e.g. causal).
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t_q, d) = q_in.dims3()?;
        let hd = d / self.heads;
        let q = self.split_heads(&self.wq.forward(q_in)?)?;
        let k = self.split_heads(&self.wk.forward(kv_in)?)?;
        let v = self.split_heads(&self.wv.forward(kv_in)?)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?; // (B, H, T_q, hd)
        let merged = out.transpose(1, 2)?.contiguous()?.reshape((b, t_q, d))?;
        self.wo.forward(&merged)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// number above.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(data, (t, t), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::init(params, rng, &format!("{name}/fc1"), dim, hidden, dtype, device)?,
            fc2: Linear::init(params, rng, &format!("{name}/fc2"), hidden, dim, dtype, device)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// Pre-LN transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        act: Activation,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::init(params, &format!("{name}/ln1"), dim, dtype, device)?,
            attn: MultiHeadAttention::init(params, rng, &format!("{name}/attn"), dim, heads, dtype, device)?,
            ln2: LayerNorm::init(params, &format!("{name}/ln2"), dim, dtype, device)?,
            mlp: Mlp::init(params, rng, &format!("{name}/mlp"), dim, dim * mlp_ratio, act, dtype, device)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Pre-LN transformer decoder block: causal self-attention, cross-attention
/// over the encoder memory, then the MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::init(params, &format!("{name}/ln1"), dim, dtype, device)?,
            self_attn: MultiHeadAttention::init(params, rng, &format!("{name}/self_attn"), dim, heads, dtype, device)?,
            ln2: LayerNorm::init(params, &format!("{name}/ln2"), dim, dtype, device)?,
            cross_attn: MultiHeadAttention::init(params, rng, &format!("{name}/cross_attn"), dim, heads, dtype, device)?,
            ln3: LayerNorm::init(params, &format!("{name}/ln3"), dim, dtype, device)?,
            mlp: Mlp::init(params, rng, &format!("{name}/mlp"), dim, dim * mlp_ratio, Activation::Gelu, dtype, device)?,
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(causal))?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, None)?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Embedding lookup table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor, // (vocab, dim)
}

impl Embedding {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        vocab: usize,
        dim: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let table = params.register(name, randn(rng, &[vocab, dim], 0.02, dtype, device)?)?;
        Ok(Self {
            table: table.as_tensor().clone(),
        })
    }

    /// ids: (B, T) -> (B, T, dim)
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = ids.reshape((b * t,))?;
        let out = self.table.index_select(&flat, 0)?;
        let dim = self.table.dims2()?.1;
        Ok(out.reshape((b, t, dim))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn encoder_block_shapes() {
        let dev = Device::Cpu;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let blk = EncoderBlock::init(
            &mut ps, &mut rng, "b0", 32, 4, 4, Activation::Gelu, DType::F32, &dev,
        )
        .unwrap();
        let x = Tensor::randn(0f32, 1f32, (2, 7, 32), &dev).unwrap();
        let y = blk.forward(&x, None).unwrap();
        assert_eq!(y.dims(), &[2, 7, 32]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let dev = Device::Cpu;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let blk = DecoderBlock::init(&mut ps, &mut rng, "d0", 16, 2, 4, DType::F32, &dev).unwrap();
        let mem = Tensor::randn(0f32, 1f32, (1, 5, 16), &dev).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 6, 16), &dev).unwrap();
        let mask = causal_mask(6, DType::F32, &dev).unwrap();
        let y0 = blk.forward(&x, &mem, &mask).unwrap();
        // Perturb the last position; earlier outputs must not move.
        let noise = Tensor::randn(0f32, 1f32, (1, 1, 16), &dev).unwrap();
        let x2 = Tensor::cat(&[x.narrow(1, 0, 5).unwrap(), (x.narrow(1, 5, 1).unwrap() + noise).unwrap()], 1).unwrap();
        let y1 = blk.forward(&x2, &mem, &mask).unwrap();
        let diff = (y0.narrow(1, 0, 5).unwrap() - y1.narrow(1, 0, 5).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-6, "causal leak: {diff}");
    }
}
