use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;

/// L2-normalizes the last dimension, guarding zero rows with a small epsilon
/// in the denominator.
pub fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(candle_core::D::Minus1)?.sqrt()?;
    // Clamp instead of adding eps so well-conditioned rows normalize exactly.
    let norm = norm.maximum(NORM_EPS)?;
    Ok(t.broadcast_div(&norm)?)
}

/// Keeps only the rows of a `(N, D)` tensor where `mask[i]` is true.
pub fn select_rows(t: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (n, _d) = t.dims2().map_err(|_| {
        Error::ShapeMismatch(format!("select_rows expects a 2-d tensor, got {:?}", t.dims()))
    })?;
    if mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} != rows {}",
            mask.len(),
            n
        )));
    }
    let idx: Vec<u32> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i as u32))
        .collect();
    let idx = Tensor::from_vec(idx, (mask.iter().filter(|&&m| m).count(),), t.device())?;
    Ok(t.index_select(&idx, 0)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.reshape(())?.to_scalar::<f64>()?)
}

pub fn check_same_shape(f: &Tensor, big: &Tensor) -> Result<()> {
    if f.dims() != big.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            f.dims(),
            big.dims()
        )));
    }
    Ok(())
}
