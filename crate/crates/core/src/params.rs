//! Trainable parameter registry.
//!
//! Parameters are named `candle` Vars created from a seeded RNG so that two
//! runs with the same seed build bit-identical models. Names double as
//! checkpoint keys; everything distillation-only lives under the
//! `distill/` prefix so inference loads can drop it.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use crate::error::Result;

pub const DISTILL_PREFIX: &str = "distill/";

#[derive(Default)]
pub struct ParamSet {
    params: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites registered values from a name -> tensor map. Names absent
    /// from `values` are left at their initialized state; extra names in
    /// `values` are ignored.
    pub fn load_from(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter() {
            if let Some(t) = values.get(name) {
                var.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params
            .values()
            .map(|v| v.as_tensor().elem_count())
            .sum()
    }
}

/// Samples a normal tensor from the given RNG (not the device RNG, so runs
/// are reproducible regardless of global state).
pub fn randn(
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Truncated normal: resamples anything beyond two standard deviations.
pub fn trunc_normal(
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            data.push(x);
        }
    }
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub fn uniform(
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
