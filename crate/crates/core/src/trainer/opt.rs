//! Hand-rolled Adam with global-norm gradient clipping and a linear-warmup
//! constant-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::tensor_util::scalar_f64;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update over `vars`; the slice order must stay fixed across steps.
    /// Gradients are scaled down when their global L2 norm exceeds
    /// `clip_norm`. Vars without a gradient this step are skipped.
    pub fn step(
        &mut self,
        vars: &[Var],
        grads: &GradStore,
        lr: f64,
        clip_norm: f64,
    ) -> Result<()> {
        assert_eq!(vars.len(), self.m.len(), "optimizer built for another model");
        self.step += 1;
        let picked: Vec<Option<&Tensor>> = vars.iter().map(|v| grads.get(v)).collect();

        let mut sq_sum = 0f64;
        for g in picked.iter().flatten() {
            sq_sum += scalar_f64(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq_sum.sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (var, grad)) in vars.iter().zip(&picked).enumerate() {
            let Some(grad) = grad else { continue };
            // Detach so the moment buffers do not chain every step's graph.
            let g = grad.detach().affine(scale, 0.0)?;
            let m = match &self.m[i] {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match &self.v[i] {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.affine(lr, 0.0)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.sub(&update)?)?;
            self.m[i] = Some(m.detach());
            self.v[i] = Some(v.detach());
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_frac` of training, constant after.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else {
        base_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn adam_minimizes_quadratic() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(vec![5f32, -3.0], (2,), &dev).unwrap()).unwrap();
        let mut opt = Adam::new(1);
        for _ in 0..400 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&[x.clone()], &grads, 0.05, 0.0).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "did not converge: {v:?}");
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(vec![1000f32], (1,), &dev).unwrap()).unwrap();
        let before = x.as_tensor().to_vec1::<f32>().unwrap()[0];
        let mut opt = Adam::new(1);
        let loss = (x.as_tensor().sqr().unwrap().sum_all().unwrap() * 1000.0).unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&[x.clone()], &grads, 0.1, 5.0).unwrap();
        let after = x.as_tensor().to_vec1::<f32>().unwrap()[0];
        // First Adam step magnitude is at most lr regardless of gradient size.
        assert!((before - after).abs() <= 0.1 + 1e-6);
    }

    #[test]
    fn warmup_schedule() {
        assert!((lr_at(0, 100, 1.0, 0.02) - 0.5).abs() < 1e-12);
        assert!((lr_at(1, 100, 1.0, 0.02) - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(50, 100, 1.0, 0.02), 1.0);
        // Zero warmup still performs a first step at full rate.
        assert_eq!(lr_at(0, 10, 0.3, 0.0), 0.3);
    }

    #[test]
    fn unused_vars_are_skipped() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(vec![2f32], (1,), &dev).unwrap()).unwrap();
        let y = Var::from_tensor(&Tensor::from_vec(vec![7f32], (1,), &dev).unwrap()).unwrap();
        let mut opt = Adam::new(2);
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&[x.clone(), y.clone()], &grads, 0.1, 0.0).unwrap();
        assert_eq!(y.as_tensor().to_vec1::<f32>().unwrap()[0], 7.0);
        let _ = Tensor::zeros((1,), DType::F32, &dev).unwrap();
    }
}
