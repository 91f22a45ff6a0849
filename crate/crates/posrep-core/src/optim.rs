//! Adam with bias correction and the inverse-square-root warmup schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr = factor · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
/// The two branches meet exactly at `step == warmup`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::config("noam_lr: step must be >= 1"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// Per-parameter Adam state. Moment buffers are allocated lazily on the
/// first step so the state can be created before shapes are known.
pub struct OptimizerState<T> {
    beta1: T,
    beta2: T,
    epsilon: T,
    step: u64,
    first_moments: Vec<Tensor<T>>,
    second_moments: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn adam(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            epsilon: T::from_f64(epsilon),
            step: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    /// Adam defaults used throughout: beta1 0.9, beta2 0.98, eps 1e-8.
    pub fn adam_default() -> Self {
        Self::adam(0.9, 0.98, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over aligned parameter/gradient lists. Parameters
    /// without a gradient this step (e.g. unused embedding rows are still
    /// dense, but a whole tensor may sit outside the loss) are treated as
    /// zero-gradient: moments decay, parameters still move by the decayed
    /// momentum. No gradient clipping.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.first_moments.is_empty() {
            for p in params.iter() {
                self.first_moments.push(Tensor::zeros(p.shape()));
                self.second_moments.push(Tensor::zeros(p.shape()));
            }
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("grad shape {:?} vs param {:?}", g.shape(), p.shape()),
                    ));
                }
                if !g.is_all_finite() {
                    return Err(Error::NonFinite("gradient".to_string()));
                }
            }
        }
        self.step += 1;
        let lr = T::from_f64(lr);
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = self.first_moments[i].data_mut();
            let v = self.second_moments[i].data_mut();
            let pd = p.data_mut();
            let zero = T::zero();
            let gslice = g.as_ref().map(|g| g.data());
            for j in 0..pd.len() {
                let gj = gslice.map_or(zero, |s| s[j]);
                m[j] = self.beta1 * m[j] + (one - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_branches_meet_at_warmup() {
        let d = 512;
        let w = 8000u64;
        let decay = 2.0 * (d as f64).powf(-0.5) * (w as f64).powf(-0.5);
        let ramp = 2.0 * (d as f64).powf(-0.5) * w as f64 * (w as f64).powf(-1.5);
        assert!((decay - ramp).abs() < 1e-15);
        assert!((noam_lr(w, d, w, 2.0).unwrap() - decay).abs() < 1e-15);
    }

    #[test]
    fn noam_reference_values() {
        let at_warmup = noam_lr(8000, 512, 8000, 2.0).unwrap();
        assert!((at_warmup - 9.8821e-4).abs() < 1e-8, "{at_warmup}");
        let at_start = noam_lr(1, 512, 8000, 2.0).unwrap();
        assert!((at_start - 1.2353e-7).abs() < 1e-10, "{at_start}");
    }

    #[test]
    fn noam_rejects_step_zero() {
        assert!(noam_lr(0, 512, 8000, 2.0).is_err());
    }

    #[test]
    fn zero_gradient_zero_moments_leaves_params_unchanged() {
        let mut opt = OptimizerState::<f32>::adam_default();
        let mut params = vec![Tensor::new(&[2], vec![1.5f32, -0.5]).unwrap()];
        let grads = vec![Some(Tensor::zeros(&[2]))];
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params[0].data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // g=1 on a scalar: bias-corrected ratio is 1, so |update| ≈ lr.
        let mut opt = OptimizerState::<f64>::adam_default();
        let mut params = vec![Tensor::scalar(0.0f64)];
        let grads = vec![Some(Tensor::scalar(1.0f64))];
        opt.step(&mut params, &grads, 0.01).unwrap();
        let delta = params[0].item().abs();
        assert!((delta - 0.01).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn identical_params_follow_identical_trajectories() {
        let mut opt = OptimizerState::<f32>::adam_default();
        let mut params = vec![Tensor::scalar(0.3f32), Tensor::scalar(0.3f32)];
        for step in 1..=20 {
            let g = (step as f32 * 0.37).sin();
            let grads = vec![Some(Tensor::scalar(g)), Some(Tensor::scalar(g))];
            opt.step(&mut params, &grads, 0.005).unwrap();
            assert_eq!(params[0].item(), params[1].item());
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut opt = OptimizerState::<f32>::adam_default();
        let mut params = vec![Tensor::scalar(1.0f32)];
        let grads = vec![Some(Tensor::scalar(f32::NAN))];
        assert!(opt.step(&mut params, &grads, 0.01).is_err());
    }

    #[test]
    fn step_counter_increases() {
        let mut opt = OptimizerState::<f32>::adam_default();
        let mut params = vec![Tensor::scalar(1.0f32)];
        for want in 1..=3 {
            opt.step(&mut params, &[Some(Tensor::scalar(0.1f32))], 0.01).unwrap();
            assert_eq!(opt.step_count(), want);
        }
    }
}
