use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily on the first
/// step and must keep the parameter layout of that step.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Training { param: name.to_string() });
            }
        }
        if self.first.is_empty() {
            self.first = params.tensors().iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - beta1.powi(t));
        let bc2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2, lr, eps) = (T::of(beta1), T::of(beta2), T::of(lr), T::of(eps));
        let one = T::one();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for ((w, &g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = scalar_store(0.3);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut p = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-7, "{w}");
    }

    #[test]
    fn optimizer_is_stateful() {
        let mut once = scalar_store(0.0);
        let mut twice = scalar_store(0.0);
        let mut a = Adam::new(AdamConfig::with_lr(0.1));
        let mut b = Adam::new(AdamConfig::with_lr(0.1));
        a.step(&mut once, &[Tensor::scalar(1.0)]).unwrap();
        b.step(&mut twice, &[Tensor::scalar(1.0)]).unwrap();
        b.step(&mut twice, &[Tensor::scalar(1.0)]).unwrap();
        assert_ne!(once, twice);
        assert_eq!(b.steps(), 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        match opt.step(&mut p, &[Tensor::scalar(f64::NAN)]) {
            Err(Error::Training { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::<f64>::full(&[4], 1.0), Tensor::full(&[5], 1.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 3.0).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);

        let mut small = vec![Tensor::<f64>::full(&[1], 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }
}
