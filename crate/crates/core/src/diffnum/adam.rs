use std::collections::BTreeMap;

use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment accumulators are keyed by parameter
/// name so one optimizer instance can follow a model across steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step over all parameters. Gradients must be populated;
    /// they are cleared afterwards.
    pub fn update(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, tensor) in params.iter_mut() {
            let g = tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("adam_update: missing grad on '{name}'")))?
                .to_vec();
            let n = tensor.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::dimension(
                    "adam_update",
                    format!("moment length {} vs parameter '{name}' numel {}", m.len(), n),
                ));
            }
            let mut delta = vec![0.0; n];
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                delta[i] = -self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.apply_update(&delta);
            tensor.clear_grad();
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [(String, &mut Tensor)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in params.iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            let scaled: Option<Vec<f64>> = t.grad().map(|g| g.iter().map(|v| v * scale).collect());
            if let Some(s) = scaled {
                t.clear_grad();
                t.accumulate_grad(&s).expect("same shape");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = one_param(1.5);
        w.set_grad_zero();
        let mut adam = AdamState::new(0.1);
        let mut params = vec![("w".to_string(), &mut w)];
        adam.update(&mut params).unwrap();
        assert_eq!(w.values(), &[1.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // with constant gradient g, bias correction gives m_hat/√v_hat = sign(g)
        let mut w = one_param(0.0);
        w.accumulate_grad(&[0.37]).unwrap();
        let mut adam = AdamState::new(0.05);
        let mut params = vec![("w".to_string(), &mut w)];
        adam.update(&mut params).unwrap();
        assert!((w.values()[0] - (-0.05)).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut w = one_param(0.0);
        let mut adam = AdamState::new(0.05);
        let mut params = vec![("w".to_string(), &mut w)];
        let err = adam.update(&mut params).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w−3)², f'(w) = 2(w−3); 500 steps at lr 0.1 reach |w−3| < 1e-2
        let mut w = one_param(0.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..500 {
            let g = 2.0 * (w.values()[0] - 3.0);
            w.accumulate_grad(&[g]).unwrap();
            let mut params = vec![("w".to_string(), &mut w)];
            adam.update(&mut params).unwrap();
        }
        assert!((w.values()[0] - 3.0).abs() < 1e-2, "w = {}", w.values()[0]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut a = Tensor::vector(vec![0.0, 0.0]);
        a.accumulate_grad(&[30.0, 40.0]).unwrap();
        let mut params = vec![("a".to_string(), &mut a)];
        let pre = clip_global_norm(&mut params, 10.0);
        assert!((pre - 50.0).abs() < 1e-12);
        let g = a.grad().unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 10.0).abs() < 1e-9);
    }
}
