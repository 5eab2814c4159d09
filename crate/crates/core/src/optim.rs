//! AdamW with decoupled weight decay.
//!
//! Update per parameter: decay `p *= 1 - lr*wd`, then the bias-corrected
//! Adam move `p -= lr * m_hat / (sqrt(v_hat) + eps)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, weight_decay: 0.0, epsilon: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("weight_decay >= 0 and epsilon > 0 required".into()));
        }
        Ok(())
    }
}

/// Moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, param_shapes: &[&[usize]]) -> Result<Self> {
        config.validate()?;
        let m = param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let v = param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, m, v, step: 0 })
    }

    /// Convenience constructor from a live parameter list.
    pub fn for_params(config: AdamWConfig, params: &[&Tensor]) -> Result<Self> {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// One optimizer step over an ordered parameter/gradient list.
    ///
    /// Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(&self.m[i]) || !g.same_shape(&self.m[i]) {
                return Err(Error::Shape(format!("tensor {i} shape mismatch in adamw step")));
            }
            g.require_finite("gradient")?;
        }

        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);

        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                if c.weight_decay != 0.0 {
                    p[j] *= 1.0 - c.lr * c.weight_decay;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = scalar(1.5);
        let g = scalar(0.0);
        let mut st = AdamWState::for_params(AdamWConfig::with_lr(0.1), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_hand_computed() {
        // p=1, g=1, lr=0.1: bias-corrected m_hat = v_hat = 1, so
        // p' = 1 - 0.1/(1 + 1e-8).
        let mut p = scalar(1.0);
        let g = scalar(1.0);
        let mut st = AdamWState::for_params(AdamWConfig::with_lr(0.1), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_step() {
        // wd=0.1, g=0, lr=0.1, p=1 -> p' = 1 - 0.1*0.1 = 0.99.
        let mut p = scalar(1.0);
        let g = scalar(0.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.1, ..AdamWConfig::default() };
        let mut st = AdamWState::for_params(cfg, &[&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_leaves_state_untouched() {
        let mut p = scalar(1.0);
        let g = scalar(f64::NAN);
        let mut st = AdamWState::for_params(AdamWConfig::default(), &[&p]).unwrap();
        let err = st.step(&mut [&mut p], &[&g]).unwrap_err();
        assert_eq!(err.category(), "numeric");
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn deterministic_and_step_increments() {
        let run = || {
            let mut p = scalar(0.7);
            let g = scalar(0.3);
            let mut st = AdamWState::for_params(AdamWConfig::with_lr(0.05), &[&p]).unwrap();
            for _ in 0..10 {
                st.step(&mut [&mut p], &[&g]).unwrap();
            }
            (p.data()[0], st.step_count())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, 10);
        assert_eq!(sb, 10);
    }
}
