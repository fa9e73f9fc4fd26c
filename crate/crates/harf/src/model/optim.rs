//! Adaptive-moment optimizer step with decoupled weight decay.
//!
//! Frozen tensors and buffers are skipped entirely: neither the parameter
//! nor its moments move. Moments and parameters are rounded through f32
//! after every update, so training that passes through a checkpoint
//! continues bit-identically to training that never stopped.

use serde::{Deserialize, Serialize};

use super::{GradStore, ModelError, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn with_lr(&self, learning_rate: f64) -> Self {
        Self { learning_rate, ..self.clone() }
    }
}

impl ModelState {
    /// One optimizer step over mean gradients. Returns an error naming the
    /// parameter if any gradient entry is non-finite.
    pub fn step(&mut self, grads: &GradStore, opt: &OptimizerConfig) -> Result<(), ModelError> {
        if grads.tensors.len() != self.tensors.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "gradient store has {} tensors, model has {}",
                grads.tensors.len(),
                self.tensors.len()
            )));
        }
        let t = self.step + 1;
        let bc1 = 1.0 - opt.beta1.powi(t as i32);
        let bc2 = 1.0 - opt.beta2.powi(t as i32);

        for i in 0..self.tensors.len() {
            if self.buffers.contains(&i) || self.frozen.contains(&i) {
                continue;
            }
            let g = &grads.tensors[i];
            if g.shape != self.tensors[i].shape {
                return Err(ModelError::ShapeMismatch(format!(
                    "gradient shape {:?} does not match {} {:?}",
                    g.shape, self.names[i], self.tensors[i].shape
                )));
            }
            if let Some(_bad) = g.data.iter().find(|x| !x.is_finite()) {
                return Err(ModelError::NonFiniteGradient(self.names[i].clone()));
            }
            let p = &mut self.tensors[i].data;
            let m = &mut self.opt_m[i].data;
            let v = &mut self.opt_v[i].data;
            for j in 0..p.len() {
                let gj = g.data[j];
                let mj = ((opt.beta1 * m[j] + (1.0 - opt.beta1) * gj) as f32) as f64;
                let vj = ((opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj) as f32) as f64;
                m[j] = mj;
                v[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let update = m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p[j];
                p[j] = ((p[j] - opt.learning_rate * update) as f32) as f64;
            }
        }
        self.step = t;
        Ok(())
    }

    /// Optimizer moment of a parameter, for tests and diagnostics.
    pub fn moment(&self, name: &str) -> Option<(&crate::tensor::Tensor, &crate::tensor::Tensor)> {
        let i = *self.index.get(name)?;
        Some((&self.opt_m[i], &self.opt_v[i]))
    }

    #[cfg(test)]
    pub(crate) fn freeze_all_for_test(&mut self) {
        self.frozen = (0..self.tensors.len()).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FreezePolicy, ModelConfig};
    use crate::tensor::Tensor;

    fn tiny_model() -> ModelState {
        ModelState::init(ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 16,
            max_len: 16,
            dropout_rate: 0.0,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn all_frozen_leaves_state_unchanged_except_step() {
        let mut m = tiny_model();
        m.freeze_all_for_test();
        let before: Vec<Tensor> = m.tensor_names().iter().map(|n| m.tensor(n).unwrap().clone()).collect();
        let mut grads = GradStore::zeros_like(&m);
        for t in &mut grads.tensors {
            for x in &mut t.data {
                *x = 0.5;
            }
        }
        m.step(&grads, &OptimizerConfig::default()).unwrap();
        assert_eq!(m.step, 1);
        for (name, before) in m.tensor_names().to_vec().iter().zip(&before) {
            assert_eq!(m.tensor(name).unwrap(), before, "{name} moved");
        }
    }

    #[test]
    fn two_hand_computed_steps_match() {
        // single named scalar parameter exercised through the same update
        // rule, hand-executed with the identical f32 rounding policy
        let mut m = tiny_model();
        let name = "decoder.output.b";
        let idx0_value = m.tensor(name).unwrap().data[0];
        assert_eq!(idx0_value, 0.0);

        let opt = OptimizerConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 };
        let g1 = 0.3f64;
        let g2 = -0.7f64;

        let mut grads = GradStore::zeros_like(&m);
        let gi = m.tensor_names().iter().position(|n| n == name).unwrap();
        grads.tensors[gi].data[0] = g1;
        m.step(&grads, &opt).unwrap();
        grads.tensors[gi].data[0] = g2;
        m.step(&grads, &opt).unwrap();

        // oracle: hand-executed update equations
        let (mut p, mut mm, mut vv) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, g1), (2, g2)] {
            mm = ((0.9 * mm + 0.1 * g) as f32) as f64;
            vv = ((0.999 * vv + 0.001 * g * g) as f32) as f64;
            let m_hat = mm / (1.0 - 0.9f64.powi(t));
            let v_hat = vv / (1.0 - 0.999f64.powi(t));
            p = ((p - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.02 * p)) as f32) as f64;
        }
        let got = m.tensor(name).unwrap().data[0];
        assert!((got - p).abs() < 1e-12, "{got} vs {p}");
        assert_eq!(m.step, 2);
    }

    #[test]
    fn zero_gradients_without_decay_leave_parameters() {
        let mut m = tiny_model();
        let before = m.tensor("shared.embed").unwrap().clone();
        let grads = GradStore::zeros_like(&m);
        let opt = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        m.step(&grads, &opt).unwrap();
        assert_eq!(m.tensor("shared.embed").unwrap(), &before);
    }

    #[test]
    fn non_finite_gradient_is_reported_with_name() {
        let mut m = tiny_model();
        let mut grads = GradStore::zeros_like(&m);
        let gi = m.tensor_names().iter().position(|n| n == "encoder.layer0.attn.wq.w").unwrap();
        grads.tensors[gi].data[3] = f64::NAN;
        let err = m.step(&grads, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteGradient(ref n) if n == "encoder.layer0.attn.wq.w"), "{err}");
    }

    #[test]
    fn mlm_policy_freezes_exactly_the_contracted_set() {
        let mut m = ModelState::init(ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 16,
            max_len: 16,
            dropout_rate: 0.0,
            seed: 1,
        })
        .unwrap();
        m.set_freeze(FreezePolicy::MlmPolicy).unwrap();
        for name in m.tensor_names() {
            let expect = name == "shared.embed"
                || name == "shared.pos_enc"
                || name.starts_with("encoder.layer0.")
                || name.starts_with("encoder.layer1.")
                || name.starts_with("decoder.layer0.")
                || name.starts_with("decoder.layer1.");
            assert_eq!(m.is_frozen(name), expect, "{name}");
        }
        assert!(!m.is_frozen("encoder.layer2.attn.wq.w"));
        assert!(!m.is_frozen("decoder.output.w"));

        m.set_freeze(FreezePolicy::None).unwrap();
        assert!(m.tensor_names().iter().all(|n| !m.is_frozen(n)));
    }

    #[test]
    fn mlm_policy_needs_two_layers_per_stack() {
        let mut m = ModelState::init(ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            max_len: 16,
            dropout_rate: 0.0,
            seed: 1,
        })
        .unwrap();
        assert!(matches!(m.set_freeze(FreezePolicy::MlmPolicy), Err(ModelError::FreezeViolation(_))));
    }
}
