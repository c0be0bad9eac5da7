//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: per-parameter moments and the shared step counter.
///
/// Updates are lazy per element. An element that no forward pass read during
/// this step keeps its value and its moments bit-for-bit, weight decay
/// included. This is what keeps the unused tail of a sliced weight matrix
/// frozen while smaller sub-networks train.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of the parameters in `ids` at learning rate `lr`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        ids: &[ParamId],
        grads: &ParamGrads,
        lr: f64,
    ) -> Result<()> {
        for &id in ids {
            match grads.get(id) {
                Some(g) if g.grad.len() == store.get(id).len() => {}
                Some(_) => {
                    return Err(Error::Contract(format!(
                        "gradient for {} has the wrong length",
                        store.name(id)
                    )))
                }
                None => {
                    return Err(Error::Contract(format!(
                        "no gradient for parameter {}",
                        store.name(id)
                    )))
                }
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for &id in ids {
            let g = grads.get(id).expect("checked above");
            let param = store.get_mut(id).data_mut();
            let m = self.moments[id.index()].get_or_insert_with(|| Moments {
                first: vec![0.0; param.len()],
                second: vec![0.0; param.len()],
            });
            for i in 0..param.len() {
                if !g.touched[i] {
                    continue;
                }
                let gi = g.grad[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * gi;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m.first[i] / bc1;
                let v_hat = m.second[i] / bc2;
                param[i] -= lr * weight_decay * param[i];
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.peak * (remaining / decay_span as f64).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGrad;
    use crate::tensor::Tensor;

    fn scalar_setup(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(w)).unwrap();
        (s, id)
    }

    fn dense(id: ParamId, grad: Vec<f64>) -> ParamGrads {
        let mut g = ParamGrads::new(id.index() + 1);
        let n = grad.len();
        *g.entry_mut(id, n) = ParamGrad {
            grad,
            touched: vec![true; n],
        };
        g
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut s, id) = scalar_setup(0.37);
        let mut opt = AdamW::new(cfg(0.0));
        opt.step(&mut s, &[id], &dense(id, vec![0.0]), 0.1).unwrap();
        assert_eq!(s.get(id).data()[0], 0.37);
    }

    #[test]
    fn single_step_hand_value() {
        // m_hat = v_hat = 1 after bias correction, so w = 1 - 0.1 / (1 + 1e-8)
        let (mut s, id) = scalar_setup(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        opt.step(&mut s, &[id], &dense(id, vec![1.0]), 0.1).unwrap();
        let w = s.get(id).data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        // Scalar simulation oracle, written out independently of the optimizer.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut m, mut v, mut w_ref) = (0.0, 0.0, 1.0);
        let mut expected = Vec::new();
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            w_ref -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            expected.push(w_ref);
        }
        let (mut s, id) = scalar_setup(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        let mut seen = vec![1.0];
        for _ in 0..2 {
            opt.step(&mut s, &[id], &dense(id, vec![1.0]), lr).unwrap();
            seen.push(s.get(id).data()[0]);
        }
        assert!(seen.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(&seen[1..], expected.as_slice());
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn missing_gradient_is_contract_violation() {
        let (mut s, id) = scalar_setup(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        let err = opt.step(&mut s, &[id], &ParamGrads::new(1), 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn only_passed_params_and_touched_elements_change() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::full(&[3], 1.0)).unwrap();
        let b = s.insert("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut grads = ParamGrads::new(2);
        *grads.entry_mut(a, 3) = ParamGrad {
            grad: vec![1.0, 1.0, 0.0],
            touched: vec![true, false, false],
        };
        *grads.entry_mut(b, 2) = ParamGrad {
            grad: vec![1.0, 1.0],
            touched: vec![true, true],
        };
        let mut opt = AdamW::new(cfg(0.5));
        opt.step(&mut s, &[a], &grads, 0.1).unwrap();
        assert!(s.get(a).data()[0] < 1.0);
        assert_eq!(&s.get(a).data()[1..], &[1.0, 1.0]);
        assert_eq!(s.get(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule {
            peak: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(60) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr(110), 0.0);
        assert_eq!(s.lr(500), 0.0);
    }
}
