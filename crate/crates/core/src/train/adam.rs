use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{ParamHandle, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates, one pair per parameter storage.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of storages that currently hold a moment pair.
    pub fn tracked(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }

    /// One bias-corrected update of every handle in `handles`, reading the
    /// accumulated gradients in `store`. Gradients are checked first, so a
    /// non-finite gradient leaves every parameter untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, handles: &BTreeSet<ParamHandle>, lr: f64) -> Result<()> {
        for &h in handles {
            if !store.grad(h).all_finite() {
                return Err(Error::NonFiniteGrad(store.name(h).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for &h in handles {
            let idx = h.index();
            if self.moments.len() <= idx {
                self.moments.resize(idx + 1, None);
            }
            let (value, grad) = store.value_and_grad_mut(h);
            let (m, v) =
                self.moments[idx].get_or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let g = g.as_f64();
                let m_new = beta1 * mi.as_f64() + (1.0 - beta1) * g;
                let v_new = beta2 * vi.as_f64() + (1.0 - beta2) * g * g;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *p = T::of(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitRule;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new(0);
        let h = store.register("theta", &[1], InitRule::Zeros).unwrap();
        use crate::tensor::ParamSource;
        store.accumulate_grad(h.index(), &Tensor::full(&[1], 1.0));
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store, &BTreeSet::from([h]), 0.1).unwrap();
        assert!((store.value(h).data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        use crate::tensor::ParamSource;
        let mut store = ParamStore::<f32>::new(0);
        let a = store.register("a", &[2], InitRule::Constant(1.0)).unwrap();
        let b = store.register("b.weight", &[1], InitRule::Constant(1.0)).unwrap();
        store.accumulate_grad(a.index(), &Tensor::full(&[2], 1.0));
        store.accumulate_grad(b.index(), &Tensor::full(&[1], f32::NAN));
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(&mut store, &BTreeSet::from([a, b]), 0.1).unwrap_err();
        assert!(err.to_string().contains("b.weight"));
        assert_eq!(store.value(a).data(), &[1.0, 1.0]);
        assert_eq!(adam.steps(), 0);
    }
}
