//! Adam optimizer with bias correction.

use std::collections::HashMap;

use super::{Gradients, Parameter, Real};
use crate::error::{Error, Result};

/// Adam state. One instance per trained model; slots are keyed by
/// parameter name.
pub struct Adam<T: Real = f32> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    slots: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One in-place update. Every parameter must have a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter<T>],
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        for p in params.iter() {
            if grads.param(p).is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));

        for p in params.iter_mut() {
            let g = grads.param(p).unwrap();
            let n = p.tensor.numel();
            let (m, v) = self
                .slots
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let mut data = p.data().to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}
