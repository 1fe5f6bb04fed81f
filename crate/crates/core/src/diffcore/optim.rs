use crate::error::{Error, Result};

use super::params::ParamStore;
use super::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
    steps: u64,
}

/// Adaptive-moment optimizer with bias correction.
///
/// Moments are kept per parameter and advance only on steps where the
/// parameter actually received a gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Adam {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            moments: Vec::new(),
        })
    }

    pub fn step_count(&self, index: usize) -> u64 {
        self.moments
            .get(index)
            .and_then(|m| m.as_ref())
            .map_or(0, |m| m.steps)
    }

    /// Applies one update to every parameter holding a gradient, then
    /// clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.has_any_grad() {
            return Err(Error::MissingGradients);
        }
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in self.moments.iter_mut().zip(ids) {
            let param = store.param_mut(id);
            let Some(grad) = param.grad.take() else {
                continue;
            };
            let n = grad.numel();
            let m = slot.get_or_insert_with(|| Moments {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
                steps: 0,
            });
            if m.first.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: vec![m.first.len()],
                    rhs: vec![n],
                });
            }
            m.steps += 1;
            let bc1 = 1.0 - b1.powi(m.steps as i32);
            let bc2 = 1.0 - b2.powi(m.steps as i32);
            let step = T::from_f64(self.learning_rate / bc1);
            let bc2_sqrt = T::from_f64(bc2.sqrt());
            let (tb1, tb2, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(self.eps));
            let one = T::one();
            for (((w, &g), mf), ms) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *mf = tb1 * *mf + (one - tb1) * g;
                *ms = tb2 * *ms + (one - tb2) * g * g;
                *w -= step * *mf / (ms.sqrt() / bc2_sqrt + eps);
            }
        }
        store.clear_grads();
        Ok(())
    }
}
