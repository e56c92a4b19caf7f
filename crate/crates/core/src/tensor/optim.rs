use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment of a parameter, once it has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments
            .get(id.index())
            .and_then(Option::as_ref)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every trainable parameter and zeroes its gradient.
    /// Every trainable parameter must carry a gradient (possibly all zeros).
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let trainable = store.trainable_ids();
        if let Some(&id) = trainable.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(Error::Contract(format!(
                "trainable parameter {} has no gradient",
                store.name(id)
            )));
        }
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.eps);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (bc1t, bc2t) = (T::lit(bc1), T::lit(bc2));
        for id in trainable {
            let tensor = store.get_mut(id);
            let n = tensor.numel();
            let grad = tensor.take_grad().expect("checked above");
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (((x, &g), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1t * *m + (T::one() - b1t) * g;
                *v = b2t * *v + (T::one() - b2t) * g * g;
                let mhat = *m / bc1t;
                let vhat = *v / bc2t;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
