//! RMSProp with a fixed learning rate.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::params::Params;

/// Update rule per tensor element with gradient `g` and accumulator `a`:
///
/// ```text
/// a <- rho * a + (1 - rho) * g^2
/// theta <- theta - lr * g / sqrt(a + eps)
/// ```
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: IndexMap<String, ArrayD<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            rho: 0.9,
            eps: 1e-8,
            acc: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &IndexMap<String, ArrayD<f64>>) {
        for (name, g) in grads {
            let theta = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer step on unknown parameter {name}"));
            let acc = self
                .acc
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            ndarray::Zip::from(&mut *acc).and(g).for_each(|a, &gi| {
                *a = self.rho * *a + (1.0 - self.rho) * gi * gi;
            });
            ndarray::Zip::from(theta)
                .and(&*acc)
                .and(g)
                .for_each(|t, &a, &gi| {
                    *t -= self.lr * gi / (a + self.eps).sqrt();
                });
        }
    }

    /// Accumulator state for checkpointing, keyed by parameter name.
    pub fn state(&self) -> &IndexMap<String, ArrayD<f64>> {
        &self.acc
    }

    pub fn restore(&mut self, state: IndexMap<String, ArrayD<f64>>) {
        self.acc = state;
    }
}
