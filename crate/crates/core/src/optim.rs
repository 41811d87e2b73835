//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Named gradients produced by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Grads<T: Real = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn new() -> Self {
        Grads { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.map.insert(name, grad);
    }

    /// Adds `grad` into an existing entry, or inserts it.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) {
        match self.map.get_mut(name) {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Named parameter tensors with per-parameter Adam moment accumulators.
///
/// BTreeMap keeps iteration (and therefore serialization and update order)
/// deterministic. A store has a single writer during an update step;
/// read-only evaluation may fan out across threads.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f64> {
    tensors: BTreeMap<String, Tensor<T>>,
    moment1: BTreeMap<String, Tensor<T>>,
    moment2: BTreeMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            moment1: BTreeMap::new(),
            moment2: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        self.moment1.insert(name.clone(), Tensor::zeros(tensor.shape()));
        self.moment2.insert(name.clone(), Tensor::zeros(tensor.shape()));
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Drops moment state and the step counter, keeping the tensors.
    /// Used when loading inference-only parameters from a model file.
    pub fn reset_optimizer_state(&mut self) {
        for (name, t) in &self.tensors {
            self.moment1.insert(name.clone(), Tensor::zeros(t.shape()));
            self.moment2.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        self.step = 0;
    }
}

/// Adam hyper-parameters. Defaults are the standard ones.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction. Every parameter in the store must
/// have a gradient; the step counter advances once per call.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig) -> Result<()> {
    let t = store.step + 1;
    let beta1 = T::from_f64_lossy(cfg.beta1);
    let beta2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let corr2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);

    for (name, param) in store.tensors.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if !grad.same_shape(param) {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    name,
                    grad.shape(),
                    param.shape()
                ),
            });
        }
        let m = self_entry(&mut store.moment1, name);
        let v = self_entry(&mut store.moment2, name);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = beta1 * m.data()[i] + (one - beta1) * g;
            let vi = beta2 * v.data()[i] + (one - beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            param.data_mut()[i] = param.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.step = t;
    Ok(())
}

fn self_entry<'a, T: Real>(map: &'a mut BTreeMap<String, Tensor<T>>, name: &str) -> &'a mut Tensor<T> {
    map.get_mut(name).expect("moment tensors exist for every parameter")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with("w", vec![0.3, -0.7]);
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::from_vec(vec![0.0, 0.0]));
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.3, -0.7]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g² on the first step, so the update is lr·g/(|g|+eps).
        let mut s = store_with("w", vec![0.0]);
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::from_vec(vec![1.0]));
        let cfg = AdamConfig::with_lr(1e-4);
        adam_step(&mut s, &g, &cfg).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w + 1e-4).abs() < 1e-11, "w = {w}");
    }

    #[test]
    fn repeated_identical_gradients_do_not_grow_steps() {
        let mut s = store_with("w", vec![0.0]);
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::from_vec(vec![0.5]));
        let cfg = AdamConfig::with_lr(1e-2);
        let mut prev = f64::INFINITY;
        let mut last_w = 0.0f64;
        for _ in 0..8 {
            adam_step(&mut s, &g, &cfg).unwrap();
            let w = s.get("w").unwrap().data()[0];
            let delta = (w - last_w).abs();
            assert!(delta <= prev + 1e-15, "step grew: {delta} > {prev}");
            prev = delta;
            last_w = w;
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with("w", vec![1.0]);
        let g = Grads::new();
        let err = adam_step(&mut s, &g, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
    }

    #[test]
    fn moment_shapes_track_parameters() {
        let s = store_with("w", vec![1.0, 2.0, 3.0]);
        assert_eq!(s.moment1.get("w").unwrap().shape(), &[3]);
        assert_eq!(s.moment2.get("w").unwrap().shape(), &[3]);
    }
}
