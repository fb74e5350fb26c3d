use super::{Gradients, ParamId, ParamStore, Tensor};
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
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
///
/// Bias correction uses a per-parameter step count, so a parameter that was
/// skipped for a while (e.g. frozen CRF transitions) starts from fresh
/// moments and a fresh correction when it is first updated.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", config.lr)));
        }
        let first: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let second = first.clone();
        Ok(Self {
            config,
            t: 0,
            first,
            second,
            steps: vec![0; store.len()],
        })
    }

    /// Number of `step` calls performed.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.second[id.index()]
    }

    /// Applies one update to every trainable parameter not listed in `skip`.
    /// Parameters absent from `grads` are updated with a zero gradient.
    ///
    /// Any non-finite gradient aborts the whole update before a single value
    /// is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, skip: &[ParamId]) -> Result<()> {
        for (id, g) in grads.iter() {
            if store.is_trainable(id) && !g.is_finite() {
                return Err(Error::NanGradient(store.name(id).to_string()));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) || skip.contains(&id) {
                continue;
            }
            let k = id.index();
            self.steps[k] += 1;
            let step = self.steps[k] as i32;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - beta2.powi(step);
            let g = grads.get(id);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value), true).unwrap();
        (store, id)
    }

    fn grad(id: ParamId, g: f64) -> Gradients {
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Tensor::scalar(g));
        grads
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let (mut store, id) = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store, &grad(id, 1.0), &[]).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let expected = -0.001 / (1.0 + 1e-8);
        assert_abs_diff_eq!(store.get(id).item(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(store.get(id).item(), -0.000999999, epsilon = 1e-9);
        assert_eq!(adam.t(), 1);
    }

    #[test]
    fn zero_gradient_with_zero_moments_is_a_no_op() {
        let (mut store, id) = single(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store, &grad(id, 0.0), &[]).unwrap();
        adam.step(&mut store, &Gradients::new(1), &[]).unwrap();
        assert_eq!(store.get(id).item(), 0.7);
        assert_eq!(adam.first_moment(id).item(), 0.0);
    }

    #[test]
    fn constant_gradient_keeps_step_size_near_lr() {
        let (mut store, id) = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store, &grad(id, 3.0), &[]).unwrap();
        let after_one = store.get(id).item();
        adam.step(&mut store, &grad(id, 3.0), &[]).unwrap();
        let second_delta = store.get(id).item() - after_one;
        // m_hat = v_hat.sqrt() = g exactly for constant g
        assert_abs_diff_eq!(second_delta, -0.001 * 3.0 / (3.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(second_delta.abs(), 0.001, epsilon = 1e-8);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_anything() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0), true).unwrap();
        let b = store.add("b", Tensor::scalar(2.0), true).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        let mut grads = Gradients::new(2);
        grads.accumulate(a, &Tensor::scalar(1.0));
        grads.accumulate(b, &Tensor::scalar(f64::NAN));
        let err = adam.step(&mut store, &grads, &[]).unwrap_err();
        assert!(matches!(err, Error::NanGradient(ref name) if name == "b"));
        assert_eq!(store.get(a).item(), 1.0);
        assert_eq!(adam.t(), 0);
    }

    #[test]
    fn skipped_parameters_keep_zero_moments() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.0), true).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        for _ in 0..3 {
            adam.step(&mut store, &grad(a, 1.0), &[a]).unwrap();
        }
        assert_eq!(store.get(a).item(), 0.0);
        assert_eq!(adam.first_moment(a).item(), 0.0);
        assert_eq!(adam.second_moment(a).item(), 0.0);
        // first real update behaves like a first Adam step
        adam.step(&mut store, &grad(a, 1.0), &[]).unwrap();
        assert_abs_diff_eq!(store.get(a).item(), -0.001 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn non_positive_lr_is_a_config_error() {
        let (store, _) = single(0.0);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(matches!(AdamState::new(cfg, &store), Err(Error::Config { .. })));
    }
}
