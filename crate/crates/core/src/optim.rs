//! AdamW with decoupled weight decay and bias correction.

use crate::error::{shape_err, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Optimizer state: one pair of moment tensors per parameter, shared scalars.
#[derive(Debug, Clone)]
pub struct AdamW<E: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Tensor<E>>,
    second_moment: Vec<Tensor<E>>,
}

impl<E: Real> AdamW<E> {
    pub fn new(params: &ParamStore<E>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, params: &mut ParamStore<E>) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(shape_err!(
                "optimizer built for {} params, got {}",
                self.first_moment.len(),
                params.len()
            ));
        }
        self.step += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.beta2);
        let corr1 = E::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let corr2 = E::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let decay = E::from_f64(self.lr * self.weight_decay);

        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_update {
                p.zero_grad();
                continue;
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + one_m_b1 * g[j];
                v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                let m_hat = m[j] * corr1;
                let v_hat = v[j] * corr2;
                w[j] = w[j] - lr * (m_hat / (v_hat.sqrt() + eps)) - decay * w[j];
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm; an error if any gradient is non-finite.
pub fn clip_grad_norm<E: Real>(params: &mut ParamStore<E>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in params.iter() {
        for &g in p.grad.data() {
            sq += g.to_f64() * g.to_f64();
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(crate::error::Error::Diverged(format!(
            "gradient norm is {norm}"
        )));
    }
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_parameter_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::full(&[3], 1.25));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store).unwrap();
        assert!(store.get(crate::param::PId(0)).value.data().iter().all(|&x| x == 1.25));
    }

    #[test]
    fn positive_gradient_moves_parameter_down() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(2.0));
        store.get_mut(id).grad = Tensor::scalar(0.7);
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        opt.step(&mut store).unwrap();
        assert!(store.get(id).value.data()[0] < 2.0);
        // Gradients are cleared by the step.
        assert_eq!(store.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = (w - 3)^2, gradient 2 (w - 3).
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(0.0));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        for _ in 0..200 {
            let w = store.get(id).value.data()[0];
            store.get_mut(id).grad = Tensor::scalar(2.0 * (w - 3.0));
            opt.step(&mut store).unwrap();
        }
        let w = store.get(id).value.data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::zeros(&[2]));
        store.get_mut(id).grad = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let norm = clip_grad_norm(&mut store, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = store.get(id).grad.data();
        let clipped = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((clipped - 1.0).abs() < 1e-9);
    }
}
