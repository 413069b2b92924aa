use crate::{ParamStore, Result, Scalar, TensorData, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Standard Adam with bias correction. State is laid out in parameter-store
/// order, so a fixed (seed, data) pair yields identical trajectories.
pub struct Adam<T> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<TensorData<T>>,
    v: Vec<TensorData<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|p| TensorData::zeros(p.shape().to_vec()))
            .collect();
        let v = params
            .tensors()
            .iter()
            .map(|p| TensorData::zeros(p.shape().to_vec()))
            .collect();
        Self { cfg, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` pairs with parameter `i`; `None` means zero
    /// gradient for this step (the moments still decay).
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<TensorData<T>>],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        self.t += 1;
        let lr = T::cast(self.cfg.lr);
        let b1 = T::cast(self.cfg.beta1);
        let b2 = T::cast(self.cfg.beta2);
        let eps = T::cast(self.cfg.eps);
        let one = T::one();
        let bc1 = T::cast(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::cast(1.0 - self.cfg.beta2.powi(self.t as i32));

        for i in 0..params.len() {
            let p = params.tensor_mut(i);
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        detail: format!(
                            "param {} has shape {:?}, grad {:?}",
                            i,
                            p.shape(),
                            g.shape()
                        ),
                    });
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i].as_ref().map(|g| g.data()[j]).unwrap_or(T::zero());
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", TensorData::vector(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(vec![1.5, -2.5]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, &[Some(TensorData::vector(vec![0.0, 0.0]))])
            .unwrap();
        assert_eq!(s.tensor(0).data(), &[1.5, -2.5]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        // At t=1, m_hat/sqrt(v_hat) = sign(g) up to the epsilon correction.
        let mut s = store_with(vec![0.0, 0.0]);
        let cfg = AdamConfig::with_lr(0.01);
        let mut opt = Adam::new(cfg, &s);
        opt.step(&mut s, &[Some(TensorData::vector(vec![3.0, -0.2]))])
            .unwrap();
        assert!((s.tensor(0).data()[0] + 0.01).abs() < 1e-6);
        assert!((s.tensor(0).data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = sum (w - c)^2, gradient 2(w - c)
        let target = [3.0, -1.0, 0.5];
        let mut s = store_with(vec![0.0, 0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &s);
        let loss = |w: &[f64]| -> f64 {
            w.iter()
                .zip(target.iter())
                .map(|(w, c)| (w - c) * (w - c))
                .sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = s.tensor(0).data().to_vec();
            losses.push(loss(&w));
            let g: Vec<f64> = w
                .iter()
                .zip(target.iter())
                .map(|(w, c)| 2.0 * (w - c))
                .collect();
            opt.step(&mut s, &[Some(TensorData::vector(g))]).unwrap();
        }
        for t in 5..losses.len() - 1 {
            assert!(
                losses[t + 1] < losses[t],
                "loss rose at step {}: {} -> {}",
                t,
                losses[t],
                losses[t + 1]
            );
        }
    }
}
