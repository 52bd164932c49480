use serde::{Deserialize, Serialize};

use super::layers::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam moment estimates for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count does not match parameter count");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            assert_eq!(p.shape(), g.shape());
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::row(values));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(&[1.0, -2.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[Tensor::zeros(1, 2)]);
        assert_eq!(p.get(0).data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(&[1.0, -2.0, 0.5]);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut opt = Adam::new(&p, cfg);
        opt.step(&mut p, &[Tensor::row(&[3.0, -0.001, 1e4])]);
        let moved: Vec<f64> = p.get(0).data.iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        assert!((moved[0] + 0.01).abs() < 1e-6);
        assert!((moved[1] - 0.01).abs() < 1e-4);
        assert!((moved[2] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn convex_quadratic_decreases() {
        // f(x) = sum a_i (x_i - c_i)^2
        let a = [1.0, 4.0, 0.5];
        let c = [0.3, -1.0, 2.0];
        let f = |x: &[f64]| -> f64 { (0..3).map(|i| a[i] * (x[i] - c[i]).powi(2)).sum() };
        let mut p = single(&[2.0, 2.0, -2.0]);
        let mut opt = Adam::new(&p, AdamConfig { lr: 0.01, ..Default::default() });
        let mut last = f(&p.get(0).data);
        for step in 0..100 {
            let x = p.get(0).data.clone();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect();
            opt.step(&mut p, &[Tensor::row(&g)]);
            let now = f(&p.get(0).data);
            if step >= 5 {
                assert!(now < last, "step {step}: {now} >= {last}");
            }
            last = now;
        }
    }
}
