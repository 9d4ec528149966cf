use super::{Real, Tensor};
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
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Applies one update using each parameter's accumulated gradient. A
    /// parameter with no gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("state tracks {} tensors, got {}", self.m.len(), params.len()),
            });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - beta1.powi(t));
        let bc2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2, lr, eps) = (T::of(beta1), T::of(beta2), T::of(lr), T::of(eps));
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("moment buffer of {} for parameter {:?}", m.len(), p.shape()),
                });
            }
            let Some(g) = p.grad() else {
                // m and v still decay so the state matches an explicit zero gradient.
                m.iter_mut().for_each(|x| *x *= b1);
                v.iter_mut().for_each(|x| *x *= b2);
                continue;
            };
            p.update_data(|w| {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                    v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>) -> Tensor<f64> {
        Tensor::parameter(&[v.len()], v).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = param(vec![1.0, -2.0]);
        let mut adam = AdamState::new(&[p.clone()], AdamConfig::default());
        p.scale(0.0).sum().backward().unwrap();
        adam.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g| + eps).
        for g in [0.003, 1.0, -250.0] {
            let p = param(vec![0.5]);
            let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
            let mut adam = AdamState::new(&[p.clone()], cfg);
            p.scale(g).sum().backward().unwrap();
            adam.step(&[p.clone()]).unwrap();
            let moved = 0.5 - p.item();
            let want = 1e-3 * g / (f64::abs(g) + 1e-8);
            assert!((moved - want).abs() < 1e-15, "g={g}: {moved} vs {want}");
        }
    }

    #[test]
    fn two_steps_decrease_square() {
        let p = param(vec![1.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = AdamState::new(&[p.clone()], cfg);
        let mut f_prev = 1.0;
        for _ in 0..2 {
            p.zero_grad();
            // Linearize at the current point: d(w²)/dw = 2w.
            let w = p.item();
            p.scale(2.0 * w).sum().backward().unwrap();
            adam.step(&[p.clone()]).unwrap();
            let f = p.item() * p.item();
            assert!(f < f_prev, "{f} !< {f_prev}");
            f_prev = f;
        }
        // Reference values from a direct transcription of the Adam update.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * w;
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.item() - w).abs() < 1e-14);
    }
}
