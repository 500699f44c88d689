//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::{NumericError, Tensor};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        Self { step: 0, m, v }
    }

    /// Applies one update in place.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f64>],
        cfg: &AdamConfig,
    ) -> Result<(), NumericError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NumericError::Dimension(format!(
                "adam: {} params, {} grads, {} state buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.m[i].len() {
                return Err(NumericError::Dimension(format!(
                    "adam: tensor {i} has {} values, gradient {}, state {}",
                    p.numel(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[vec![0.0; 3]], &AdamConfig::default())
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::scalar(0.25);
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[vec![1.0]], &cfg).unwrap();
        // mhat = 1, vhat = 1 → Δ = lr / (1 + eps)
        let expect = 0.25 - cfg.lr / (1.0 + cfg.eps);
        assert!((p.item() - expect).abs() < 1e-9);
        assert!(((0.25 - p.item()) - cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        let err = st.step(&mut [&mut p], &[vec![0.0; 3]], &AdamConfig::default());
        assert!(matches!(err, Err(NumericError::Dimension(_))));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
            let mut st = AdamState::new([&p]);
            for k in 0..10 {
                let g = vec![(k as f64).sin(), p.data()[0] * 0.5];
                st.step(&mut [&mut p], &[g], &AdamConfig::default()).unwrap();
            }
            p.into_data()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
