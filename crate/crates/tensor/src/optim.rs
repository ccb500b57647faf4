use serde::{Deserialize, Serialize};

use crate::{Result, Tensor, TensorError};

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
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// One descent step `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(TensorError::Invalid(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            p.expect_same_shape(g, "adam")?;
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                pd[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        adam.update(vec![&mut p], &[g]).unwrap();
        let lr = AdamConfig::default().lr;
        assert!((p.data()[0] - (1.0 - lr)).abs() < 1e-9);
        assert!((p.data()[1] - (-2.0 + lr)).abs() < 1e-9);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, [&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            adam.update(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.max_abs() < 1e-2);
    }
}
