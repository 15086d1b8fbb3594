use serde::{Deserialize, Serialize};

use super::NetworkParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            config: AdamConfig {
                learning_rate,
                ..AdamConfig::default()
            },
        }
    }

    /// One bias-corrected Adam update using the moments stored in `params`.
    pub fn step(&self, params: &mut NetworkParams, grad: &[f64]) {
        let c = &self.config;
        params.step += 1;
        let t = params.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.learning_rate;
        for (((p, m), v), g) in params
            .values
            .iter_mut()
            .zip(params.first_moment.iter_mut())
            .zip(params.second_moment.iter_mut())
            .zip(grad)
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = NetworkParams::new(vec![1.0, -1.0]);
        Adam::new(0.1).step(&mut p, &[2.0, -3.0]);
        assert!((p.values[0] - 0.9).abs() < 1e-6);
        assert!((p.values[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = NetworkParams::new(vec![3.0]);
        let adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * (p.values[0] - 1.0)];
            adam.step(&mut p, &g);
        }
        assert!((p.values[0] - 1.0).abs() < 1e-3);
    }
}
