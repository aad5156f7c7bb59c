use serde::{Deserialize, Serialize};

use super::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            let frac = ((step + 1) as f64 / self.warmup_steps as f64).min(1.0);
            self.learning_rate * frac
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl AdamW {
    pub fn new(shapes: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        AdamW {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn update(&mut self, config: &OptimizerConfig, params: &mut [Matrix], grads: &[Matrix]) {
        let lr = config.rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = config.beta1 * m.data[i] + (1.0 - config.beta1) * gi;
                v.data[i] = config.beta2 * v.data[i] + (1.0 - config.beta2) * gi * gi;
                let m_hat = m.data[i] / bias1;
                let v_hat = v.data[i] / bias2;
                let delta = m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * p.data[i];
                p.data[i] -= lr * delta;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_leaves_parameters_untouched() {
        let mut params = vec![Matrix::from_vec(1, 3, vec![0.3, -1.25, 7.0])];
        let before = params.clone();
        let grads = vec![Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5])];
        let config = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&params);
        opt.update(&config, &mut params, &grads);
        assert_eq!(params, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut params = vec![Matrix::from_vec(1, 2, vec![1.0, 1.0])];
        let grads = vec![Matrix::from_vec(1, 2, vec![3.0, -0.5])];
        let config = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        AdamW::new(&params).update(&config, &mut params, &grads);
        assert!((params[0].data[0] - 0.9).abs() < 1e-7);
        assert!((params[0].data[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut params = vec![Matrix::from_vec(1, 1, vec![2.0])];
        let grads = vec![Matrix::zeros(1, 1)];
        let config = OptimizerConfig {
            learning_rate: 0.5,
            weight_decay: 0.1,
            ..Default::default()
        };
        AdamW::new(&params).update(&config, &mut params, &grads);
        assert!((params[0].data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps() {
        let config = OptimizerConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        assert_eq!(config.rate_at(0), 0.25);
        assert_eq!(config.rate_at(3), 1.0);
        assert_eq!(config.rate_at(10), 1.0);
    }
}
