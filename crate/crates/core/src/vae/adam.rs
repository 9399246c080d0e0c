use serde::{Deserialize, Serialize};

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
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a list of parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; `grads[k]` must match `params[k]` in length.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let (g, m, v) = (&grads[k], &mut self.m[k], &mut self.v[k]);
            assert_eq!(p.len(), g.len(), "parameter block {k} has the wrong length");
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(vec![p.as_mut_slice()], &[vec![0.0; 3]]);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = −lr · g / (|g| + eps).
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        Adam::new(cfg).step(vec![p.as_mut_slice()], &[g.to_vec()]);
        for i in 0..3 {
            let expect = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam.step(vec![p.as_mut_slice()], &[vec![2.0]]);
            last = p[0] - before;
        }
        assert!((last + 1e-3).abs() < 1e-9, "{last}");
    }
}
