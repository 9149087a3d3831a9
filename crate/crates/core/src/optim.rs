//! Adaptive moment estimation with a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of tensors, matched by position.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, lr: f64, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient count mismatch"
        );
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for (idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                if m[i] == 0.0 {
                    continue;
                }
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Learning rate `0` at step 0, rising linearly to `peak` at
/// `warmup_ratio · total`, then falling linearly to `0` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).round() as usize;
        Self {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        if step >= last {
            return if self.warmup_steps >= last && last > 0 {
                self.peak
            } else {
                0.0
            };
        }
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if self.warmup_steps >= last {
            self.peak
        } else {
            self.peak * (last - step) as f64 / (last - self.warmup_steps) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 101, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
        let mut prev = f64::INFINITY;
        for step in 10..=100 {
            assert!(s.lr(step) <= prev);
            prev = s.lr(step);
        }
    }

    #[test]
    fn converges_on_least_squares() {
        // minimize (x - 3)^2 + 10 (y + 1)^2 + (x - 3)(y + 1)
        let mut p = vec![0.0, 0.0];
        let mut adam = Adam::new(AdamConfig::default());
        let schedule = LinearSchedule::new(0.05, 5000, 0.1);
        for step in 0..5000 {
            let (x, y) = (p[0] - 3.0, p[1] + 1.0);
            let g = vec![2.0 * x + y, 20.0 * y + x];
            adam.step(schedule.lr(step), vec![&mut p], vec![&g]);
        }
        assert!((p[0] - 3.0).abs() < 1e-6, "{p:?}");
        assert!((p[1] + 1.0).abs() < 1e-6, "{p:?}");
    }
}
