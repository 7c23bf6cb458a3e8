use crate::error::{AirdError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Bias-corrected adaptive moments, one step counter per tensor.
///
/// The per-tensor counters let sparse callers (embedding tables stored one
/// row per tensor) update only the rows a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) first: Vec<Vec<f64>>,
    pub(crate) second: Vec<Vec<f64>>,
    pub(crate) steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    fn update(&mut self, t: usize, param: &mut [f32], grad: &[f64]) -> Result<()> {
        if param.len() != self.first[t].len() || grad.len() != param.len() {
            return Err(AirdError::ShapeMismatch(format!(
                "tensor {t}: state {} / param {} / grad {}",
                self.first[t].len(),
                param.len(),
                grad.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.steps[t] += 1;
        let step = self.steps[t] as i32;
        let c1 = 1.0 - beta1.powi(step);
        let c2 = 1.0 - beta2.powi(step);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first[t])
            .zip(&mut self.second[t])
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = (*p as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
        Ok(())
    }

    /// Updates every tensor.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.steps.len() || grads.len() != params.len() {
            return Err(AirdError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.steps.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(t, p, g)?;
        }
        Ok(())
    }

    /// Updates only tensor `t`.
    pub fn step_one(&mut self, t: usize, param: &mut [f32], grad: &[f64]) -> Result<()> {
        if t >= self.steps.len() {
            return Err(AirdError::ShapeMismatch(format!("no optimizer tensor {t}")));
        }
        self.update(t, param, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut adam = Adam::new(AdamConfig::default(), &[3]);
        let mut p = vec![0.5f32, -1.0, 2.0];
        let before = p.clone();
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Closed form: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps).
        for g in [1e-3, 0.7, -42.0] {
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[1]);
            let mut p = vec![0.5f32];
            adam.step(&mut [&mut p], &[&[g]]).unwrap();
            let moved = (p[0] as f64 - 0.5).abs();
            assert!((moved - 0.01).abs() / 0.01 < 0.01, "moved {moved}");
        }
    }

    #[test]
    fn descends_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[1]);
        let mut w = vec![1.0f32];
        for _ in 0..200 {
            let g = 2.0 * w[0] as f64;
            adam.step(&mut [&mut w], &[&[g]]).unwrap();
        }
        assert!(w[0].abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0f32; 3];
        assert!(adam.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
        assert!(adam.step(&mut [], &[]).is_err());
    }
}
