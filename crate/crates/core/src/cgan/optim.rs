//! Adam and the constant-then-linear-decay learning-rate schedule.

use super::layers::Param;
use super::scalar::Scalar;
use super::TrainConfig;

/// Learning rate used during `epoch` (0-based): `lr0` for the first half of
/// training, then linear decay reaching zero after the last epoch.
pub fn learning_rate_at(config: &TrainConfig, epoch: usize) -> f64 {
    let total = config.epochs as f64;
    let remaining = total - epoch as f64;
    config.learning_rate * (remaining / (total / 2.0)).clamp(0.0, 1.0)
}

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Param<F>>, lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let step_size = F::of(lr / c1);
        let c2_sqrt = F::of(c2.sqrt());
        let eps = F::of(self.eps);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() / c2_sqrt + eps;
                p.value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_flat_then_linear() {
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        for e in 0..=5 {
            assert_eq!(learning_rate_at(&cfg, e), 1e-4);
        }
        assert!((learning_rate_at(&cfg, 6) - 0.8e-4).abs() < 1e-15);
        assert!((learning_rate_at(&cfg, 9) - 0.2e-4).abs() < 1e-15);
        assert_eq!(learning_rate_at(&cfg, 10), 0.0);
        let one = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        assert_eq!(learning_rate_at(&one, 0), 1e-4);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g) up to eps.
        let mut p = Param::<f64>::zeros("w", vec![3]);
        p.grad = vec![0.5, -2.0, 0.0];
        let mut adam = Adam::new(0.5, 0.999);
        adam.step(vec![&mut p], 0.1);
        assert!((p.value[0] + 0.1).abs() < 1e-6);
        assert!((p.value[1] - 0.1).abs() < 1e-6);
        assert_eq!(p.value[2], 0.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn matches_reference_recurrence() {
        let grads = [0.3, -0.1, 0.7, 0.2];
        let (b1, b2, eps, lr) = (0.5f64, 0.999f64, 1e-8, 0.01);
        let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
        let mut p = Param::<f64>::zeros("w", vec![1]);
        p.value[0] = 1.0;
        let mut adam = Adam::new(b1, b2);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            p.grad[0] = *g;
            adam.step(vec![&mut p], lr);
        }
        assert!((p.value[0] - w).abs() < 1e-12);
    }
}
