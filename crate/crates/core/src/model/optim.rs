use std::f64::consts::PI;

use super::Scalar;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (PI * progress).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [F], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<F: Scalar>(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = F::of(p.f64() - update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let peak = 3e-4;
        assert!((lr_at(0, 1000, 100, peak) - peak / 100.0).abs() < 1e-15);
        assert!((lr_at(99, 1000, 100, peak) - peak).abs() < 1e-15);
        assert!((lr_at(100, 1000, 100, peak) - peak).abs() < 1e-15);
        assert!((lr_at(550, 1000, 100, peak) - peak / 2.0).abs() < 1e-12);
        assert!(lr_at(1000, 1000, 100, peak).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 100..1000 {
            let lr = lr_at(s, 1000, 100, peak);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small = vec![0.1f32, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        // bias correction makes the first update exactly lr * g / (|g| + eps')
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Adam::new(2);
        opt.step(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - (-1.9)).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![5.0f64];
        let mut opt = Adam::new(1);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
