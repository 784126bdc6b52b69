//! Optimizers, learning-rate schedule, and gradient clipping.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    buffers: Vec<Matrix<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.buffers.is_empty() {
            self.buffers = grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect();
        }
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((w, &gw), b) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(buf.as_mut_slice())
            {
                let d = gw + self.weight_decay * *w;
                *b = self.momentum * *b + d;
                *w -= self.lr * *b;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, aligned with the parameters.
    pub fn moments(&self) -> (&[Matrix<T>], &[Matrix<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Matrix<T>>, v: Vec<Matrix<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let decay = T::one() - self.lr * self.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                p[i] *= decay;
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `base` to `min` over `total` epochs:
/// `min + ½(base − min)(1 + cos(π t / T))`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scale gradients so their global ℓ2 norm is at most `max_norm`
/// (`max_norm ≤ 0` disables). Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> T {
    let norm = grads.iter().map(Matrix::sum_sq).sum::<T>().sqrt();
    if max_norm > 0.0 && norm.as_f64() > max_norm {
        let s = T::lit(max_norm) / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1e-4, 1e-5, 0, 300), 1e-4);
        assert!((cosine_lr(1e-4, 1e-5, 300, 300) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(1e-4, 1e-5, 150, 300) - 5.5e-5).abs() < 1e-15);
    }

    #[test]
    fn cosine_matches_closed_form() {
        for t in 0..=20 {
            let want =
                1e-5 + 0.5 * (1e-4 - 1e-5) * (1.0 + (std::f64::consts::PI * t as f64 / 20.0).cos());
            assert!((cosine_lr(1e-4, 1e-5, t, 20) - want).abs() < 1e-18);
        }
    }

    #[test]
    fn sgd_momentum_matches_hand_iteration() {
        let mut p = Matrix::from_vec(1, 1, vec![1.0f64]).unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        opt.step(&mut [&mut p], std::slice::from_ref(&g));
        assert!((p[(0, 0)] - 0.9).abs() < 1e-12);
        opt.step(&mut [&mut p], std::slice::from_ref(&g));
        // buf = 0.9 * 1 + 1 = 1.9
        assert!((p[(0, 0)] - (0.9 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0f64, -1.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![0.3, -2.0]).unwrap();
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut [&mut p], std::slice::from_ref(&g));
        assert!((p[(0, 0)] - 0.99).abs() < 1e-6);
        assert!((p[(0, 1)] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = Matrix::from_vec(1, 1, vec![2.0f64]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut [&mut p], std::slice::from_ref(&g));
        assert!((p[(0, 0)] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sum_sq().sqrt() - 1.0).abs() < 1e-12);
        let mut h = vec![Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap()];
        clip_global_norm(&mut h, 0.0);
        assert_eq!(h[0].as_slice(), &[3.0, 4.0]);
    }
}
