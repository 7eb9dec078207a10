//! Momentum SGD with cosine-annealed learning rate.
//!
//! Both training stages share this optimizer: initial rate decayed by a
//! cosine rule over the configured epoch count, classical momentum,
//! parameters updated in a caller-fixed order for determinism.

use ndarray::Array2;

/// Learning rate at `epoch` under cosine annealing from `lr0` to zero
/// across `total_epochs`.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let t = (epoch as f64) / (total_epochs as f64);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD state. Velocity buffers are keyed by position in the
/// parameter list, which must stay identical across steps.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// One update: v = momentum * v + g; p -= lr * v.
    ///
    /// Panics if the parameter count or shapes change between steps.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "param set changed");
        let momentum = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.dim(), g.dim(), "param/grad shape mismatch");
            v.zip_mut_with(g, |v, &g| *v = momentum * *v + g);
            **p -= &(&*v * lr);
        }
    }
}
