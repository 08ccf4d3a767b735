//! Adaptive-moment gradient steps and global-norm clipping.

use crate::diffcore::ParamStore;
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// per-parameter learning-rate multiplier (1.0 by default)
    scale: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Adam {
        let shapes: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let scale = vec![1.0; store.len()];
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: shapes.clone(), v: shapes, scale, t: 0 }
    }

    /// Scale the step size for every parameter whose name matches the
    /// predicate. Adam's per-step travel is bounded by lr, so parameters far
    /// from their optimum (noise scales, basis matrices) get a larger group
    /// rate than the image networks.
    pub fn set_group_scale(&mut self, store: &ParamStore, pred: impl Fn(&str) -> bool, scale: f64) {
        for (i, (name, _)) in store.iter().enumerate() {
            if pred(name) {
                self.scale[i] = scale;
            }
        }
    }

    /// One descent step on `grads` (pass gradients of the loss to minimize).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.values_mut()[i].data_mut();
            let lr = self.lr * self.scale[i];
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their joint norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![5.0, -3.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = grad(
                |t, vs| {
                    let sq = t.square(vs[0])?;
                    t.sum_all(sq)
                },
                &[store.value(id).clone()],
            )
            .unwrap();
            opt.step(&mut store, &g);
        }
        for v in store.value(id).data() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut gs = vec![Tensor::vector(vec![3.0, 4.0])];
        let pre = clip_global_norm(&mut gs, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((global_norm(&gs) - 1.0).abs() < 1e-12);
    }
}
