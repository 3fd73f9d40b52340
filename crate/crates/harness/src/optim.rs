//! AdamW with decoupled weight decay.

use mst_core::{ParamStore, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient
    /// still decay.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        if self.m.is_empty() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.get(i).and_then(|g| g.as_ref());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                let mut x = w.to_f64_lossy();
                x -= lr * self.weight_decay * x;
                if let Some(g) = g {
                    let gj = g.data()[j].to_f64_lossy();
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                }
                x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = T::of(x);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use mst_core::Component;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·g/(|g| + eps)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Component::Other, Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        let g = vec![Some(Tensor::new(&[2], vec![0.5, -3.0]).unwrap())];
        opt.step(&mut store, &g, 0.1);
        let w = store.get(id).data();
        let expect = [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -1.0 + 0.1 * 3.0 / (3.0 + 1e-8)];
        assert!((w[0] - expect[0]).abs() < 1e-15 && (w[1] - expect[1]).abs() < 1e-15, "{w:?}");
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Component::Other, Tensor::new(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(1e-4);
        opt.step(&mut store, &[Some(Tensor::new(&[1], vec![1.0]).unwrap())], 0.0);
        assert_eq!(store.get(id).data(), &[2.0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}
