use crate::tensor::ParamStore;

/// Learning-rate multiplier for update `step` (1-based) of `total`: linear
/// warmup over the first `ceil(warmup_ratio * total)` updates, then linear
/// decay reaching zero after the last update.
pub fn linear_schedule(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step <= warmup {
        step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        (total - step) as f64 / (total - warmup) as f64
    }
}

/// Adam with decoupled weight decay. Biases and layer-norm gains are not
/// decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let (m, decay) = store
            .iter()
            .map(|(_, p)| {
                let exempt = p.name.ends_with(".bias") || p.name.ends_with(".gain");
                (vec![0.0; p.tensor.numel()], !exempt)
            })
            .unzip();
        let v = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
            decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply the accumulated gradients at learning rate `lr`. A zero rate
    /// leaves every parameter untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if self.decay[i] {
                self.weight_decay
            } else {
                0.0
            };
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = p.grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let total = 10;
        let lrs: Vec<f64> = (1..=total)
            .map(|s| linear_schedule(s, total, 0.2))
            .collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert_eq!(lrs[9], 0.0);
        assert!((lrs[5] - 4.0 / 8.0).abs() < 1e-15);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] <= w[0]));
        assert_eq!(linear_schedule(1, 1, 0.2), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w.weight", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let b = store
            .insert("w.bias", Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        store.get_mut(w).grad = vec![0.5, -2.0];
        store.get_mut(b).grad = vec![3.0];
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, 0.01);
        let wv = store.get(w).tensor.data();
        assert!((wv[0] - (1.0 - 0.01 * (1.0 + 0.1))).abs() < 1e-8);
        assert!((wv[1] - (-1.0 + 0.01 * (1.0 + 0.1))).abs() < 1e-8);
        assert!((store.get(b).tensor.data()[0] - 0.99).abs() < 1e-8);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w.weight", Tensor::new(vec![1], vec![0.3]).unwrap())
            .unwrap();
        store.get_mut(w).grad = vec![1.0];
        let mut opt = AdamW::new(&store, 0.01);
        opt.step(&mut store, 0.0);
        assert_eq!(store.get(w).tensor.data(), [0.3]);
    }
}
