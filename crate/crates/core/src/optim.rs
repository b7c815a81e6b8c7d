//! Adam with a linear learning-rate warm-up.

use indexmap::IndexMap;

use crate::model::ParameterStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn update(&mut self, key: &str, value: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let (m, v) = self
            .state
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; value.len()], vec![0.0; value.len()]));
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for i in 0..value.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }

    /// One step over every trainable parameter that holds a gradient, plus
    /// scalar extras given as `(name, value, gradient)`.
    pub fn step(&mut self, store: &mut ParameterStore<f32>, extras: &mut [(&str, &mut f64, f64)], lr: f64) {
        self.t += 1;
        let mut buf = Vec::new();
        let names: Vec<String> = store.trainable_names().into_iter().map(str::to_string).collect();
        for name in names {
            let t = store.get_mut(&name).expect("name from the store");
            let Some(g) = t.grad() else { continue };
            let g: Vec<f64> = g.iter().map(|&x| f64::from(x)).collect();
            buf.clear();
            buf.extend(t.data().iter().map(|&x| f64::from(x)));
            self.update(&name, &mut buf, &g, lr);
            for (d, &v) in t.data_mut().iter_mut().zip(&buf) {
                *d = v as f32;
            }
        }
        for (name, value, grad) in extras.iter_mut() {
            let mut v = [**value];
            self.update(&format!("extra:{name}"), &mut v, &[*grad], lr);
            **value = v[0];
        }
    }
}

/// Learning rate at 0-based `step`: rises linearly to `base` over the first
/// `warmup` fraction of `total` steps, then stays at `base`.
pub fn warmup_lr(step: usize, total: usize, base: f64, warmup: f64) -> f64 {
    let warm = (warmup * total as f64).ceil() as usize;
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base
    }
}
