use crate::param::{ParamId, ParamStore};

/// Adam with bias correction. Each parameter can be stepped with its own
/// learning rate so callers can implement parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `lr(id)` gives the learning rate for each parameter;
    /// parameters without a gradient keep their moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: impl Fn(ParamId) -> f64) {
        assert_eq!(grads.len(), store.len(), "gradient count");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let rate = lr(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.data_mut(id);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
