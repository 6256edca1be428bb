use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 100.0,
        }
    }
}

/// Adaptive-moment gradient descent over one parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        for m in self.m.iter_mut().chain(self.v.iter_mut()) {
            m.fill(0.0);
        }
        self.t = 0;
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor<f32>>]) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient list does not match store");
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            self.cfg.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.lr;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j] as f64 * scale;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = lr * (mj / c1) / ((vj / c2).sqrt() + self.cfg.eps);
                p[j] = (p[j] as f64 - step) as f32;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", &[3], Init::Constant(5.0), &mut rng);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let tape = Tape::new();
            let p = tape.param(&store, w);
            let loss = tape.sum(tape.mul(p, p));
            let g = tape.backward(loss).unwrap().for_store(&tape, &store);
            opt.step(&mut store, &g);
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", &[1], Init::Zeros, &mut rng);
        let mut opt = Adam::new(AdamConfig { lr: 1.0, clip: 1.0, ..Default::default() }, &store);
        let norm = opt.step(&mut store, &[Some(Tensor::new(&[1], vec![1e6]))]);
        assert_eq!(norm, 1e6);
        // bias-corrected Adam moves by ~lr regardless of scale
        assert!((store.get(w).data()[0] + 1.0).abs() < 1e-3);
    }
}
