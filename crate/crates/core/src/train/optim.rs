use std::collections::BTreeMap;

use crate::model::ParamStore;
use crate::tensorgrad::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

/// AdamW with decoupled weight decay. State is created lazily for
/// parameters that receive a gradient; frozen ones never get any.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn state_len(&self, name: &str) -> Option<usize> {
        self.state.get(name).map(|s| s.m.len())
    }

    /// One update. Entries with `None` gradient are skipped entirely,
    /// weight decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor<f32>>]) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else {
                continue;
            };
            if store.is_buffer(id) {
                continue;
            }
            let name = store.name(id).to_string();
            let p = store.get_mut(id);
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            let step = (self.lr / c1) as f32;
            let c2s = c2.sqrt() as f32;
            let (eps, decay) = (self.eps as f32, (self.lr * self.weight_decay) as f32);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *w -= step * *m / (v.sqrt() / c2s + eps) + decay * *w;
            }
        }
    }
}

/// Global L2 norm over present gradients.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
