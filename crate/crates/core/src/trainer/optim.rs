//! Adam with bias correction and a cosine learning-rate schedule.

use crate::diffcore::{ParamStore, Real, Tensor};
use crate::error::{bail_input, Result};
use crate::nvsnet::Record;

/// `lr_min + ½(lr − lr_min)(1 + cos(π·t/total))`, clamped at `t ≥ total`.
pub fn cosine_lr(lr: f64, lr_min: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let p = (t as f64 / total as f64).min(1.0);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub steps: u64,
    // Moments are held in single precision so checkpoints restore them exactly.
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Missing gradients count as zero. With `clip > 0`
    /// the gradients are rescaled to a global norm of at most `clip`.
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, clip: f64) {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            let g = grads.get(k).and_then(|g| g.as_ref());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i].f64()) * scale;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                (m[i], v[i]) = (mi as f32, vi as f32);
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p[i] = T::of(p[i].f64() - step);
            }
        }
    }

    /// Moments as `optim.m.<param>` / `optim.v.<param>` records plus the
    /// step count.
    pub fn records<T: Real>(&self, store: &ParamStore<T>) -> Vec<Record> {
        let mut out = vec![Record::scalar("optim.steps", self.steps as f32)];
        for (k, (name, t)) in store.iter().enumerate() {
            for (prefix, buf) in [("m", &self.m[k]), ("v", &self.v[k])] {
                out.push(Record {
                    name: format!("optim.{prefix}.{name}"),
                    shape: t.shape().to_vec(),
                    data: buf.clone(),
                });
            }
        }
        out
    }

    /// Restores moments written by [`Adam::records`].
    pub fn restore<T: Real>(&mut self, store: &ParamStore<T>, records: &[Record]) -> Result<()> {
        let find = |name: &str| records.iter().find(|r| r.name == name);
        let Some(steps) = find("optim.steps") else {
            bail_input!("missing optimizer record optim.steps");
        };
        self.steps = steps.data[0] as u64;
        for (k, (name, t)) in store.iter().enumerate() {
            for (prefix, buf) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("optim.{prefix}.{name}");
                let Some(r) = find(&key) else {
                    bail_input!("missing optimizer record {key}");
                };
                if r.data.len() != t.len() {
                    bail_input!("optimizer record {key} has {} values, expected {}", r.data.len(), t.len());
                }
                *buf = r.data.clone();
            }
        }
        Ok(())
    }
}
