use crate::error::{Error, Result};
use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `k · d_model^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, k: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    k * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Adam with per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";
const STEP_KEY: &str = "meta.step";

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.0.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.by_index_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moments and the step counter as extra tensors next to the weights,
    /// so a checkpoint resumes training exactly.
    pub fn export(&self, store: &ParamStore, out: &mut ParamStore) {
        for (i, (name, t)) in store.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.insert(
                format!("{M_PREFIX}{name}"),
                Tensor::new(shape.clone(), self.m[i].clone()).expect("shape"),
            );
            out.insert(
                format!("{V_PREFIX}{name}"),
                Tensor::new(shape, self.v[i].clone()).expect("shape"),
            );
        }
        out.insert(STEP_KEY, Tensor::scalar(self.step as f64));
    }

    pub fn import(store: &ParamStore, saved: &ParamStore) -> Result<Self> {
        let mut adam = Adam::new(store);
        let missing = |name: String| Error::Parameter {
            name,
            reason: "optimizer state missing from checkpoint".into(),
        };
        for (i, (name, t)) in store.iter().enumerate() {
            let m = saved
                .get(&format!("{M_PREFIX}{name}"))
                .ok_or_else(|| missing(format!("{M_PREFIX}{name}")))?;
            let v = saved
                .get(&format!("{V_PREFIX}{name}"))
                .ok_or_else(|| missing(format!("{V_PREFIX}{name}")))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Parameter {
                    name: name.to_owned(),
                    reason: "optimizer state shape differs from the weight".into(),
                });
            }
            adam.m[i] = m.data().to_vec();
            adam.v[i] = v.data().to_vec();
        }
        adam.step = saved
            .get(STEP_KEY)
            .ok_or_else(|| missing(STEP_KEY.into()))?
            .item() as usize;
        Ok(adam)
    }
}

/// Model weights only (drops optimizer state and metadata).
pub fn model_weights(saved: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in saved.iter() {
        if !name.starts_with(M_PREFIX) && !name.starts_with(V_PREFIX) && name != STEP_KEY {
            out.insert(name, t.clone());
        }
    }
    out
}
