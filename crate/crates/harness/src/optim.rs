//! AdamW with per-group learning rates.

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;

use diffperc_core::nn::{LrGroup, Param, ParamStore};

use crate::config::OptimizerConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

pub struct AdamW {
    cfg: OptimizerConfig,
    step: u64,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &IndexMap<String, Moments> {
        &self.state
    }

    pub fn restore(&mut self, step: u64, state: IndexMap<String, Moments>) {
        self.step = step;
        self.state = state;
    }

    /// Updates every unfrozen parameter that received a gradient, then clears
    /// gradients. Frozen parameters are never touched, weight decay included.
    pub fn step(&mut self, params: &[Arc<Param<f32>>], lr: impl Fn(LrGroup) -> f64) {
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for p in params {
            if p.is_frozen() {
                continue;
            }
            let t = p.tensor();
            let Some(g) = t.take_grad() else { continue };
            let lr = lr(p.group());
            let mut w = t.to_vec();
            let st = self.state.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; w.len()],
                v: vec![0.0; w.len()],
            });
            let decay = (1.0 - lr * self.cfg.weight_decay) as f32;
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let m = b1 * st.m[i] as f64 + (1.0 - b1) * gi;
                let v = b2 * st.v[i] as f64 + (1.0 - b2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.cfg.eps);
                w[i] = w[i] * decay - update as f32;
            }
            p.set_data(w).expect("same length");
        }
    }
}

/// Trainable parameter names per LR group; frozen parameters appear nowhere.
pub fn lr_groups(store: &ParamStore<f32>) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in store.trainable() {
        let key = serde_json::to_value(p.group()).expect("group serializes");
        out.entry(key.as_str().unwrap_or_default().to_string())
            .or_default()
            .push(p.name().to_string());
    }
    out
}
