use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::error::{invalid, Error, Result};
use crate::model::{read_container, write_container, ContainerTensor, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup then `sqrt(warmup / step)` decay.
    InverseSqrt,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup: 500,
            schedule: Schedule::InverseSqrt,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::InverseSqrt if self.warmup == 0 => self.base_lr / (step.max(1) as f64).sqrt(),
            Schedule::InverseSqrt => {
                let (s, w) = (step as f64, self.warmup as f64);
                self.base_lr * (s / w).min((w / s).sqrt())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("Adam needs base_lr > 0 and betas in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("Adam eps must be positive");
        }
        Ok(())
    }
}

/// Adam moments keyed by tensor name; only tensors that received a
/// gradient ever get moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl OptState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step.max(1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "step": self.step });
        let mut tensors = Vec::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, value) in map {
                tensors.push(ContainerTensor { name: name.clone(), tag: prefix.into(), value: value.clone() });
            }
        }
        write_container(path, "optimizer", meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, meta, tensors) = read_container(path)?;
        if kind != "optimizer" {
            return Err(Error::Checkpoint(format!("{}: holds `{kind}`, not optimizer state", path.display())));
        }
        let mut st = OptState::new(serde_json::from_value(meta["config"].clone())?);
        st.step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?;
        for t in tensors {
            match t.tag.as_str() {
                "m" => st.m.insert(t.name, t.value),
                "v" => st.v.insert(t.name, t.value),
                other => return Err(Error::Checkpoint(format!("unknown optimizer tensor tag `{other}`"))),
            };
        }
        Ok(st)
    }
}

/// One bias-corrected Adam update of every trainable tensor with a
/// gradient. Returns the learning rate used.
pub fn adam_step(opt: &mut OptState, grads: &Grads, params: &mut ParamStore) -> Result<f64> {
    for (id, g) in &grads.params {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.get(*id).name)));
        }
    }
    let c = opt.config;
    let clip = match c.max_grad_norm {
        Some(max) => {
            let norm = grads.params.iter().flat_map(|(_, g)| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    opt.step += 1;
    let t = opt.step as i32;
    let lr = c.lr_at(opt.step);
    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
    for (id, g) in &grads.params {
        if !params.trainable(*id) {
            continue;
        }
        let name = params.get(*id).name.clone();
        let shape = g.shape();
        let m = opt.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        let v = opt.v.entry(name).or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        let p = params.value_mut(*id);
        for i in 0..g.len() {
            let gi = g.data[i] * clip;
            m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
            v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn schedule_points() {
        let c = AdamConfig { base_lr: 5e-4, warmup: 1000, ..Default::default() };
        assert_eq!(c.lr_at(1000), 5e-4);
        assert_eq!(c.lr_at(4000), 2.5e-4);
        assert_eq!(c.lr_at(500), 2.5e-4);
    }

    fn scalar_grads(store: &ParamStore, g: f64) -> Grads {
        let mut graph = Graph::new(true, None);
        let p = graph.param(0, store.value(0), true);
        let s = graph.scale(p, g);
        let l = graph.weighted_sum(&[(s, 1.0)]);
        graph.backward(l)
    }

    #[test]
    fn two_steps_match_closed_form() {
        let mut store = ParamStore::new();
        store.insert("enc.x", Matrix::scalar(1.0)).unwrap();
        let cfg = AdamConfig { base_lr: 0.1, schedule: Schedule::Constant, ..Default::default() };
        let mut opt = OptState::new(cfg);
        adam_step(&mut opt, &scalar_grads(&store, 0.5), &mut store).unwrap();
        adam_step(&mut opt, &scalar_grads(&store, -2.0), &mut store).unwrap();

        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-6, 0.1);
        let mut x = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 0.5f64), (2, -2.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((store.value(0).data[0] - x).abs() < 1e-10);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut store = ParamStore::new();
        store.insert("dec.0.self.wq", Matrix::scalar(1.0)).unwrap();
        let mut opt = OptState::new(AdamConfig::default());
        let err = adam_step(&mut opt, &scalar_grads(&store, f64::NAN), &mut store).unwrap_err();
        assert!(err.to_string().contains("dec.0.self.wq"));
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new();
        store.insert("enc.x", Matrix::scalar(1.0)).unwrap();
        let mut opt = OptState::new(AdamConfig::default());
        adam_step(&mut opt, &scalar_grads(&store, 0.3), &mut store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.bin");
        opt.save(&p).unwrap();
        assert_eq!(OptState::load(&p).unwrap(), opt);
    }
}
