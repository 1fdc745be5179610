//! Named parameter registry, tape binding, and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GlamError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters. Registration order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(GlamError::config(format!("duplicate parameter name: {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Scales every gradient in place (batch-mean reduction).
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-tape map from parameters to their leaf nodes: each parameter is bound
/// at most once per tape so gradient fan-in accumulates on a single leaf.
#[derive(Debug, Default)]
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, reg: &ParamRegistry, id: ParamId) -> NodeId {
        if self.nodes.len() < reg.len() {
            self.nodes.resize(reg.len(), None);
        }
        if let Some(nid) = self.nodes[id.0] {
            return nid;
        }
        let nid = tape.leaf(reg.value(id).clone());
        self.nodes[id.0] = Some(nid);
        nid
    }

    /// Adds the tape's gradients into the registry (call after `backward`).
    pub fn accumulate_grads(&self, tape: &Tape, reg: &mut ParamRegistry) {
        for (i, nid) in self.nodes.iter().enumerate() {
            if let Some(nid) = nid {
                let g = tape.grad(*nid);
                let dst = reg.get_mut(ParamId(i));
                for (d, s) in dst.grad.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }
}

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; skips non-trainable parameters entirely.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, reg: &mut ParamRegistry) {
        if self.m.len() < reg.len() {
            for i in self.m.len()..reg.len() {
                let n = reg.get(ParamId(i)).value.numel();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..reg.len() {
            let p = reg.get_mut(ParamId(i));
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let mhat = *mi / b1t;
                let vhat = *vi / b2t;
                *w -= self.cfg.eta * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
