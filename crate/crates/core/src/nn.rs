//! Named parameter storage, graph binding and the Adam optimizer.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by stable hierarchical names (`down.0.res.conv1.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over entries accepted by `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.count_where(|_| true)
    }

    /// SHA-256 over names, shapes and raw bytes of entries accepted by `filter`.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(k, _)| filter(k)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    /// Copies every entry whose name is also present here.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: {:?} vs {:?}",
                        dst.shape(),
                        t.shape()
                    )));
                }
                *dst = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn subtree(&self, prefix: &str) -> ParamStore {
        let dotted = format!("{prefix}.");
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn graft(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.params.insert(format!("{prefix}.{k}"), v.clone());
        }
    }
}

/// Which parameters a graph tracks gradients for.
#[derive(Clone, Debug)]
pub enum Trainable {
    Nothing,
    Everything,
    Prefixes(Vec<String>),
    Predicate(fn(&str) -> bool),
}

impl Trainable {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Prefixes(p) => p.iter().any(|pre| has_prefix(name, pre)),
            Trainable::Predicate(f) => f(name),
        }
    }
}

/// True when `name` equals `prefix` or lives under `prefix.`.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
}

/// A tape bound to a parameter store. Parameters enter the tape lazily the
/// first time a layer asks for them.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: Trainable,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    /// Inference-only graph.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, Trainable::Nothing)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| invalid!("missing parameter `{name}`"))?
            .clone();
        let v = if self.trainable.contains(name) {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Names of every parameter the forward pass touched.
    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    /// Gradients of scalar `loss` for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if self.tape.requires_grad(*var) {
                let g = grads
                    .take(*var)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(*var)));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// He-normal initializer for weights feeding `fan_in` inputs.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Glorot-normal initializer.
pub fn glorot_normal<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    Tensor::randn(shape, (2.0 / (fan_in + fan_out).max(1) as f64).sqrt(), rng)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }
}

impl Adam {
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| invalid!("gradient for unknown parameter `{name}`"))?;
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Tensor::zeros(g.shape()));
                self.second.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.first.get_mut(name).unwrap().data_mut();
            for (mv, gv) in m.iter_mut().zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let m = self.first.get(name).unwrap().data();
            let v = self.second.get_mut(name).unwrap().data_mut();
            for (vv, gv) in v.iter_mut().zip(g.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m).zip(v.iter()) {
                *pv -= lr * (mv / bc1) / ((vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
