//! Named parameter storage, graph binding and the Adam optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a stored parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// Handle to an entry of the [`ParamStore`] that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Param(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Persistent non-trainable state, e.g. spectral-norm vectors.
    Buffer,
}

#[derive(Debug)]
struct Entry {
    id: ParamId,
    name: String,
    value: Tensor,
    kind: ParamKind,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    spectral: Vec<(Param, Param)>,
    frozen: bool,
}

impl Clone for ParamStore {
    /// Copies values under fresh [`ParamId`]s so both stores can share a graph.
    fn clone(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    id: ParamId::fresh(),
                    name: e.name.clone(),
                    value: e.value.clone(),
                    kind: e.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
            spectral: self.spectral.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        self.insert(name.into(), value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        self.insert(name.into(), value, ParamKind::Buffer)
    }

    fn insert(&mut self, name: String, value: Tensor, kind: ParamKind) -> Param {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Entry {
            id: ParamId::fresh(),
            name,
            value,
            kind,
        });
        Param(idx)
    }

    /// Records a `(weight, u)` pair updated by [`crate::spectral::power_iterate`].
    pub fn register_spectral(&mut self, weight: Param, u: Param) {
        self.spectral.push((weight, u));
    }

    pub fn spectral_pairs(&self) -> &[(Param, Param)] {
        &self.spectral
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, p: Param) -> ParamId {
        self.entries[p.0].id
    }

    pub fn name(&self, p: Param) -> &str {
        &self.entries[p.0].name
    }

    pub fn kind(&self, p: Param) -> ParamKind {
        self.entries[p.0].kind
    }

    pub fn value(&self, p: Param) -> &Tensor {
        &self.entries[p.0].value
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, p: Param, value: Tensor) -> Result<()> {
        let e = &mut self.entries[p.0];
        value.expect_shape(e.value.shape())?;
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.entries[p.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<Param> {
        self.by_name.get(name).map(|&i| Param(i))
    }

    pub fn params(&self) -> impl Iterator<Item = Param> + '_ {
        (0..self.entries.len()).map(Param)
    }

    pub fn trainable(&self) -> impl Iterator<Item = Param> + '_ {
        self.params()
            .filter(|&p| self.entries[p.0].kind == ParamKind::Trainable)
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|p| self.value(p).len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Binds parameters into a graph; `track` enables gradients for trainable entries.
    pub fn ctx(&self, track: bool) -> Ctx<'_> {
        Ctx {
            store: self,
            track: track && !self.frozen,
        }
    }

    /// SHA-256 over names, kinds, shapes and exact value bits, in insertion order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8, e.kind as u8]);
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `(name, value)` pairs in insertion order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites every entry from `source`, which must hold the same names and shapes.
    pub fn load_from(&mut self, mut source: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for e in &mut self.entries {
            let t = source(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }
}

/// Binding of a store into one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    store: &'a ParamStore,
    track: bool,
}

impl<'a> Ctx<'a> {
    pub fn var(&self, p: Param) -> Var {
        let e = &self.store.entries[p.0];
        if self.track && e.kind == ParamKind::Trainable {
            Var::param_leaf(e.value.clone(), e.id)
        } else {
            Var::constant(e.value.clone())
        }
    }

    pub fn value(&self, p: Param) -> &'a Tensor {
        &self.store.entries[p.0].value
    }

    pub fn tracking(&self) -> bool {
        self.track
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are indexed like the store they update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable entry that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if store.frozen {
            return Err(Error::invalid("optimizer step on a frozen parameter store"));
        }
        self.moments.resize_with(store.len(), || None);
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, e) in store.entries.iter_mut().enumerate() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.param(e.id) else { continue };
            g.ensure_finite(&format!("gradient for {}", e.name))?;
            let (m, v) = self.moments[i].get_or_insert_with(|| {
                (
                    Tensor::zeros(e.value.shape().to_vec()),
                    Tensor::zeros(e.value.shape().to_vec()),
                )
            });
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, (w, gk)) in e.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<name>` and `v/<name>`.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, slot) in self.moments.iter().enumerate() {
            if let Some((m, v)) = slot {
                let name = &store.entries[i].name;
                out.push((format!("m/{name}"), m.clone()));
                out.push((format!("v/{name}"), v.clone()));
            }
        }
        out
    }

    pub fn import(
        config: AdamConfig,
        steps: u64,
        store: &ParamStore,
        mut source: impl FnMut(&str) -> Option<Tensor>,
    ) -> Self {
        let moments = store
            .entries
            .iter()
            .map(|e| {
                let m = source(&format!("m/{}", e.name))?;
                let v = source(&format!("v/{}", e.name))?;
                Some((m, v))
            })
            .collect();
        Adam {
            config,
            steps,
            moments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999));
        for _ in 0..300 {
            let x = store.ctx(true).var(p);
            let loss = x.square().sum();
            let grads = loss.backward().unwrap();
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.value(p).max_abs() < 1e-2);
    }

    #[test]
    fn frozen_store_binds_constants() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(1.0));
        store.freeze();
        assert!(!store.ctx(true).var(p).requires_grad());
        let grads = Grads::default();
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999));
        assert!(opt.step(&mut store, &grads).is_err());
    }

    #[test]
    fn digest_tracks_values() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(1.0));
        let d0 = store.digest();
        assert_eq!(d0, store.clone().digest());
        store.set(p, Tensor::scalar(2.0)).unwrap();
        assert_ne!(d0, store.digest());
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::from_vec(vec![0.5, -0.5]));
        let mut opt = Adam::new(AdamConfig::new(1e-3, 0.5, 0.999));
        let loss = store.ctx(true).var(p).sum().mul_scalar(0.0);
        opt.step(&mut store, &loss.backward().unwrap()).unwrap();
        assert_eq!(store.value(p).data(), &[0.5, -0.5]);
    }
}
