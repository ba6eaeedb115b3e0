use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::BnUpdate;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics; updated only as a side effect of training.
    Buffer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameter tensors organised in groups that can be frozen as a unit.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        let full = format!("{group}.{name}");
        assert!(!self.index.contains_key(&full), "duplicate parameter {full}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: full.clone(), group: group.to_string(), kind, value });
        self.index.insert(full, id);
        id
    }

    /// Uniform initialisation in `±sqrt(3 / fan_in)` (unit-variance outputs for unit-variance inputs).
    pub fn add_uniform(&mut self, group: &str, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (3.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(group, name, ParamKind::Weight, Tensor::from_vec(shape, data))
    }

    pub fn add_const(&mut self, group: &str, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.add(group, name, ParamKind::Weight, Tensor::full(shape, value))
    }

    pub fn add_buffer(&mut self, group: &str, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.add(group, name, ParamKind::Buffer, Tensor::full(shape, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.group.clone()).collect()
    }

    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Weight && !self.frozen.contains(&e.group)
    }

    /// Whether the group owning `id` is not frozen (buffers included).
    pub fn is_trainable_group_of(&self, id: ParamId) -> bool {
        !self.frozen.contains(&self.entries[id.0].group)
    }

    pub fn count(&self, filter: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight && filter(e)).map(|e| e.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.count(|_| true)
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|e| !self.frozen.contains(&e.group))
    }

    /// Exponential moving average update of batch-norm running statistics.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>, momentum: f32) {
        for u in updates {
            if !self.is_trainable_group_of(u.mean_id) {
                continue;
            }
            for (r, b) in self.value_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.value_mut(u.var_id).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Copies every tensor of `group` from `other`; shapes must agree.
    pub fn copy_group_from(&mut self, other: &ParamStore, group: &str) -> Result<(), String> {
        let mut copied = 0;
        for e in other.entries.iter().filter(|e| e.group == group) {
            let id = self.id(&e.name).ok_or_else(|| format!("parameter {} missing", e.name))?;
            if self.value(id).shape() != e.value.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    e.name,
                    self.value(id).shape(),
                    e.value.shape()
                ));
            }
            *self.value_mut(id) = e.value.clone();
            copied += 1;
        }
        let expected = self.entries.iter().filter(|e| e.group == group).count();
        if copied != expected {
            return Err(format!("group {group}: checkpoint provides {copied} of {expected} tensors"));
        }
        Ok(())
    }
}

/// Adam with bias correction and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    clip_norm: Option<f32>,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0), step: 0, moments: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new(clip_norm: Option<f32>) -> Self {
        Self { clip_norm, ..Self::default() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients of non-trainable parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f32) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt() as f32;
                if norm > max && norm.is_finite() {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let n = g.len();
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = store.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
