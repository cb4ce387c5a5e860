//! Named parameter storage, parameter groups, and gradient buffers.
//!
//! Every tensor belongs to exactly one named group. Trainability is a
//! property of the group; the optimizer and the autograd graph consult it.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (matrices yes, norms/biases no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group: group.into(), value, trainable: true, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Group names in first-registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let mut found = false;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
            found = true;
        }
        if found {
            Ok(())
        } else {
            Err(invalid!("unknown parameter group {group}"))
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.group)) {
            p.trainable = trainable;
        }
    }

    /// SHA-256 over the group's tensor names and little-endian values.
    pub fn group_hash(&self, group: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn group_hashes(&self) -> Vec<(String, [u8; 32])> {
        self.groups().into_iter().map(|g| {
            let h = self.group_hash(&g);
            (g, h)
        }).collect()
    }

    pub fn partition(&self) -> ParamPartition {
        let groups = self
            .groups()
            .into_iter()
            .map(|name| {
                let members: Vec<&Param> = self.params.iter().filter(|p| p.group == name).collect();
                GroupEntry {
                    trainable: members.iter().all(|p| p.trainable),
                    tensors: members.len(),
                    params: members.iter().map(|p| p.value.len()).sum(),
                    name,
                }
            })
            .collect();
        ParamPartition { groups }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Copies values of every parameter whose name also exists in `src`
    /// with the same shape. Returns the number copied.
    pub fn copy_matching_from(&mut self, src: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| filter(&p.name)) {
            let Some(id) = src.find(&p.name) else {
                return Err(invalid!("source store lacks parameter {}", p.name));
            };
            let v = src.value(id);
            if v.shape() != p.value.shape() {
                return Err(invalid!("shape mismatch copying {}: {:?} vs {:?}", p.name, v.shape(), p.value.shape()));
            }
            p.value = v.clone();
            n += 1;
        }
        Ok(n)
    }
}

/// One row of a partition report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub tensors: usize,
    pub params: usize,
    pub trainable: bool,
}

/// Named parameter groups with their trainable flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub groups: Vec<GroupEntry>,
}

impl ParamPartition {
    pub fn trainable_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.name.as_str()).collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.params).sum()
    }

    pub fn get(&self, name: &str) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Per-parameter gradient accumulators. `None` means no gradient reached
/// the parameter (frozen, detached, or unused).
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self { grads: (0..store.len()).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor, scale: f64) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(t) => t.scaled_add_assign(g, scale),
            slot @ None => {
                *slot = Some(if scale == 1.0 { g.clone() } else { g.map(|x| x * scale) });
            }
        }
    }

    pub fn present(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.present().map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>()).sum())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
}

pub fn hex_digest(h: &[u8; 32]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(64);
    for b in h {
        let _ = write!(s, "{b:02x}");
    }
    s
}
