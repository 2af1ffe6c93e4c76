//! Named parameter groups with per-tensor trainable flags.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Item/position embeddings and the encoder (Θ).
    Backbone,
    /// Prompt generator (ϑ).
    PromptGenerator,
    /// Attribute embeddings and the attribute MLP (φ).
    ProfileLearner,
    TaskHead,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Backbone,
        Group::PromptGenerator,
        Group::ProfileLearner,
        Group::TaskHead,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Group::Backbone => 0,
            Group::PromptGenerator => 1,
            Group::ProfileLearner => 2,
            Group::TaskHead => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Backbone => "backbone",
            Group::PromptGenerator => "prompt",
            Group::ProfileLearner => "profile",
            Group::TaskHead => "head",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: Group,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Parameter counts split by trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

/// Tape variables for every parameter of a store, by name.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Param { group, tensor });
        Ok(())
    }

    /// Uniform(±1/√fan) weight, where `fan` is the last extent.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, group: Group, shape: Vec<usize>, rng: &mut R) -> Result<()> {
        let fan = *shape.last().unwrap_or(&1) as f64;
        let t = Tensor::uniform(shape, 1.0 / fan.sqrt(), rng)?;
        self.insert(name, group, t)
    }

    pub fn init_zeros(&mut self, name: &str, group: Group, shape: Vec<usize>) -> Result<()> {
        self.insert(name, group, Tensor::zeros(shape)?)
    }

    pub fn init_ones(&mut self, name: &str, group: Group, shape: Vec<usize>) -> Result<()> {
        self.insert(name, group, Tensor::filled(shape, 1.0)?)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::checkpoint(format!("missing parameter {name}")))
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.values().any(|p| p.group == group)
    }

    pub fn set_group_trainable(&mut self, group: Group, on: bool) {
        for p in self.params.values_mut().filter(|p| p.group == group) {
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for p in self.params.values_mut() {
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts { trainable: 0, total: 0 };
        for p in self.params.values() {
            c.total += p.tensor.numel();
            if p.tensor.requires_grad() {
                c.trainable += p.tensor.numel();
            }
        }
        c
    }

    pub fn group_size(&self, group: Group) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// SHA-256 over the names, shapes and value bytes of one group.
    pub fn group_digest(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &e in p.tensor.shape() {
                h.update((e as u32).to_le_bytes());
            }
            h.update(p.tensor.value_bytes());
        }
        hex(&h.finalize())
    }

    /// Records every parameter as a tape leaf (borrowed, no copy).
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(&p.tensor)))
            .collect();
        Bindings { vars }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Adds tape gradients into the trainable tensors.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            if !p.tensor.requires_grad() {
                continue;
            }
            if let Some(g) = bindings.vars.get(name).and_then(|&v| grads.get(v)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn adam(&self, config: AdamConfig) -> Result<Adam> {
        Adam::new(config, self.params.iter().map(|(k, p)| (k.as_str(), &p.tensor)))
    }

    pub fn adam_step(&mut self, opt: &mut Adam) -> Result<()> {
        opt.step(self.params.iter_mut().map(|(k, p)| (k.as_str(), &mut p.tensor)))
    }

    /// Copies values (not flags) of every parameter present in both
    /// stores with matching shapes. Returns the number copied.
    pub fn copy_values_from(&mut self, other: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if !filter(name) {
                continue;
            }
            if let Some(src) = other.params.get(name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::checkpoint(format!("shape mismatch for {name}")));
                }
                p.tensor.data_mut().copy_from_slice(src.tensor.data());
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.data().iter().all(|x| x.is_finite()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.init_weight("backbone.w", Group::Backbone, vec![3, 4], &mut rng).unwrap();
        s.init_zeros("prompt.b", Group::PromptGenerator, vec![4]).unwrap();
        s
    }

    #[test]
    fn counts_follow_flags() {
        let mut s = store();
        assert_eq!(s.counts(), ParamCounts { trainable: 0, total: 16 });
        s.set_group_trainable(Group::PromptGenerator, true);
        assert_eq!(s.counts().trainable, 4);
        assert_eq!(s.counts().fraction(), 0.25);
    }

    #[test]
    fn frozen_group_survives_steps_bit_for_bit() {
        let mut s = store();
        s.set_group_trainable(Group::PromptGenerator, true);
        let before = s.group_digest(Group::Backbone);
        let mut opt = s.adam(AdamConfig::with_lr(0.1)).unwrap();
        for _ in 0..5 {
            s.zero_grad();
            let (binds, grads) = {
                let mut tape = Tape::new();
                let b = s.bind(&mut tape);
                let w = b.var("backbone.w").unwrap();
                let p = b.var("prompt.b").unwrap();
                let h = tape.matmul_t(w, p).unwrap();
                let l = tape.sum(h);
                let g = tape.backward(l).unwrap();
                assert!(g.get(w).is_none());
                (b, g)
            };
            s.accumulate(&binds, &grads).unwrap();
            s.adam_step(&mut opt).unwrap();
        }
        assert_eq!(before, s.group_digest(Group::Backbone));
        assert!(s.get("prompt.b").unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_gradient_step_leaves_parameters_unchanged() {
        let mut s = store();
        s.set_all_trainable(true);
        let before = s.clone();
        let mut opt = s.adam(AdamConfig::default()).unwrap();
        s.adam_step(&mut opt).unwrap();
        assert_eq!(opt.steps(), 1);
        for (name, p) in s.iter() {
            assert_eq!(p.tensor.data(), before.get(name).unwrap().data());
        }
    }
}
