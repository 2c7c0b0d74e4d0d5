use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors with a trainable/frozen partition.
///
/// Names iterate in sorted order, which fixes the order of every loop over
/// parameters (binding, optimizer updates, serialization).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

/// Which parameters of a store are updated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Only the pooled token embedding (extra token 0).
    ClsOnly,
    All,
    None,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_only" => Ok(PartitionMode::ClsOnly),
            "all" => Ok(PartitionMode::All),
            "none" => Ok(PartitionMode::None),
            other => Err(Error::invalid(format!(
                "unknown partition mode `{}` (expected cls_only, all or none)",
                other
            ))),
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::ClsOnly => "cls_only",
            PartitionMode::All => "all",
            PartitionMode::None => "none",
        })
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor; new tensors start trainable.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.trainable.insert(name.clone());
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.trainable.iter()
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(move |k| !self.trainable.contains(*k))
    }

    pub fn set_trainable(&mut self, names: impl IntoIterator<Item = String>) -> Result<()> {
        let mut set = BTreeSet::new();
        for n in names {
            if !self.tensors.contains_key(&n) {
                return Err(Error::invalid(format!("unknown parameter `{}`", n)));
            }
            set.insert(n);
        }
        self.trainable = set;
        Ok(())
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Put every tensor on the graph; trainable ones receive gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), self.is_trainable(k))))
            .collect();
        Bound { vars }
    }

    /// Put every tensor on the graph as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Order-sensitive FNV-1a hash over names, shapes and bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, t) in &self.tensors {
            eat(k.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameters placed on a graph, by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    /// Collect gradients of the bound tensors that received one.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Uniform Glorot-style init for a `fan_in × fan_out` weight.
pub fn init_linear<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("shape")
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_modes() {
        assert_eq!("cls_only".parse::<PartitionMode>().unwrap(), PartitionMode::ClsOnly);
        assert!("everything".parse::<PartitionMode>().is_err());
    }

    #[test]
    fn fingerprint_sees_single_bit() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[2], 1.0));
        let h = s.fingerprint();
        s.get_mut("a").unwrap().data_mut()[1] = f32::from_bits(1.0f32.to_bits() ^ 1);
        assert_ne!(h, s.fingerprint());
    }
}
