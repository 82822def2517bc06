//! Named parameter storage with deterministic (lexicographic) iteration.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Name -> parameter map. Iteration order is lexicographic by name, which is
/// what makes optimizer sweeps and checkpoints reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries
            .insert(name.into(), Param { value, grad: None, trainable: true });
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries
            .insert(name.into(), Param { value, grad: None, trainable: false });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert every parameter as a leaf of `g`, returning the name -> node map.
    pub fn attach(&self, g: &mut Graph) -> AttachedParams {
        let mut map = BTreeMap::new();
        for (name, p) in self.entries.iter() {
            map.insert(name.clone(), g.leaf(p.value.clone()));
        }
        AttachedParams { map }
    }

    /// Attach all parameters, but map `name` to an existing node instead of
    /// a fresh leaf. Lets gradient checks differentiate a loss with respect
    /// to one chosen parameter tensor.
    pub fn attach_with_override(&self, g: &mut Graph, name: &str, node: NodeId) -> AttachedParams {
        let mut map = BTreeMap::new();
        for (n, p) in self.entries.iter() {
            if n == name {
                map.insert(n.clone(), node);
            } else {
                map.insert(n.clone(), g.leaf(p.value.clone()));
            }
        }
        AttachedParams { map }
    }

    /// Pull gradients of attached leaves back into the store (accumulating).
    pub fn accumulate_grads(&mut self, g: &Graph, attached: &AttachedParams) {
        for (name, p) in self.entries.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(&id) = attached.map.get(name) else { continue };
            if let Some(gr) = g.grad(id) {
                match p.grad.as_mut() {
                    Some(acc) => acc.add_assign(gr),
                    None => p.grad = Some(gr.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Give every trainable parameter a (zero) gradient. Training loops call
    /// this so parameters a particular minibatch never touched still take
    /// their momentum step.
    pub fn ensure_grads(&mut self) {
        for p in self.entries.values_mut() {
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros_like(&p.value));
            }
        }
    }

    /// Flat little-endian image of all values, in lexicographic name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.entries.values() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Node handles for one attachment of a store to a graph.
pub struct AttachedParams {
    map: BTreeMap<String, NodeId>,
}

impl AttachedParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not attached")))
    }
}

/// Glorot-uniform weight `<prefix>.w` of shape (fan_in x fan_out) plus a zero
/// bias `<prefix>.b`.
pub fn init_linear(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha12Rng,
) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    store.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, data));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Zero-initialized linear layer; used for flow output heads so a fresh flow
/// is exactly the identity transform.
pub fn init_linear_zero(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParameterStore::new();
        s.insert("b.w", Tensor::scalar(1.0));
        s.insert("a.w", Tensor::scalar(2.0));
        s.insert("a.b", Tensor::scalar(3.0));
        let names: Vec<&String> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.b", "a.w", "b.w"]);
    }

    #[test]
    fn grads_accumulate_and_zero() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let at = s.attach(&mut g);
        let x = at.id("x").unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        s.accumulate_grads(&g, &at);
        s.accumulate_grads(&g, &at);
        assert_eq!(s.param("x").unwrap().grad.as_ref().unwrap().item(), 8.0);
        s.zero_grads();
        assert!(s.param("x").unwrap().grad.is_none());
    }
}
