//! Named parameter storage with insertion-ordered iteration.
//!
//! A [`ParamStore`] owns every learnable tensor of a model as flat data plus
//! shape, keyed by a hierarchical name such as `enc.fl.l2.conv1.w`. Iteration
//! order is insertion order, which fixes the layout of checkpoints and of the
//! optimizer's moment vectors. A [`Binder`] lends parameters to a [`Tape`]
//! for one forward/backward pass and routes gradients back by name; frozen
//! parameters are bound as constants, so no gradient is ever produced for
//! them and an optimizer driven by [`Binder::grads`] cannot touch them.

use indexmap::IndexMap;

use crate::dtype::Real;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<T>) {
        assert!(
            shape.iter().product::<usize>() == data.len(),
            "contract violation: parameter {name} has {} values for shape {shape:?}",
            data.len()
        );
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                frozen: false,
            },
        );
        assert!(prev.is_none(), "contract violation: duplicate parameter {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("contract violation: unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("contract violation: unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Mark exactly the parameters matched by `pred` as frozen; all others
    /// become trainable again. Phase transitions call this with the full
    /// predicate for the phase, so freezes never accumulate across calls.
    pub fn set_frozen_where<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for (name, p) in self.entries.iter_mut() {
            p.frozen = pred(name);
        }
    }

    pub fn thaw_all(&mut self) {
        self.set_frozen_where(|_| false);
    }

    /// FNV-1a hash of a parameter's shape and exact bit pattern. Two calls
    /// agree iff the parameter is bit-identical, which is what the pretrain
    /// freeze contract checks.
    pub fn fingerprint(&self, name: &str) -> u64 {
        let p = self.get(name);
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for d in &p.shape {
            for b in (*d as u64).to_le_bytes() {
                eat(b);
            }
        }
        for v in &p.data {
            // f32 -> f64 is exact, so these bits identify the value for
            // either dtype.
            for b in v.to_f64().to_bits().to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// Lends parameters from a store to one tape and remembers the ids, so the
/// same parameter is pushed once per forward no matter how often a block
/// asks for it.
pub struct Binder<'s, T: Real> {
    store: &'s ParamStore<T>,
    bound: IndexMap<String, TensorId>,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Binder {
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<T>, name: &str) -> TensorId {
        if let Some(id) = self.bound.get(name) {
            return *id;
        }
        let p = self.store.get(name);
        let id = if p.frozen {
            tape.leaf(p.data.clone(), &p.shape)
        } else {
            tape.param(p.data.clone(), &p.shape)
        };
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Gradients of every bound, trainable parameter that received one,
    /// keyed by name, in binding order.
    pub fn grads(&self, tape: &Tape<T>) -> IndexMap<String, Vec<T>> {
        let mut out = IndexMap::new();
        for (name, id) in &self.bound {
            if self.store.get(name).frozen {
                continue;
            }
            if let Some(g) = tape.grad(*id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}
