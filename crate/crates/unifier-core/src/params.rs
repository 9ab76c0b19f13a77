//! Named parameter storage shared by the model, the optimizer, and
//! checkpointing. Tapes reference parameters by id; after a backward pass
//! the tape's leaf gradients are accumulated back into the store.

use crate::error::{Error, Result};
use crate::hash::checksum_f64;
use crate::tensor::tape::{SourceId, Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> ParamId {
        tensor.requires_grad = trainable;
        tensor.grad = None;
        self.params.push(Param { name: name.into(), tensor });
        ParamId(self.params.len() - 1)
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
        &self.params[id.0].tensor
    }

    /// Replace a parameter's tensor in place (used when a projector grows).
    /// Trainability is preserved.
    pub fn replace_value(&mut self, id: ParamId, tensor: Tensor) {
        let trainable = self.params[id.0].tensor.requires_grad;
        let mut t = tensor;
        t.requires_grad = trainable;
        t.grad = None;
        self.params[id.0].tensor = t;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.tensor.requires_grad = trainable;
        if !trainable {
            p.tensor.grad = None;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].tensor.requires_grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Put a parameter on a tape; its gradient will flow back via
    /// [`ParamStore::accumulate_from_tape`].
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.leaf_with_source(&self.params[id.0].tensor, SourceId(id.0))
    }

    /// Parameter as a gradient-blocked constant (frozen snapshot forwards).
    pub fn leaf_frozen(&self, tape: &mut Tape, id: ParamId) -> Var {
        let mut t = self.params[id.0].tensor.clone();
        t.requires_grad = false;
        tape.leaf(&t)
    }

    /// Add the tape's leaf gradients into the store. Repeated calls without
    /// `zero_grads` accumulate, so callers control their own averaging.
    pub fn accumulate_from_tape(&mut self, tape: &Tape) {
        let collected: Vec<(usize, Vec<f64>)> =
            tape.source_grads().map(|(src, g)| (src.0, g.to_vec())).collect();
        for (ix, g) in collected {
            self.params[ix].tensor.accumulate_grad(&g);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Bit-exact checksum over the given parameters' values.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for id in ids {
            acc ^= checksum_f64(&self.params[id.0].tensor.data).rotate_left(17);
            acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        }
        acc
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Apply one AdamW step over `ids` using their accumulated grads.
    /// Parameters without a grad buffer contribute zero gradient.
    pub fn adamw_step(
        &mut self,
        ids: &[ParamId],
        state: &mut crate::tensor::optim::OptimizerState,
        lr: f64,
    ) -> Result<()> {
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                let t = &self.params[id.0].tensor;
                t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        // Split borrow: values mutated, grads already copied out.
        let mut views: Vec<&mut [f64]> = Vec::with_capacity(ids.len());
        let mut taken: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| std::mem::take(&mut self.params[id.0].tensor.data))
            .collect();
        for buf in taken.iter_mut() {
            views.push(buf.as_mut_slice());
        }
        let grad_views: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let result = crate::tensor::optim::adamw_step(&mut views, &grad_views, state, lr);
        for (id, buf) in ids.iter().zip(taken) {
            self.params[id.0].tensor.data = buf;
        }
        result
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

impl std::ops::Index<ParamId> for ParamStore {
    type Output = Param;
    fn index(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }
}

pub fn optimizer_for(store: &ParamStore, ids: &[ParamId], weight_decay: f64) -> crate::tensor::optim::OptimizerState {
    let sizes: Vec<usize> = ids.iter().map(|id| store.value(*id).numel()).collect();
    crate::tensor::optim::OptimizerState::new(&sizes, weight_decay)
}

/// Resolves parameters to tape vars during a forward pass.
///
/// Each parameter becomes one leaf per tape regardless of how many ops use
/// it, so gradients from every use accumulate correctly. A frozen binder
/// emits gradient-blocked constants (snapshot forwards); overrides let
/// verification code substitute a probe var for a single parameter.
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    frozen: bool,
    cache: std::collections::BTreeMap<usize, Var>,
    overrides: std::collections::BTreeMap<usize, Var>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore) -> ParamBinder<'a> {
        ParamBinder { store, frozen: false, cache: Default::default(), overrides: Default::default() }
    }

    /// All parameters enter the tape as constants; nothing trains.
    pub fn frozen(store: &'a ParamStore) -> ParamBinder<'a> {
        ParamBinder { store, frozen: true, cache: Default::default(), overrides: Default::default() }
    }

    pub fn with_override(mut self, id: ParamId, var: Var) -> ParamBinder<'a> {
        self.overrides.insert(id.0, var);
        self
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(&v) = self.overrides.get(&id.0) {
            return v;
        }
        if let Some(&v) = self.cache.get(&id.0) {
            return v;
        }
        let v = if self.frozen {
            self.store.leaf_frozen(tape, id)
        } else {
            self.store.leaf(tape, id)
        };
        self.cache.insert(id.0, v);
        v
    }
}

#[allow(unused)]
fn _err(_: Error) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::InitMode;

    #[test]
    fn grads_flow_back_to_store_and_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_data(&[2], vec![1.0, 2.0]).unwrap(), true);
        let mut tape = Tape::new();
        let v = store.leaf(&mut tape, w);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        store.accumulate_from_tape(&tape);
        assert_eq!(store.value(w).grad.as_deref(), Some(&[2.0, 4.0][..]));
        // Second accumulation without zero_grads doubles.
        store.accumulate_from_tape(&tape);
        assert_eq!(store.value(w).grad.as_deref(), Some(&[4.0, 8.0][..]));
        store.zero_grads();
        assert!(store.value(w).grad.is_none());
    }

    #[test]
    fn frozen_params_receive_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_data(&[2], vec![1.0, 2.0]).unwrap(), false);
        let mut tape = Tape::new();
        let v = store.leaf(&mut tape, w);
        let loss = tape.sum_all(v);
        tape.backward(loss).unwrap();
        store.accumulate_from_tape(&tape);
        assert!(store.value(w).grad.is_none());
    }

    #[test]
    fn checksum_tracks_only_listed_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::init(&[4], InitMode::Normal { seed: 1, std: 1.0 }).unwrap(), true);
        let b = store.add("b", Tensor::init(&[4], InitMode::Normal { seed: 2, std: 1.0 }).unwrap(), true);
        let before = store.checksum(&[a]);
        store.get_mut(b).tensor.data[0] += 1.0;
        assert_eq!(store.checksum(&[a]), before);
        store.get_mut(a).tensor.data[0] += 1.0;
        assert_ne!(store.checksum(&[a]), before);
    }

    #[test]
    fn adamw_via_store_moves_trainables() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_data(&[1], vec![1.0]).unwrap(), true);
        store.get_mut(w).tensor.accumulate_grad(&[1.0]);
        let ids = vec![w];
        let mut state = optimizer_for(&store, &ids, 0.0);
        store.adamw_step(&ids, &mut state, 0.1).unwrap();
        assert!(store.value(w).data[0] < 1.0);
    }
}
