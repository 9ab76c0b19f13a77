//! Per-block scenario adapter: K bottleneck branches feeding a shared
//! projector. New scenarios get a new branch; the projector grows by one
//! zero-initialized slot so existing outputs are preserved exactly, and only
//! the active branch (plus the projector) trains while the rest stay frozen.

use crate::error::{Error, Result};
use crate::params::{ParamBinder, ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{InitMode, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Down-projection, activation, up-projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchParams {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub activation: Activation,
}

impl BranchParams {
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_down, self.b_down, self.w_up, self.b_up]
    }
}

/// Audit of one branch expansion: the projector's output on a probe batch
/// must be unchanged to the bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub task_index: usize,
    pub layer: usize,
    pub prior_k: usize,
    pub new_k: usize,
    pub max_output_delta: f64,
}

#[derive(Debug, Clone)]
pub struct CsrForward {
    /// Projected multi-branch output, `[seq, d_model]`.
    pub p: Var,
    /// Raw per-branch outputs, each `[seq, d_model]`.
    pub branch_outs: Vec<Var>,
}

/// One vision block's scenario-branch set plus its projector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsrModule {
    pub layer: usize,
    pub d_model: usize,
    pub d_bottleneck: usize,
    pub branches: Vec<BranchParams>,
    pub projector: ParamId,
    /// Ablation switch: without the projector, branch outputs are summed.
    pub use_projector: bool,
}

fn branch_init(
    store: &mut ParamStore,
    layer: usize,
    slot: usize,
    d1: usize,
    d2: usize,
    seed: u64,
) -> BranchParams {
    let name = |part: &str| format!("block{layer}.csr.branch{slot}.{part}");
    let w_down = store.add(
        name("w_down"),
        Tensor::init(&[d1, d2], InitMode::Normal { seed: derive_seed(seed, &[layer as u64, slot as u64, 0]), std: 0.02 })
            .expect("static shape"),
        true,
    );
    let b_down = store.add(name("b_down"), Tensor::zeros(&[d2]), true);
    // Zero up-projection: a fresh branch contributes nothing until trained.
    let w_up = store.add(name("w_up"), Tensor::zeros(&[d2, d1]), true);
    let b_up = store.add(name("b_up"), Tensor::zeros(&[d1]), true);
    BranchParams { w_down, b_down, w_up, b_up, activation: Activation::Gelu }
}

impl CsrModule {
    /// Fresh module with a single branch. The projector starts as the
    /// identity on its only slot and carries no bias.
    pub fn init(
        store: &mut ParamStore,
        layer: usize,
        d1: usize,
        d2: usize,
        seed: u64,
        use_projector: bool,
    ) -> Result<CsrModule> {
        if d2 >= d1 {
            return Err(Error::config(
                "d_bottleneck",
                format!("bottleneck width {d2} must be smaller than model width {d1}"),
            ));
        }
        let branch = branch_init(store, layer, 0, d1, d2, seed);
        let mut eye = vec![0.0; d1 * d1];
        for i in 0..d1 {
            eye[i * d1 + i] = 1.0;
        }
        let projector = store.add(
            format!("block{layer}.csr.projector"),
            Tensor::from_data(&[d1, d1], eye)?,
            true,
        );
        Ok(CsrModule { layer, d_model: d1, d_bottleneck: d2, branches: vec![branch], projector, use_projector })
    }

    pub fn k(&self) -> usize {
        self.branches.len()
    }

    /// `up(act(down(a)))` for one branch.
    pub fn branch_forward(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        branch_idx: usize,
        a: Var,
    ) -> Result<Var> {
        let br = self
            .branches
            .get(branch_idx)
            .ok_or_else(|| Error::contract(format!("branch index {branch_idx} out of range {}", self.k())))?;
        if tape.shape(a) != [tape.shape(a)[0], self.d_model] {
            return Err(Error::shape(format!(
                "branch input must be [seq, {}], got {:?}",
                self.d_model,
                tape.shape(a)
            )));
        }
        let w_down = binder.var(tape, br.w_down);
        let b_down = binder.var(tape, br.b_down);
        let w_up = binder.var(tape, br.w_up);
        let b_up = binder.var(tape, br.b_up);
        let h = tape.matmul(a, w_down)?;
        let h = tape.add_row(h, b_down)?;
        let h = match br.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Identity => h,
        };
        let out = tape.matmul(h, w_up)?;
        tape.add_row(out, b_up)
    }

    /// All branches on the same input, concatenated and projected.
    pub fn forward(&self, tape: &mut Tape, binder: &mut ParamBinder, a: Var) -> Result<CsrForward> {
        if self.branches.is_empty() {
            return Err(Error::integrity("module must keep at least one branch"));
        }
        let mut branch_outs = Vec::with_capacity(self.k());
        for idx in 0..self.k() {
            branch_outs.push(self.branch_forward(tape, binder, idx, a)?);
        }
        let p = if self.use_projector {
            let proj = binder.var(tape, self.projector);
            let pshape = tape.shape(proj);
            if pshape != [self.k() * self.d_model, self.d_model] {
                return Err(Error::integrity(format!(
                    "projector width {:?} does not match {} branches of width {}",
                    pshape,
                    self.k(),
                    self.d_model
                )));
            }
            let cat = tape.concat_cols(&branch_outs)?;
            tape.matmul(cat, proj)?
        } else {
            let mut acc = branch_outs[0];
            for &b in &branch_outs[1..] {
                acc = tape.add(acc, b)?;
            }
            acc
        };
        Ok(CsrForward { p, branch_outs })
    }

    /// Plain-value forward used for expansion probes; no gradients involved.
    pub fn forward_values(&self, store: &ParamStore, a: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(store);
        let av = tape.constant(a.clone());
        let out = self.forward(&mut tape, &mut binder, av)?;
        Ok(tape.value(out.p).data.clone())
    }

    /// Append a branch for a new scenario. The projector grows by one slot
    /// whose rows are zero, so its output is unchanged on any input; the new
    /// branch starts trainable and all prior branches freeze.
    pub fn expand_branch(&mut self, store: &mut ParamStore, init_seed: u64) -> Result<()> {
        let k = self.k();
        let d1 = self.d_model;
        let branch = branch_init(store, self.layer, k, d1, self.d_bottleneck, init_seed);
        let old = store.value(self.projector).clone();
        if old.shape != [k * d1, d1] {
            return Err(Error::integrity(format!(
                "projector shape {:?} inconsistent with K={k} before expansion",
                old.shape
            )));
        }
        let mut grown = vec![0.0; (k + 1) * d1 * d1];
        grown[..k * d1 * d1].copy_from_slice(&old.data);
        store.replace_value(self.projector, Tensor::from_data(&[(k + 1) * d1, d1], grown)?);
        self.branches.push(branch);
        self.set_trainable(store, k)?;
        Ok(())
    }

    /// Expansion plus a bit-exactness audit over a probe batch of per-layer
    /// inputs `[seq, d_model]`.
    pub fn expand_branch_probed(
        &mut self,
        store: &mut ParamStore,
        task_index: usize,
        init_seed: u64,
        probe: &[Tensor],
    ) -> Result<ExpansionRecord> {
        let before: Vec<Vec<f64>> =
            probe.iter().map(|a| self.forward_values(store, a)).collect::<Result<_>>()?;
        let prior_k = self.k();
        self.expand_branch(store, init_seed)?;
        let mut max_delta = 0.0f64;
        for (a, old) in probe.iter().zip(&before) {
            let new = self.forward_values(store, a)?;
            for (n, o) in new.iter().zip(old) {
                max_delta = max_delta.max((n - o).abs());
            }
        }
        Ok(ExpansionRecord {
            task_index,
            layer: self.layer,
            prior_k,
            new_k: self.k(),
            max_output_delta: max_delta,
        })
    }

    /// Mark exactly one branch (plus the projector) trainable.
    pub fn set_trainable(&self, store: &mut ParamStore, branch_idx: usize) -> Result<()> {
        if branch_idx >= self.k() {
            return Err(Error::contract(format!(
                "branch index {branch_idx} out of range for K={}",
                self.k()
            )));
        }
        for (i, br) in self.branches.iter().enumerate() {
            for id in br.param_ids() {
                store.set_trainable(id, i == branch_idx);
            }
        }
        store.set_trainable(self.projector, true);
        Ok(())
    }

    pub fn freeze_all(&self, store: &mut ParamStore) {
        for br in &self.branches {
            for id in br.param_ids() {
                store.set_trainable(id, false);
            }
        }
        store.set_trainable(self.projector, false);
    }

    pub fn branch_param_ids(&self, branch_idx: usize) -> Vec<ParamId> {
        self.branches[branch_idx].param_ids().to_vec()
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.branches.iter().flat_map(|b| b.param_ids()).collect();
        ids.push(self.projector);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_inputs(seq: usize, d1: usize, n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| Tensor::init(&[seq, d1], InitMode::Normal { seed: 100 + i as u64, std: 1.0 }).unwrap())
            .collect()
    }

    fn module(d1: usize, d2: usize) -> (ParamStore, CsrModule) {
        let mut store = ParamStore::new();
        let m = CsrModule::init(&mut store, 0, d1, d2, 42, true).unwrap();
        (store, m)
    }

    #[test]
    fn fresh_branch_outputs_zero() {
        let (store, m) = module(8, 2);
        let a = Tensor::init(&[3, 8], InitMode::Normal { seed: 5, std: 1.0 }).unwrap();
        let out = m.forward_values(&store, &a).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn k1_with_identity_projector_passes_branch_through() {
        let (mut store, m) = module(8, 2);
        // Give the branch a nonzero up-projection so it produces signal.
        let w_up = m.branches[0].w_up;
        store.replace_value(
            w_up,
            Tensor::init(&[2, 8], InitMode::Normal { seed: 9, std: 0.3 }).unwrap(),
        );
        let a = Tensor::init(&[3, 8], InitMode::Normal { seed: 5, std: 1.0 }).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let av = tape.constant(a.clone());
        let fwd = m.forward(&mut tape, &mut binder, av).unwrap();
        assert_eq!(tape.value(fwd.p).data, tape.value(fwd.branch_outs[0]).data);
    }

    #[test]
    fn k2_matches_manual_concat_matmul() {
        let (mut store, mut m) = module(6, 2);
        m.expand_branch(&mut store, 7).unwrap();
        for (i, br) in m.branches.clone().into_iter().enumerate() {
            store.replace_value(
                br.w_up,
                Tensor::init(&[2, 6], InitMode::Normal { seed: 20 + i as u64, std: 0.5 }).unwrap(),
            );
        }
        store.replace_value(
            m.projector,
            Tensor::init(&[12, 6], InitMode::Normal { seed: 33, std: 0.2 }).unwrap(),
        );
        let a = Tensor::init(&[4, 6], InitMode::Normal { seed: 5, std: 1.0 }).unwrap();

        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let av = tape.constant(a.clone());
        let fwd = m.forward(&mut tape, &mut binder, av).unwrap();

        // Manual route: branch outputs -> concat -> matmul.
        let b0 = tape.value(fwd.branch_outs[0]).clone();
        let b1 = tape.value(fwd.branch_outs[1]).clone();
        let mut tape2 = Tape::new();
        let c0 = tape2.constant(b0);
        let c1 = tape2.constant(b1);
        let cat = tape2.concat_cols(&[c0, c1]).unwrap();
        let proj = tape2.constant(store.value(m.projector).clone());
        let manual = tape2.matmul(cat, proj).unwrap();
        for (x, y) in tape.value(fwd.p).data.iter().zip(&tape2.value(manual).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn expansion_preserves_output_bitwise_and_increments_k() {
        let (mut store, mut m) = module(8, 2);
        // Train-ish perturbation so the existing branch is nontrivial.
        let w_up = m.branches[0].w_up;
        store.replace_value(
            w_up,
            Tensor::init(&[2, 8], InitMode::Normal { seed: 9, std: 0.3 }).unwrap(),
        );
        let probe = probe_inputs(3, 8, 16);
        let rec = m.expand_branch_probed(&mut store, 2, 77, &probe).unwrap();
        assert_eq!(rec.prior_k, 1);
        assert_eq!(rec.new_k, 2);
        assert_eq!(rec.max_output_delta, 0.0);
        assert_eq!(store.value(m.projector).shape, vec![16, 8]);
    }

    #[test]
    fn expansion_without_projector_also_preserves_output() {
        let mut store = ParamStore::new();
        let mut m = CsrModule::init(&mut store, 0, 8, 2, 42, false).unwrap();
        let w_up = m.branches[0].w_up;
        store.replace_value(
            w_up,
            Tensor::init(&[2, 8], InitMode::Normal { seed: 9, std: 0.3 }).unwrap(),
        );
        let probe = probe_inputs(3, 8, 8);
        let rec = m.expand_branch_probed(&mut store, 2, 77, &probe).unwrap();
        assert_eq!(rec.max_output_delta, 0.0);
    }

    #[test]
    fn only_active_branch_and_projector_train() {
        let (mut store, mut m) = module(8, 2);
        m.expand_branch(&mut store, 7).unwrap();
        m.expand_branch(&mut store, 8).unwrap();
        m.set_trainable(&mut store, 1).unwrap();
        let trainable = store.trainable_ids();
        let mut expected = m.branch_param_ids(1);
        expected.push(m.projector);
        expected.sort();
        let mut got = trainable.clone();
        got.sort();
        assert_eq!(got, expected);
        // Toggling twice is idempotent.
        m.set_trainable(&mut store, 1).unwrap();
        let mut again = store.trainable_ids();
        again.sort();
        assert_eq!(again, expected);
        assert!(m.set_trainable(&mut store, 3).is_err());
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let (mut store, mut m) = module(8, 2);
        m.expand_branch(&mut store, 7).unwrap();
        m.set_trainable(&mut store, 1).unwrap();
        let a = Tensor::init(&[3, 8], InitMode::Normal { seed: 5, std: 1.0 }).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store);
        let av = tape.constant(a);
        let fwd = m.forward(&mut tape, &mut binder, av).unwrap();
        let loss = tape.sum_all(fwd.p);
        tape.backward(loss).unwrap();
        store.accumulate_from_tape(&tape);
        for id in m.branch_param_ids(0) {
            assert!(store.value(id).grad.is_none(), "frozen branch received a gradient");
        }
        assert!(store.value(m.projector).grad.is_some());
    }

    #[test]
    fn projector_linearity_doubling_weights_doubles_output() {
        let (mut store, m) = module(8, 2);
        let w_up = m.branches[0].w_up;
        store.replace_value(
            w_up,
            Tensor::init(&[2, 8], InitMode::Normal { seed: 9, std: 0.3 }).unwrap(),
        );
        let a = Tensor::init(&[3, 8], InitMode::Normal { seed: 5, std: 1.0 }).unwrap();
        let once = m.forward_values(&store, &a).unwrap();
        let mut doubled = store.value(m.projector).clone();
        for v in doubled.data.iter_mut() {
            *v *= 2.0;
        }
        store.replace_value(m.projector, doubled);
        let twice = m.forward_values(&store, &a).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_projection_identity_construction() {
        // With identity activation, w_down = Q and w_up = Q^T for orthonormal
        // Q columns, the branch is the orthogonal projector onto col(Q).
        let d1 = 6;
        let d2 = 2;
        let mut store = ParamStore::new();
        let mut m = CsrModule::init(&mut store, 0, d1, d2, 1, true).unwrap();
        m.branches[0].activation = Activation::Identity;
        // Gram-Schmidt on a seeded matrix.
        let raw = Tensor::init(&[d2, d1], InitMode::Normal { seed: 4, std: 1.0 }).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..d2).map(|i| raw.data[i * d1..(i + 1) * d1].to_vec()).collect();
        for i in 0..d2 {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let rj = rows[j].clone();
                for (v, w) in rows[i].iter_mut().zip(rj) {
                    *v -= dot * w;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        // w_down[d1,d2] = Q (columns orthonormal), w_up[d2,d1] = Q^T.
        let mut wd = vec![0.0; d1 * d2];
        let mut wu = vec![0.0; d2 * d1];
        for r in 0..d2 {
            for c in 0..d1 {
                wd[c * d2 + r] = rows[r][c];
                wu[r * d1 + c] = rows[r][c];
            }
        }
        store.replace_value(m.branches[0].w_down, Tensor::from_data(&[d1, d2], wd).unwrap());
        store.replace_value(m.branches[0].w_up, Tensor::from_data(&[d2, d1], wu).unwrap());

        let a = Tensor::init(&[5, d1], InitMode::Normal { seed: 10, std: 1.0 }).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let av = tape.constant(a.clone());
        let out = m.branch_forward(&mut tape, &mut binder, 0, av).unwrap();
        // Projection is idempotent: applying the branch twice equals once.
        let out2 = m.branch_forward(&mut tape, &mut binder, 0, out).unwrap();
        for (x, y) in tape.value(out).data.iter().zip(&tape.value(out2).data) {
            assert!((x - y).abs() < 1e-10);
        }
        // Rank d2: outputs lie in a d2-dimensional subspace. Check the mean
        // row is reproduced by projecting again (already covered) and that
        // output differs from input (it is a strict projection).
        assert_ne!(tape.value(out).data, a.data);
    }

    #[test]
    fn op_count_is_k_bottlenecks_plus_one_projector_matmul() {
        let (mut store, mut m) = module(8, 2);
        m.expand_branch(&mut store, 7).unwrap();
        m.expand_branch(&mut store, 8).unwrap();
        let a = Tensor::init(&[3, 8], InitMode::Normal { seed: 5, std: 1.0 }).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let av = tape.constant(a);
        let from = tape.len();
        m.forward(&mut tape, &mut binder, av).unwrap();
        let matmuls = tape.count_ops("matmul", from, tape.len());
        // 2 matmuls per branch bottleneck + 1 projector application.
        assert_eq!(matmuls, 2 * m.k() + 1);
    }
}
