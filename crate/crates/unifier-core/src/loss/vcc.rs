//! Consistency constraint across scenario branches and model generations.
//!
//! Each layer's branch outputs are pulled toward their elementwise mean (the
//! scenario prototype) and the projected adapter output is pulled toward the
//! previous model's, both through temperature-softened KL on channel means.
//! Looser or stricter alternatives (per-token KL, plain squared distance)
//! are selectable for ablations.

use crate::error::{Error, Result};
use crate::model::LayerTrace;
use crate::tensor::tape::{ReduceAxis, Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which distance the constraint applies between a representation and its
/// reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Softened KL on feature/embedding channel means (the default).
    KlReduced,
    /// Softened KL per token, averaged over the sequence.
    KlSpatial,
    /// Squared distance on channel means.
    L2Reduced,
    /// Squared distance on the full `[seq, d]` representation.
    L2Full,
}

/// Which side of the KL acts as the reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher ‖ student): the usual soft-label distillation form.
    TeacherRef,
    /// KL(student ‖ teacher).
    StudentRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeGrad {
    /// The prototype is detached; branches are pulled toward it.
    Blocked,
    /// Gradients flow through the prototype into every branch.
    Flows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub tau: f64,
    pub variant: Variant,
    pub lambda_vcc: f64,
    pub prototype_grad: PrototypeGrad,
    pub kl_direction: KlDirection,
}

impl Default for ConsistencyConfig {
    fn default() -> ConsistencyConfig {
        ConsistencyConfig {
            tau: 2.0,
            variant: Variant::KlReduced,
            lambda_vcc: 1.0,
            prototype_grad: PrototypeGrad::Blocked,
            kl_direction: KlDirection::TeacherRef,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::config("tau", "temperature must be positive"));
        }
        if self.lambda_vcc < 0.0 {
            return Err(Error::config("lambda_vcc", "loss weight must be nonnegative"));
        }
        Ok(())
    }
}

/// Elementwise mean of the branch outputs (the scenario prototype). With
/// `Blocked` the result is detached from the gradient tape.
pub fn scenario_prototype(
    tape: &mut Tape,
    branch_outs: &[Var],
    grad: PrototypeGrad,
) -> Result<Var> {
    if branch_outs.is_empty() {
        return Err(Error::contract("prototype needs at least one branch output"));
    }
    let shape = tape.shape(branch_outs[0]).to_vec();
    for &b in branch_outs {
        if tape.shape(b) != shape {
            return Err(Error::shape(format!(
                "branch outputs disagree: {:?} vs {shape:?}",
                tape.shape(b)
            )));
        }
    }
    let mut acc = branch_outs[0];
    for &b in &branch_outs[1..] {
        acc = tape.add(acc, b)?;
    }
    let mu = tape.scale(acc, 1.0 / branch_outs.len() as f64);
    Ok(match grad {
        PrototypeGrad::Blocked => tape.detach(mu),
        PrototypeGrad::Flows => mu,
    })
}

/// Relative entropy between temperature-softened distributions, summed over
/// lanes of the last axis. Unscaled: multiply by τ² for the training form.
fn kl_softened(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    tau: f64,
    direction: KlDirection,
) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::shape(format!(
            "kl operands disagree: {:?} vs {:?}",
            tape.shape(student),
            tape.shape(teacher)
        )));
    }
    if tau <= 0.0 {
        return Err(Error::contract("temperature must be positive"));
    }
    let axis = tape.shape(student).len() - 1;
    let s = tape.scale(student, 1.0 / tau);
    let t = tape.scale(teacher, 1.0 / tau);
    let (ref_logits, other_logits) = match direction {
        KlDirection::TeacherRef => (t, s),
        KlDirection::StudentRef => (s, t),
    };
    let p_ref = tape.softmax(ref_logits, axis)?;
    let logp_ref = tape.log_softmax(ref_logits, axis)?;
    let logp_other = tape.log_softmax(other_logits, axis)?;
    let diff = tape.sub(logp_ref, logp_other)?;
    let prod = tape.mul(p_ref, diff)?;
    Ok(tape.sum_all(prod))
}

/// τ²-scaled softened KL between two vectors; 0 iff the softened
/// distributions coincide.
pub fn soft_kl(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    tau: f64,
    direction: KlDirection,
) -> Result<Var> {
    if tape.shape(student).len() != 1 {
        return Err(Error::shape(format!(
            "soft_kl expects vectors, got {:?}",
            tape.shape(student)
        )));
    }
    let kl = kl_softened(tape, student, teacher, tau, direction)?;
    Ok(tape.scale(kl, tau * tau))
}

/// Value-only softened KL (no tape), for the temperature-limit property.
pub fn kl_softened_value(student: &[f64], teacher: &[f64], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_data(&[student.len()], student.to_vec())?);
    let t = tape.constant(Tensor::from_data(&[teacher.len()], teacher.to_vec())?);
    let kl = kl_softened(&mut tape, s, t, tau, KlDirection::TeacherRef)?;
    Ok(tape.value(kl).item())
}

/// Distance between a `[seq, d]` representation and its reference under the
/// configured variant. Gradients flow into `student` only to the extent the
/// caller left `teacher` attached.
pub fn variant_distance(
    tape: &mut Tape,
    cfg: &ConsistencyConfig,
    student: Var,
    teacher: Var,
) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::shape(format!(
            "consistency operands disagree: {:?} vs {:?}",
            tape.shape(student),
            tape.shape(teacher)
        )));
    }
    let shape = tape.shape(student).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("consistency expects [seq, d], got {shape:?}")));
    }
    match cfg.variant {
        Variant::KlReduced => {
            let s_fe = tape.mean_reduce(student, ReduceAxis::Feature)?;
            let t_fe = tape.mean_reduce(teacher, ReduceAxis::Feature)?;
            let s_em = tape.mean_reduce(student, ReduceAxis::Embedding)?;
            let t_em = tape.mean_reduce(teacher, ReduceAxis::Embedding)?;
            let fe = soft_kl(tape, s_fe, t_fe, cfg.tau, cfg.kl_direction)?;
            let em = soft_kl(tape, s_em, t_em, cfg.tau, cfg.kl_direction)?;
            tape.add(fe, em)
        }
        Variant::KlSpatial => {
            let rows = shape[0] as f64;
            let kl = kl_softened(tape, student, teacher, cfg.tau, cfg.kl_direction)?;
            Ok(tape.scale(kl, cfg.tau * cfg.tau / rows))
        }
        Variant::L2Full => {
            let d = tape.sub(student, teacher)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean_all(sq))
        }
        Variant::L2Reduced => {
            let s_fe = tape.mean_reduce(student, ReduceAxis::Feature)?;
            let t_fe = tape.mean_reduce(teacher, ReduceAxis::Feature)?;
            let s_em = tape.mean_reduce(student, ReduceAxis::Embedding)?;
            let t_em = tape.mean_reduce(teacher, ReduceAxis::Embedding)?;
            let dfe = tape.sub(s_fe, t_fe)?;
            let dem = tape.sub(s_em, t_em)?;
            let sfe = tape.mul(dfe, dfe)?;
            let sem = tape.mul(dem, dem)?;
            let mfe = tape.mean_all(sfe);
            let mem = tape.mean_all(sem);
            let sum = tape.add(mfe, mem)?;
            // Averaging the two reductions keeps this variant dominated by
            // the full-tensor distance (mean contraction per channel).
            Ok(tape.scale(sum, 0.5))
        }
    }
}

/// Per-branch consistency against the prototype under the default variant.
pub fn branch_consistency(
    tape: &mut Tape,
    cfg: &ConsistencyConfig,
    branch_out: Var,
    prototype: Var,
) -> Result<Var> {
    variant_distance(tape, cfg, branch_out, prototype)
}

/// Old/new projected-output alignment; `p_old` must come from a frozen
/// snapshot forward so no gradient path exists into the old model.
pub fn projector_consistency(
    tape: &mut Tape,
    cfg: &ConsistencyConfig,
    p_new: Var,
    p_old: Var,
) -> Result<Var> {
    variant_distance(tape, cfg, p_new, p_old)
}

/// Combined per-layer contribution for one (branch, prototype, new, old)
/// tuple: branch-vs-prototype distance plus new-vs-old projector distance.
pub fn consistency_variant(
    tape: &mut Tape,
    cfg: &ConsistencyConfig,
    branch_out: Var,
    prototype: Var,
    p_new: Var,
    p_old: Var,
) -> Result<Var> {
    let c = variant_distance(tape, cfg, branch_out, prototype)?;
    let p = variant_distance(tape, cfg, p_new, p_old)?;
    tape.add(c, p)
}

/// Loss values for one layer, extracted for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub l_p: f64,
    pub l_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerConsistencyReport {
    pub layers: Vec<LayerTerms>,
    pub total: f64,
}

impl LayerConsistencyReport {
    pub fn l_c_sum(&self) -> f64 {
        self.layers.iter().map(|l| l.l_c.iter().sum::<f64>()).sum()
    }

    pub fn l_p_sum(&self) -> f64 {
        self.layers.iter().map(|l| l.l_p).sum()
    }
}

/// Mean over layers of (projector term + branch-term sum).
pub fn vcc_total(
    tape: &mut Tape,
    per_layer: &[(Option<Var>, Vec<Var>)],
) -> Result<(Var, LayerConsistencyReport)> {
    if per_layer.is_empty() {
        return Err(Error::contract("vcc_total needs at least one layer"));
    }
    let mut report = LayerConsistencyReport::default();
    let mut acc: Option<Var> = None;
    for (l_p, l_cs) in per_layer {
        let mut terms = LayerTerms { l_p: 0.0, l_c: Vec::with_capacity(l_cs.len()) };
        let mut layer_acc: Option<Var> = None;
        if let Some(lp) = l_p {
            terms.l_p = tape.value(*lp).item();
            layer_acc = Some(*lp);
        }
        for &lc in l_cs {
            terms.l_c.push(tape.value(lc).item());
            layer_acc = Some(match layer_acc {
                Some(a) => tape.add(a, lc)?,
                None => lc,
            });
        }
        if let Some(la) = layer_acc {
            acc = Some(match acc {
                Some(a) => tape.add(a, la)?,
                None => la,
            });
        }
        report.layers.push(terms);
    }
    let total = match acc {
        Some(a) => tape.scale(a, 1.0 / per_layer.len() as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    report.total = tape.value(total).item();
    Ok((total, report))
}

/// Assemble the full constraint for an encoder trace. `old_p` carries the
/// snapshot model's per-layer projected outputs for the same input; absent
/// on the first task, where the projector term is defined as zero.
pub fn vcc_loss_for_trace(
    tape: &mut Tape,
    cfg: &ConsistencyConfig,
    layers: &[LayerTrace],
    old_p: Option<&[Tensor]>,
) -> Result<(Var, LayerConsistencyReport)> {
    cfg.validate()?;
    if let Some(old) = old_p {
        if old.len() != layers.len() {
            return Err(Error::shape(format!(
                "old-model trace has {} layers, live model has {}",
                old.len(),
                layers.len()
            )));
        }
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for (ix, layer) in layers.iter().enumerate() {
        let mu = scenario_prototype(tape, &layer.branch_outs, cfg.prototype_grad)?;
        let mut l_cs = Vec::with_capacity(layer.branch_outs.len());
        for &b in &layer.branch_outs {
            l_cs.push(branch_consistency(tape, cfg, b, mu)?);
        }
        let l_p = match (old_p, layer.p) {
            (Some(old), Some(p_new)) => {
                let p_old = tape.constant(old[ix].clone());
                Some(projector_consistency(tape, cfg, p_new, p_old)?)
            }
            _ => None,
        };
        per_layer.push((l_p, l_cs));
    }
    vcc_total(tape, &per_layer)
}
