//! AdamW with decoupled weight decay, plus the warmup/cosine rate schedule.

use crate::error::{Error, Result};

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Parallel to the parameter set handed to `adamw_step`.
    pub moments: Vec<Moments>,
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> OptimizerState {
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: param_sizes
                .iter()
                .map(|&n| Moments { m: vec![0.0; n], v: vec![0.0; n] })
                .collect(),
        }
    }
}

/// One AdamW update over a parameter group. `params[i]` and `grads[i]` must
/// match the sizes the state was built with. Weight decay is applied to the
/// parameters directly, never to the moment estimates.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::shape(format!(
            "optimizer group mismatch: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), mom) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        if p.len() != g.len() || p.len() != mom.m.len() {
            return Err(Error::shape("optimizer buffer size mismatch".to_string()));
        }
        for i in 0..p.len() {
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_frac` of steps,
/// then cosine decay to exactly 0 at `total_steps`. Continuous at the
/// junction: the warmup endpoint and the cosine start both equal `base_lr`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_frac: f64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("lr_schedule requires total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} exceeds total_steps {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_frac) || warmup_frac <= 0.0 {
        return Err(Error::contract(format!("warmup_frac {warmup_frac} outside (0, 1)")));
    }
    if base_lr <= 0.0 {
        return Err(Error::contract(format!("base_lr must be positive, got {base_lr}")));
    }
    let warmup = ((total_steps as f64) * warmup_frac).round().max(1.0) as usize;
    let warmup = warmup.min(total_steps);
    if step <= warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
