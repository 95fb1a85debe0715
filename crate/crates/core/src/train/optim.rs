//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the warmup-then-cosine learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::params::ParamSet;
use crate::tensor::scalar::Scalar;

/// First/second moment estimates, keyed like the parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState<E: Scalar> {
    pub m: HashMap<String, Array<E>>,
    pub v: HashMap<String, Array<E>>,
    pub step: u64,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn new() -> Self {
        OptimizerState {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
        }
    }
}

impl<E: Scalar> Default for OptimizerState<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight decay applies to weight matrices only; norms, biases, the mask
/// token, the scan's log-decay vector and other 1-d parameters are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with("/w")
        || name.ends_with("/w1")
        || name.ends_with("/w2")
        || name.ends_with("/proto")
}

/// Scale all gradients so their global l2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<E: Scalar>(params: &mut ParamSet<E>, max_norm: f64) -> Result<f64> {
    let norm = params.grad_norm().f64();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(E::c(max_norm / norm));
    }
    Ok(norm)
}

/// One AdamW update over every parameter with a gradient slot.
/// A non-finite gradient anywhere skips the whole step (logged, `Ok(false)`).
pub fn adamw_step<E: Scalar>(
    params: &mut ParamSet<E>,
    state: &mut OptimizerState<E>,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<bool> {
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let g = params
            .grad(name)
            .ok_or_else(|| Error::config("adamw_step needs gradient slots"))?;
        if !g.is_finite() {
            eprintln!("skipping optimizer step: non-finite gradient in {name}");
            return Ok(false);
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1e, b2e) = (E::c(b1), E::c(b2));
    let (ob1, ob2) = (E::c(1.0 - b1), E::c(1.0 - b2));

    for name in &names {
        let g = params.grad(name).expect("checked above").clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        *m = m.zip_map(&g, |mv, gv| b1e * mv + ob1 * gv)?;
        let m = m.clone();
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(g.shape()));
        *v = v.zip_map(&g, |vv, gv| b2e * vv + ob2 * gv * gv)?;
        let v = v.clone();

        let wd = if decays(name) { weight_decay } else { 0.0 };
        let decay_factor = E::c(1.0 - lr * wd);
        let lr_e = E::c(lr);
        let (bc1e, bc2e, epse) = (E::c(bc1), E::c(bc2), E::c(eps));
        let p = params.get_mut(name)?;
        let mut data = p.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            let mhat = m.data()[i] / bc1e;
            let vhat = v.data()[i] / bc2e;
            *x = *x * decay_factor - lr_e * mhat / (vhat.sqrt() + epse);
        }
        *p = Array::new(p.shape().to_vec(), data)?;
    }
    Ok(true)
}

/// Linear warmup to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
